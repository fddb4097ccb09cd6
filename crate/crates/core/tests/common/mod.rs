#![allow(dead_code)]

use macrl::config::{RunConfig, Stage};
use macrl::data::{synth_dataset, ImageRecord, SynthConfig};
use macrl::model::ModelConfig;
use macrl::params::{Bindings, ParamStore};
use macrl::rng::Rng;
use macrl::tensor::{grad_check_coords, Graph, Scalar, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;

pub fn randn<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.sample::<f64, _>(StandardNormal)))
}

pub fn uniform<S: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.random_range(lo..hi)))
}

/// Fixed weights of unit total scale for turning a tensor output into a
/// scalar: `sum(y * w)` with `w ~ N(0, 1/n)`.
pub fn probe_weights<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    let n = shape.iter().product::<usize>().max(1) as f64;
    Tensor::from_fn(shape, |_| {
        S::of(rng.sample::<f64, _>(StandardNormal) / n.sqrt())
    })
}

pub fn weighted_sum<S: Scalar>(g: &mut Graph<S>, y: Var, w: &Tensor<S>) -> macrl::Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p)?)
}

/// Up to `k` distinct coordinates out of `n`.
pub fn coords(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        sample(rng, n, k).into_vec()
    }
}

/// Worst finite-difference error of `f` over the input and over sampled
/// coordinates of every parameter in `store`.
pub fn check_with_params<S, F>(
    store: &ParamStore<S>,
    input: &Tensor<S>,
    eps: f64,
    per_tensor: usize,
    rng: &mut Rng,
    f: F,
) -> f64
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &Bindings, Var) -> macrl::Result<Var>,
{
    let input_coords = coords(input.numel(), 4 * per_tensor, rng);
    let mut worst = grad_check_coords(
        |g: &mut Graph<S>, x| {
            let b = store.bind(g, |_| false);
            f(g, &b, x)
        },
        input,
        eps,
        &input_coords,
    );
    for (name, value) in store.iter() {
        let cs = coords(value.numel(), per_tensor, rng);
        let err = grad_check_coords(
            |g: &mut Graph<S>, p| {
                let x = g.constant(input.clone());
                let mut b = store.bind(g, |_| false);
                b.insert(name, p);
                f(g, &b, x)
            },
            value,
            eps,
            &cs,
        );
        worst = worst.max(err);
    }
    worst
}

/// Adds `N(0, std^2)` noise to every parameter so that biases, gains and
/// the mask token are generic.
pub fn jitter<S: Scalar>(store: &mut ParamStore<S>, std: f64, rng: &mut Rng) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = *v + S::of(std * rng.sample::<f64, _>(StandardNormal));
        }
    }
}

pub fn tiny_model(
    image: usize,
    patch: usize,
    depth: usize,
    dim: usize,
    heads: usize,
) -> ModelConfig {
    ModelConfig {
        image_size: image,
        patch_size: patch,
        channels: 3,
        enc_depth: depth,
        enc_heads: heads,
        enc_dim: dim,
        dec_dim: dim / 2,
        dec_heads: 1,
        proj_dim: dim / 2,
        num_classes: 2,
        freeze_patch_embed: false,
    }
}

/// A small pre-training run on `size`-pixel stripes.
pub fn tiny_run(size: usize, batch: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::for_stage(Stage::Pretrain);
    cfg.model = tiny_model(size, 4, 1, 16, 2);
    let t = &mut cfg.train;
    t.batch_size = batch;
    t.epochs = 100;
    t.warmup_epochs = 1;
    t.max_steps = 0;
    t.lr = 1e-3;
    t.bank_size = 64;
    t.seed = seed;
    cfg
}

pub fn stripes(n: usize, size: usize, noise: f64, seed: u64) -> Vec<ImageRecord> {
    synth_dataset(&SynthConfig {
        n,
        size,
        noise,
        seed,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config")
}

pub fn max_abs_diff<S: Scalar>(a: &ParamStore<S>, b: &ParamStore<S>) -> f64 {
    a.iter()
        .map(|(name, t)| {
            let u = b.get(name).expect("same paths");
            t.data()
                .iter()
                .zip(u.data())
                .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
