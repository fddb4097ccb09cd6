mod common;

use common::*;
use macrl::config::{RunConfig, Stage};
use macrl::model::{Macrl, MaskPlan};
use macrl::momentum::init_momentum_copy;
use macrl::objectives::{
    combined_loss, info_nce, info_nce_value, macrl_step, reconstruction_loss, MemoryBank,
    ObjectiveConfig, ReconRegion,
};
use macrl::rng::{self, Rng};
use macrl::tensor::{Graph, Tensor};

fn unit_rows(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let mut t: Tensor<f64> = randn(shape, rng);
    let d = *shape.last().unwrap();
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Cross-entropy with label 0 over `[q.k, q.b_1, ..]/tau`, row by row.
fn brute_force(q: &Tensor<f64>, k: &Tensor<f64>, bank: &Tensor<f64>, tau: f64) -> f64 {
    let d = bank.shape()[1];
    let rows: Vec<_> = q.data().chunks(d).zip(k.data().chunks(d)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for (qr, kr) in &rows {
        let logits: Vec<f64> = std::iter::once(dot(qr, kr))
            .chain(bank.data().chunks(d).map(|b| dot(qr, b)))
            .map(|s| s / tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[0];
    }
    total / rows.len() as f64
}

#[test]
fn three_orthogonal_negatives() {
    let q = Tensor::<f64>::from_f64(&[4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let bank =
        Tensor::from_f64(&[3, 4], &[0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
    let loss = info_nce_value(&q, &q, &bank, 1.0).unwrap();
    assert!((loss - (1.0 + 3.0 / std::f64::consts::E).ln()).abs() < 1e-12);
    assert!((loss - 0.74368).abs() < 1e-4, "{loss}");
}

#[test]
fn equal_similarities() {
    let r = &mut rng::stream(1, &[]);
    for k in [1, 7, 64] {
        let q = unit_rows(&[5], r);
        let bank = Tensor::from_fn(&[k, 5], |i| q.data()[i % 5]);
        let loss = info_nce_value(&q, &q, &bank, 0.2).unwrap();
        assert!((loss - ((k + 1) as f64).ln()).abs() < 1e-10);
    }
}

#[test]
fn bank_of_64_matches_brute_force() {
    let r = &mut rng::stream(2, &[]);
    for tau in [0.07, 0.2, 1.0] {
        let q = unit_rows(&[4, 16], r);
        let k = unit_rows(&[4, 16], r);
        let bank = unit_rows(&[64, 16], r);
        let got = info_nce_value(&q, &k, &bank, tau).unwrap();
        assert!((got - brute_force(&q, &k, &bank, tau)).abs() < 1e-6);
    }
}

#[test]
fn query_gradient_matches_differences() {
    let r = &mut rng::stream(3, &[]);
    let q = unit_rows(&[2, 8], r);
    let k = unit_rows(&[2, 8], r);
    let bank = unit_rows(&[16, 8], r);
    // q enters through a normalization so the perturbed point stays unit norm
    let err = macrl::tensor::grad_check(
        |g: &mut Graph<f64>, x| -> macrl::Result<_> {
            let x = g.l2_normalize(x)?;
            info_nce(g, x, &k, &bank, 0.2)
        },
        &q,
        1e-5,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn bounds_hold() {
    let r = &mut rng::stream(4, &[]);
    for (k, tau) in [(1, 0.07), (32, 0.2), (128, 1.0)] {
        let q = unit_rows(&[3, 8], r);
        let kp = unit_rows(&[3, 8], r);
        let bank = unit_rows(&[k, 8], r);
        let loss = info_nce_value(&q, &kp, &bank, tau).unwrap();
        assert!(loss >= 0.0 && loss <= ((k + 1) as f64).ln() + 2.0 / tau);
    }
}

#[test]
fn rejects_bad_temperature_and_norms() {
    let q = Tensor::<f64>::from_f64(&[2], &[1.0, 0.0]).unwrap();
    let bank = Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
    assert!(info_nce_value(&q, &q, &bank, -1.0).is_err());
    let short = Tensor::from_f64(&[2], &[0.99, 0.0]).unwrap();
    assert!(info_nce_value(&q, &short, &bank, 1.0).is_err());
    let fine = Tensor::from_f64(&[2], &[0.9995, 0.0]).unwrap();
    assert!(info_nce_value(&q, &fine, &bank, 1.0).is_ok());
}

fn recon(pred: &Tensor<f64>, target: &Tensor<f64>, plan: &MaskPlan, region: ReconRegion) -> f64 {
    let mut g = Graph::no_grad();
    let p = g.constant(pred.clone());
    let l = reconstruction_loss(&mut g, p, target, plan, region).unwrap();
    g.value(l).data()[0]
}

#[test]
fn reconstruction_examples() {
    let r = &mut rng::stream(5, &[]);
    let plan = MaskPlan::random(2, 8, 0.5, r).unwrap();
    let target: Tensor<f64> = randn(&[2, 8, 6], r);
    assert_eq!(recon(&target, &target, &plan, ReconRegion::Visible), 0.0);
    let offset = |on_visible: f64, on_masked: f64| {
        let mut t = target.clone();
        for (i, chunk) in t.data_mut().chunks_mut(6).enumerate() {
            let add = if plan.mask[i / 8][i % 8] == 0 {
                on_visible
            } else {
                on_masked
            };
            chunk.iter_mut().for_each(|v| *v += add);
        }
        t
    };
    let v = recon(&offset(0.5, 0.0), &target, &plan, ReconRegion::Visible);
    assert!((v - 0.5).abs() < 1e-12);
    assert_eq!(
        recon(&offset(0.0, 3.0), &target, &plan, ReconRegion::Visible),
        0.0
    );
    assert!((recon(&offset(0.0, 3.0), &target, &plan, ReconRegion::Masked) - 3.0).abs() < 1e-12);
    assert!((recon(&offset(1.0, 3.0), &target, &plan, ReconRegion::All) - 2.0).abs() < 1e-12);
}

#[test]
fn reconstruction_rejects_mismatched_shapes() {
    let plan = MaskPlan::unmasked(1, 4);
    let mut g = Graph::<f64>::no_grad();
    let p = g.constant(Tensor::zeros(&[1, 4, 3]));
    assert!(reconstruction_loss(
        &mut g,
        p,
        &Tensor::zeros(&[1, 4, 2]),
        &plan,
        ReconRegion::Visible
    )
    .is_err());
}

#[test]
fn combined_examples() {
    assert!((combined_loss(2.0, 0.5, 0.1) - 0.7).abs() < 1e-12);
    assert_eq!(combined_loss(3.7, 0.25, 0.0), 0.25);
    assert_eq!(combined_loss(3.7, 0.0, 1.0), 3.7);
}

#[test]
fn both_readings_of_alpha_are_expressible() {
    for (text, alpha) in [("alpha = 0.1", 0.1), ("alpha = 10", 10.0)] {
        let cfg = RunConfig::parse(text, Stage::Pretrain).unwrap();
        assert_eq!(cfg.train.objective().alpha, alpha);
    }
}

#[test]
fn symmetric_views_give_equal_halves() {
    let cfg = tiny_model(8, 4, 2, 16, 2);
    let model = Macrl::<f64>::new(cfg.clone()).unwrap();
    let r = &mut rng::stream(6, &[]);
    let mut params = model.init_params(r);
    jitter(&mut params, 0.05, r);
    let momentum = init_momentum_copy(&params);
    let d = cfg.proj_dim;
    let bank = MemoryBank::from_keys(Tensor::eye(d), 0).unwrap();
    let imgs = stripes(3, 8, 0.3, 7);
    let plan = MaskPlan::unmasked(3, cfg.num_patches());
    let mut g = Graph::new();
    let on = params.bind(&mut g, |_| true);
    let mo = momentum.bind(&mut g, |_| false);
    let out = macrl_step(
        &mut g,
        &model,
        &on,
        &mo,
        &bank,
        [&imgs, &imgs],
        [&plan, &plan],
        &ObjectiveConfig::default(),
    )
    .unwrap();
    let [a, b] = out.report.cl_parts;
    assert!((a - b).abs() < 1e-5);
    assert!(
        (out.report.total - combined_loss(out.report.cl, out.report.mim, out.report.alpha)).abs()
            < 1e-6
    );
}

#[test]
fn alpha_zero_leaves_reconstruction() {
    let cfg = tiny_model(8, 4, 1, 16, 2);
    let model = Macrl::<f64>::new(cfg.clone()).unwrap();
    let r = &mut rng::stream(8, &[]);
    let params = model.init_params(r);
    let momentum = init_momentum_copy(&params);
    let bank = MemoryBank::random(16, cfg.proj_dim, r).unwrap();
    let imgs = [stripes(2, 8, 0.3, 9), stripes(2, 8, 0.3, 10)];
    let plans = [
        MaskPlan::random(2, 4, 0.5, r).unwrap(),
        MaskPlan::random(2, 4, 0.5, r).unwrap(),
    ];
    let obj = ObjectiveConfig {
        alpha: 0.0,
        ..ObjectiveConfig::default()
    };
    let mut g = Graph::new();
    let on = params.bind(&mut g, |_| true);
    let mo = momentum.bind(&mut g, |_| false);
    let out = macrl_step(
        &mut g,
        &model,
        &on,
        &mo,
        &bank,
        [&imgs[0], &imgs[1]],
        [&plans[0], &plans[1]],
        &obj,
    )
    .unwrap();
    assert_eq!(out.report.total, out.report.mim);
    assert!(out.report.cl > 0.0);
}

#[test]
fn bank_fifo_examples() {
    let r = &mut rng::stream(11, &[]);
    let mut bank = MemoryBank::<f64>::random(8, 4, r).unwrap();
    let a = unit_rows(&[3, 4], r);
    let b = unit_rows(&[3, 4], r);
    bank.enqueue(&a).unwrap();
    bank.enqueue(&b).unwrap();
    assert_eq!(bank.cursor(), 6);
    assert_eq!(bank.capacity(), 8);
    for (i, row) in bank.keys().data().chunks(4).take(6).enumerate() {
        let src = if i < 3 {
            &a.data()[i * 4..i * 4 + 4]
        } else {
            &b.data()[(i - 3) * 4..(i - 2) * 4]
        };
        for (x, y) in row.iter().zip(src) {
            assert!((x - y).abs() < 1e-15);
        }
    }
    bank.enqueue(&unit_rows(&[2, 4], r)).unwrap();
    assert_eq!(bank.cursor(), 0);
    for row in bank.keys().data().chunks(4) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
    }
    assert!(bank.enqueue(&unit_rows(&[9, 4], r)).is_err());
    assert!(bank.enqueue(&unit_rows(&[2, 5], r)).is_err());
}

#[test]
fn bank_starts_full_of_unit_keys() {
    let bank = MemoryBank::<f32>::random(100, 12, &mut rng::stream(12, &[])).unwrap();
    assert_eq!(bank.keys().shape(), &[100, 12]);
    for row in bank.keys().data().chunks(12) {
        assert!((row.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs() < 1e-5);
    }
}
