mod common;

use common::*;
use macrl::config::{RunConfig, Stage};
use macrl::data::{augment, AugKind, AugPolicy, ImageRecord, PolicyConfig};
use macrl::model::{keep_count, patchify, unpatchify, MaskPlan};
use macrl::momentum::{ema_update, init_momentum_copy};
use macrl::objectives::{info_nce_value, reconstruction_loss, ReconRegion};
use macrl::optim::lr_at;
use macrl::params::ParamStore;
use macrl::rng;
use macrl::tensor::{Graph, Tensor};
use macrl::train::epoch_order;
use proptest::prelude::*;

fn unit_rows(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t: Tensor<f64> = randn(shape, &mut rng::stream(seed, &[]));
    let d = *shape.last().unwrap();
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed: u64, scale in 0.1f64..30.0) {
        let x: Tensor<f64> = randn(&[rows, cols], &mut rng::stream(seed, &[]));
        let mut g = Graph::no_grad();
        let v = g.constant(x);
        let v = g.scale(v, scale).unwrap();
        let y = g.softmax(v).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn normalized_rows_have_unit_length(rows in 1usize..5, cols in 1usize..17, seed: u64) {
        let x: Tensor<f64> = randn(&[rows, cols], &mut rng::stream(seed, &[]));
        let mut g = Graph::no_grad();
        let v = g.constant(x);
        let y = g.l2_normalize(v).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_plans_are_consistent(batch in 1usize..4, n in 1usize..80, ratio in 0.0f64..0.99, seed: u64) {
        let Ok(keep) = keep_count(n, ratio) else { return Ok(()) };
        let plan = MaskPlan::random(batch, n, ratio, &mut rng::stream(seed, &[])).unwrap();
        prop_assert_eq!(plan.keep_count, keep);
        prop_assert!(keep >= 1 && keep <= n);
        for b in 0..batch {
            let shuffle = &plan.ids_shuffle[b];
            let restore = &plan.ids_restore[b];
            for t in 0..n {
                prop_assert_eq!(restore[shuffle[t]], t);
            }
            for (pos, &tok) in shuffle.iter().enumerate() {
                prop_assert_eq!(plan.mask[b][tok], u8::from(pos >= keep));
            }
            prop_assert_eq!(plan.mask[b].iter().filter(|&&m| m == 0).count(), keep);
        }
    }

    #[test]
    fn patchify_round_trips(grid in 1usize..5, patch in 1usize..5, seed: u64) {
        let size = grid * patch;
        let px: Tensor<f32> = uniform(&[size * size * 3], 0.0, 1.0, &mut rng::stream(seed, &[]));
        let img = ImageRecord::new(size, size, 3, px.into_data(), None).unwrap();
        let t: Tensor<f32> = patchify(&img, patch).unwrap();
        prop_assert_eq!(t.shape(), &[grid * grid, patch * patch * 3]);
        prop_assert_eq!(unpatchify(&t, patch, 3).unwrap().pixels, img.pixels);
    }

    #[test]
    fn contrastive_loss_is_bounded(k in 1usize..130, tau_i in 0usize..3, seed: u64) {
        let tau = [0.07, 0.2, 1.0][tau_i];
        let q = unit_rows(&[2, 6], seed);
        let kp = unit_rows(&[2, 6], seed.wrapping_add(1));
        let bank = unit_rows(&[k, 6], seed.wrapping_add(2));
        let loss = info_nce_value(&q, &kp, &bank, tau).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(loss <= ((k + 1) as f64).ln() + 2.0 / tau + 1e-9);
    }

    #[test]
    fn masked_entries_do_not_matter(seed: u64, ratio in 0.1f64..0.85, shift in -5.0f64..5.0) {
        let r = &mut rng::stream(seed, &[]);
        let plan = MaskPlan::random(2, 9, ratio, r).unwrap();
        let target: Tensor<f64> = randn(&[2, 9, 4], r);
        let pred: Tensor<f64> = randn(&[2, 9, 4], r);
        let mut moved = pred.clone();
        for (i, chunk) in moved.data_mut().chunks_mut(4).enumerate() {
            if plan.mask[i / 9][i % 9] == 1 {
                chunk.iter_mut().for_each(|v| *v += shift);
            }
        }
        let loss = |p: &Tensor<f64>| {
            let mut g = Graph::no_grad();
            let v = g.constant(p.clone());
            let l = reconstruction_loss(&mut g, v, &target, &plan, ReconRegion::Visible).unwrap();
            g.value(l).data()[0]
        };
        prop_assert_eq!(loss(&pred), loss(&moved));
    }

    #[test]
    fn ema_commutes_with_scaling(seed: u64, a in -3.0f64..3.0, m in 0.0f64..0.999) {
        let r = &mut rng::stream(seed, &[]);
        let mut online = ParamStore::new();
        online.insert("encoder.w", randn::<f64>(&[5], r));
        online.insert("projector.w", randn::<f64>(&[2, 2], r));
        let mut t0 = init_momentum_copy(&online);
        jitter(&mut t0, 1.0, r);
        let scale = |s: &ParamStore<f64>| {
            let mut s = s.clone();
            s.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= a));
            s
        };
        let mut plain = t0.clone();
        ema_update(&mut plain, &online, m).unwrap();
        let mut scaled = scale(&t0);
        ema_update(&mut scaled, &scale(&online), m).unwrap();
        let diff = max_abs_diff(&scaled, &scale(&plain));
        prop_assert!(diff < 1e-12, "{}", diff);
    }

    #[test]
    fn schedule_shape(warmup in 0usize..50, extra in 1usize..300, lr in 1e-5f64..1.0) {
        let total = warmup + extra;
        let min = lr * 1e-3;
        for s in 0..warmup {
            prop_assert!(lr_at(s + 1, lr, warmup, total, min) >= lr_at(s, lr, warmup, total, min));
        }
        for s in warmup..=total {
            let v = lr_at(s, lr, warmup, total, min);
            prop_assert!(lr_at(s + 1, lr, warmup, total, min) <= v);
            prop_assert!(v >= min && v <= lr);
        }
    }

    #[test]
    fn epoch_orders_are_permutations(seed: u64, epoch in 0u64..100, n in 1usize..200) {
        let mut o = epoch_order(seed, Stage::Pretrain, epoch, n);
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn configs_round_trip(lr in 1e-6f64..1.0, alpha in 0.0f64..20.0, ratio in 0.0f64..0.95, seed: u64, stage_i in 0usize..3) {
        let stage = [Stage::Pretrain, Stage::Finetune, Stage::Linprobe][stage_i];
        let mut cfg = RunConfig::for_stage(stage);
        cfg.train.lr = lr;
        cfg.train.alpha = alpha;
        cfg.train.mask_ratio = ratio;
        cfg.train.seed = seed;
        let back = RunConfig::parse(&cfg.to_text(), Stage::Pretrain).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentations_stay_in_bounds(seed: u64, kind_i in 0usize..4, src in 6usize..20) {
        let kind = [AugKind::PretrainStrong, AugKind::PretrainWeak, AugKind::Finetune, AugKind::Linprobe][kind_i];
        let px: Tensor<f32> = uniform(&[src * src * 3], 0.0, 1.0, &mut rng::stream(seed, &[]));
        let img = ImageRecord::new(src, src, 3, px.into_data(), None).unwrap();
        let policy = AugPolicy::new(kind, &PolicyConfig { size: 12, ..PolicyConfig::default() });
        let r = &mut rng::stream(seed, &[1]);
        for _ in 0..50 {
            let out = augment(&img, &policy, r);
            prop_assert_eq!((out.height, out.width, out.channels), (12, 12, 3));
            prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
