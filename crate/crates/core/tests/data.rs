mod common;

use std::io::Write;

use common::*;
use macrl::data::{
    augment, augment_traced, load_cifar_binary, parse_cifar_records, synth_dataset, two_views,
    AugKind, AugOp, AugPolicy, CifarMeta, ImageRecord, PolicyConfig, SynthConfig,
    CIFAR_RECORD_BYTES,
};
use macrl::rng;
use macrl::Error;

const KINDS: [AugKind; 4] = [
    AugKind::PretrainStrong,
    AugKind::PretrainWeak,
    AugKind::Finetune,
    AugKind::Linprobe,
];

fn photo(size: usize, seed: u64) -> ImageRecord {
    let t: macrl::tensor::Tensor<f32> =
        uniform(&[size * size * 3], 0.0, 1.0, &mut rng::stream(seed, &[]));
    ImageRecord::new(size, size, 3, t.into_data(), Some(1)).unwrap()
}

fn only(size: usize, f: impl FnOnce(&mut PolicyConfig)) -> PolicyConfig {
    let mut cfg = PolicyConfig::disabled(size);
    f(&mut cfg);
    cfg
}

#[test]
fn disabled_policy_only_resizes() {
    let img = photo(12, 1);
    for kind in KINDS {
        let same = augment(
            &img,
            &AugPolicy::new(kind, &PolicyConfig::disabled(12)),
            &mut rng::stream(2, &[]),
        );
        assert_eq!(same, img);
        let (out, trace) = augment_traced(
            &img,
            &AugPolicy::new(kind, &PolicyConfig::disabled(8)),
            &mut rng::stream(2, &[]),
        );
        assert_eq!(trace, [AugOp::Resize]);
        assert_eq!((out.height, out.width, out.channels), (8, 8, 3));
    }
}

#[test]
fn solarize_threshold() {
    let img = ImageRecord::new(2, 2, 1, vec![0.8, 0.3, 0.5, 0.49], None).unwrap();
    let policy = AugPolicy::new(AugKind::PretrainStrong, &only(2, |c| c.solarize_prob = 1.0));
    let (out, trace) = augment_traced(&img, &policy, &mut rng::stream(3, &[]));
    assert_eq!(trace.len(), 2);
    for (o, e) in out.pixels.iter().zip([0.2f32, 0.3, 0.5, 0.49]) {
        assert!((o - e).abs() < 1e-6, "{:?}", out.pixels);
    }
}

#[test]
fn seeds_decide_the_output() {
    let img = photo(16, 4);
    let policy = AugPolicy::new(
        AugKind::PretrainStrong,
        &PolicyConfig {
            size: 16,
            ..PolicyConfig::default()
        },
    );
    let a = augment(&img, &policy, &mut rng::stream(5, &[]));
    let b = augment(&img, &policy, &mut rng::stream(5, &[]));
    assert_eq!(a, b);
    let crop = AugPolicy::new(AugKind::Linprobe, &only(16, |c| c.crop_prob = 1.0));
    let differ = (0..20)
        .filter(|&s| {
            augment(&img, &crop, &mut rng::stream(s, &[]))
                != augment(&img, &crop, &mut rng::stream(s + 100, &[]))
        })
        .count();
    assert!(differ >= 19);
}

#[test]
fn two_views_shapes_and_identity() {
    let img = photo(8, 6);
    let cfg = PolicyConfig {
        size: 8,
        ..PolicyConfig::default()
    };
    let (strong, weak) = (
        AugPolicy::new(AugKind::PretrainStrong, &cfg),
        AugPolicy::new(AugKind::PretrainWeak, &cfg),
    );
    let (x1, x2) = two_views(&img, &strong, &weak, &mut rng::stream(7, &[]));
    assert!(x1.same_shape(&x2));
    let off = PolicyConfig::disabled(8);
    let (strong, weak) = (
        AugPolicy::new(AugKind::PretrainStrong, &off),
        AugPolicy::new(AugKind::PretrainWeak, &off),
    );
    let (x1, x2) = two_views(&img, &strong, &weak, &mut rng::stream(7, &[]));
    assert_eq!(x1, img);
    assert_eq!(x2, img);
}

#[test]
fn weak_view_is_strong_minus_solarize() {
    let cfg = PolicyConfig::default();
    let strong = AugPolicy::new(AugKind::PretrainStrong, &cfg);
    let weak = AugPolicy::new(AugKind::PretrainWeak, &cfg);
    let without: Vec<_> = strong
        .steps
        .iter()
        .filter(|s| !matches!(s.op, AugOp::Solarize { .. }))
        .cloned()
        .collect();
    assert_eq!(weak.steps, without);
    assert_eq!(strong.steps.len(), weak.steps.len() + 1);
    assert_eq!(
        strong.op_names(),
        [
            "resize",
            "crop",
            "color-jitter",
            "grayscale",
            "blur",
            "solarize",
            "flip"
        ]
    );
}

/// Independent decoder: label byte, then planes R, G, B of 32x32 row-major.
fn reference_pixel(rec: &[u8], y: usize, x: usize, c: usize) -> f32 {
    rec[1 + c * 1024 + y * 32 + x] as f32 / 255.0
}

fn handcrafted(label: u8, salt: usize) -> Vec<u8> {
    let mut rec = vec![label];
    rec.extend((0..3072).map(|i| ((i * 7 + i / 1024 * 31 + salt) % 256) as u8));
    rec
}

#[test]
fn cifar_records_match_the_reference_decoder() {
    let rec = handcrafted(7, 3);
    assert_eq!(rec.len(), CIFAR_RECORD_BYTES);
    let imgs = parse_cifar_records(&rec, CifarMeta::default()).unwrap();
    assert_eq!(imgs.len(), 1);
    assert_eq!(imgs[0].label, Some(7));
    for y in 0..32 {
        for x in 0..32 {
            for c in 0..3 {
                assert_eq!(imgs[0].at(y, x, c), reference_pixel(&rec, y, x, c));
            }
        }
    }
}

#[test]
fn cifar_file_of_two_records() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(&handcrafted(1, 0)).unwrap();
    f.write_all(&vec![0u8; CIFAR_RECORD_BYTES]).unwrap();
    let imgs = load_cifar_binary(f.path(), CifarMeta::default()).unwrap();
    assert_eq!(imgs.len(), 2);
    assert_eq!(imgs[1].label, Some(0));
    assert!(imgs[1].pixels.iter().all(|&v| v == 0.0));
}

#[test]
fn cifar_errors_carry_offsets() {
    let mut bytes = handcrafted(2, 1);
    bytes.extend(handcrafted(3, 2));
    bytes.truncate(bytes.len() - 5);
    match parse_cifar_records(&bytes, CifarMeta::default()) {
        Err(Error::Dataset { offset, .. }) => assert_eq!(offset, CIFAR_RECORD_BYTES as u64),
        other => panic!("{other:?}"),
    }
    let mut bytes = handcrafted(2, 1);
    bytes.extend(handcrafted(12, 2));
    match parse_cifar_records(&bytes, CifarMeta::default()) {
        Err(Error::Dataset { offset, msg }) => {
            assert_eq!(offset, CIFAR_RECORD_BYTES as u64);
            assert!(msg.contains("12"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn synthetic_balance_and_seeding() {
    let cfg = SynthConfig {
        n: 100,
        size: 8,
        seed: 3,
        ..SynthConfig::default()
    };
    let data = synth_dataset(&cfg).unwrap();
    assert_eq!(data.iter().filter(|r| r.label == Some(0)).count(), 50);
    assert_eq!(data.iter().filter(|r| r.label == Some(1)).count(), 50);
    assert_eq!(data, synth_dataset(&cfg).unwrap());
    assert_ne!(
        data,
        synth_dataset(&SynthConfig {
            seed: 4,
            ..cfg.clone()
        })
        .unwrap()
    );
    assert!(synth_dataset(&SynthConfig { n: 1, ..cfg }).is_err());
}

/// Solves `(A^T A + lambda I) w = A^T y` by Gaussian elimination.
fn ridge(rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![vec![0.0; d + 1]; d];
    for (r, &t) in rows.iter().zip(y) {
        for i in 0..d {
            for j in 0..d {
                m[i][j] += r[i] * r[j];
            }
            m[i][d] += r[i] * t;
        }
    }
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += lambda;
    }
    for c in 0..d {
        let p = (c..d)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
            .unwrap();
        m.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = m[r][c] / m[c][c];
                let pivot = m[c].clone();
                for (x, y) in m[r][c..=d].iter_mut().zip(&pivot[c..=d]) {
                    *x -= f * y;
                }
            }
        }
    }
    (0..d).map(|i| m[i][d] / m[i][i]).collect()
}

#[test]
fn noise_free_stripes_are_linearly_separable() {
    let cfg = SynthConfig {
        n: 100,
        size: 8,
        noise: 0.0,
        seed: 8,
        ..SynthConfig::default()
    };
    let features = |set: &[ImageRecord]| -> Vec<Vec<f64>> {
        set.iter()
            .map(|r| r.pixels.iter().map(|&v| v as f64).chain([1.0]).collect())
            .collect()
    };
    let target = |set: &[ImageRecord]| -> Vec<f64> {
        set.iter()
            .map(|r| if r.label == Some(1) { 1.0 } else { -1.0 })
            .collect()
    };
    let train = synth_dataset(&cfg).unwrap();
    let w = ridge(&features(&train), &target(&train), 1e-6);
    let accuracy = |set: &[ImageRecord]| {
        let hits = features(set)
            .iter()
            .zip(target(set))
            .filter(|(x, t)| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() * t > 0.0)
            .count();
        hits as f64 / set.len() as f64
    };
    assert_eq!(accuracy(&train), 1.0);
}

#[test]
fn outputs_stay_in_range_and_shape() {
    let img = photo(20, 9);
    let cfg = PolicyConfig {
        size: 16,
        ..PolicyConfig::default()
    };
    for kind in KINDS {
        let policy = AugPolicy::new(kind, &cfg);
        let r = &mut rng::stream(10, &[kind as u64]);
        for _ in 0..10_000 {
            let out = augment(&img, &policy, r);
            assert_eq!((out.height, out.width, out.channels), (16, 16, 3));
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn weak_view_never_solarizes() {
    let img = photo(8, 11);
    let cfg = PolicyConfig {
        size: 8,
        solarize_prob: 1.0,
        ..PolicyConfig::default()
    };
    let weak = AugPolicy::new(AugKind::PretrainWeak, &cfg);
    let strong = AugPolicy::new(AugKind::PretrainStrong, &cfg);
    let r = &mut rng::stream(12, &[]);
    for _ in 0..10_000 {
        let (_, trace) = augment_traced(&img, &weak, r);
        assert!(trace.iter().all(|op| !matches!(op, AugOp::Solarize { .. })));
    }
    let (_, trace) = augment_traced(&img, &strong, r);
    assert!(trace.iter().any(|op| matches!(op, AugOp::Solarize { .. })));
}

#[test]
fn grayscale_equalizes_channels() {
    let policy = AugPolicy::new(AugKind::PretrainStrong, &only(10, |c| c.gray_prob = 1.0));
    let out = augment(&photo(10, 13), &policy, &mut rng::stream(14, &[]));
    for px in out.pixels.chunks(3) {
        assert!(px[0] == px[1] && px[1] == px[2]);
    }
}

#[test]
fn flip_is_an_involution() {
    let img = photo(10, 15);
    let policy = AugPolicy::new(AugKind::Linprobe, &only(10, |c| c.flip_prob = 1.0));
    let r = &mut rng::stream(16, &[]);
    let once = augment(&img, &policy, r);
    assert_ne!(once, img);
    assert_eq!(once.at(3, 0, 1), img.at(3, 9, 1));
    assert_eq!(augment(&once, &policy, r), img);
}

#[test]
fn image_records_are_validated() {
    assert!(ImageRecord::new(1, 1, 1, vec![1.5], None).is_err());
    assert!(ImageRecord::new(1, 2, 1, vec![0.5], None).is_err());
    assert!(ImageRecord::new(1, 1, 1, vec![0.5], Some(3)).is_ok());
}
