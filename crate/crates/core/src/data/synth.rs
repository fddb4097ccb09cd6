//! Two-class synthetic stripes.
//!
//! Class 0 images are horizontal sinusoidal stripes, class 1 vertical ones:
//!
//! ```text
//! v = 0.5 + contrast / 2 * sin(2 pi * coord / period + phase) + u,  u ~ U(-noise, noise)
//! ```
//!
//! clamped to `[0, 1]`, with `coord` the row for class 0 and the column for
//! class 1. The phase is drawn uniformly from `[0, phase_span)` radians.
//! For spans below `pi` the noise-free classes are linearly separable in
//! pixel space.

use std::f64::consts::PI;

use rand::Rng as _;

use super::ImageRecord;
use crate::error::{invalid, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub channels: usize,
    pub noise: f64,
    pub period: f64,
    pub phase_span: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 512,
            size: 16,
            channels: 3,
            noise: 0.3,
            period: 8.0,
            phase_span: PI / 2.0,
            contrast: 1.0,
            seed: 0,
        }
    }
}

/// `n` images alternating between the two classes, so any even `n` is
/// exactly balanced. Sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<ImageRecord>> {
    if cfg.n < 2 {
        return Err(invalid(
            "synth_dataset",
            format!("need at least 2 samples, got {}", cfg.n),
        ));
    }
    if cfg.size == 0 || cfg.channels == 0 || cfg.period <= 0.0 {
        return Err(invalid(
            "synth_dataset",
            "size, channels and period must be positive",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.contrast) || cfg.noise < 0.0 || cfg.phase_span < 0.0 {
        return Err(invalid(
            "synth_dataset",
            "contrast must lie in [0, 1]; noise and phase span must be non-negative",
        ));
    }
    Ok((0..cfg.n).map(|i| stripe_image(cfg, i)).collect())
}

fn stripe_image(cfg: &SynthConfig, index: usize) -> ImageRecord {
    let mut r = rng::stream(cfg.seed, &[tag::SYNTH, index as u64]);
    let label = index % 2;
    let phase = if cfg.phase_span > 0.0 {
        r.random_range(0.0..cfg.phase_span)
    } else {
        0.0
    };
    let mut img = ImageRecord::blank(cfg.size, cfg.size, cfg.channels);
    for y in 0..cfg.size {
        for x in 0..cfg.size {
            let coord = if label == 0 { y } else { x } as f64;
            let base = 0.5 + 0.5 * cfg.contrast * (2.0 * PI * coord / cfg.period + phase).sin();
            for c in 0..cfg.channels {
                let u = if cfg.noise > 0.0 {
                    r.random_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                };
                img.set(y, x, c, (base + u).clamp(0.0, 1.0) as f32);
            }
        }
    }
    img.label = Some(label);
    img
}
