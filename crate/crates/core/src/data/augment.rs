//! Augmentation policies.
//!
//! A policy is an ordered list of steps, each firing with its own
//! probability. The pre-training order is fixed: resize, crop, color jitter,
//! grayscale, blur, solarize, flip. Every op clamps its output to `[0, 1]`.

use std::f64::consts::PI;

use rand::Rng as _;

use super::ImageRecord;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugKind {
    PretrainStrong,
    PretrainWeak,
    Finetune,
    Linprobe,
}

impl AugKind {
    pub fn name(self) -> &'static str {
        match self {
            AugKind::PretrainStrong => "pretrain-strong",
            AugKind::PretrainWeak => "pretrain-weak",
            AugKind::Finetune => "finetune",
            AugKind::Linprobe => "linprobe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    /// Bilinear resize of the whole image to the output size.
    Resize,
    /// Random resized crop: area fraction in `[min_scale, 1]`, aspect ratio
    /// log-uniform in `[3/4, 4/3]`.
    Crop {
        min_scale: f64,
    },
    /// Brightness, contrast, saturation and hue perturbations, applied in
    /// that order with factors drawn uniformly around identity.
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale,
    /// Separable Gaussian blur, sigma uniform in `[sigma_min, sigma_max]`.
    Blur {
        sigma_min: f64,
        sigma_max: f64,
    },
    /// `v -> 1 - v` for `v >= threshold`.
    Solarize {
        threshold: f32,
    },
    Flip,
    /// One of rotate, translate, contrast, brightness or sharpness at a
    /// random bounded magnitude.
    AutoAugment,
    /// One square hole of side `size / 4`, filled with zeros.
    CutOut,
}

impl AugOp {
    pub fn name(&self) -> &'static str {
        match self {
            AugOp::Resize => "resize",
            AugOp::Crop { .. } => "crop",
            AugOp::ColorJitter { .. } => "color-jitter",
            AugOp::Grayscale => "grayscale",
            AugOp::Blur { .. } => "blur",
            AugOp::Solarize { .. } => "solarize",
            AugOp::Flip => "flip",
            AugOp::AutoAugment => "auto-augment",
            AugOp::CutOut => "cutout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugStep {
    pub op: AugOp,
    pub prob: f64,
}

/// Probabilities and magnitudes shared by the built-in policies.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub size: usize,
    pub crop_prob: f64,
    pub crop_min_scale: f64,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub gray_prob: f64,
    pub blur_prob: f64,
    pub solarize_prob: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            size: 32,
            crop_prob: 1.0,
            crop_min_scale: 0.08,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            gray_prob: 0.2,
            blur_prob: 1.0,
            solarize_prob: 0.2,
        }
    }
}

impl PolicyConfig {
    /// Every probability zero: the policies reduce to a resize.
    pub fn disabled(size: usize) -> Self {
        PolicyConfig {
            size,
            crop_prob: 0.0,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            gray_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            ..PolicyConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    pub kind: AugKind,
    pub size: usize,
    pub steps: Vec<AugStep>,
}

impl AugPolicy {
    pub fn new(kind: AugKind, cfg: &PolicyConfig) -> Self {
        let step = |op, prob| AugStep { op, prob };
        let crop = step(
            AugOp::Crop {
                min_scale: cfg.crop_min_scale,
            },
            cfg.crop_prob,
        );
        let flip = step(AugOp::Flip, cfg.flip_prob);
        let mut steps = vec![step(AugOp::Resize, 1.0)];
        match kind {
            AugKind::PretrainStrong | AugKind::PretrainWeak => {
                steps.extend([
                    crop,
                    step(
                        AugOp::ColorJitter {
                            brightness: cfg.brightness,
                            contrast: cfg.contrast,
                            saturation: cfg.saturation,
                            hue: cfg.hue,
                        },
                        cfg.jitter_prob,
                    ),
                    step(AugOp::Grayscale, cfg.gray_prob),
                    step(
                        AugOp::Blur {
                            sigma_min: 0.1,
                            sigma_max: 2.0,
                        },
                        cfg.blur_prob,
                    ),
                ]);
                if kind == AugKind::PretrainStrong {
                    steps.push(step(AugOp::Solarize { threshold: 0.5 }, cfg.solarize_prob));
                }
                steps.push(flip);
            }
            AugKind::Finetune => {
                let on = if cfg.crop_prob > 0.0 { 1.0 } else { 0.0 };
                steps.extend([
                    crop,
                    flip,
                    step(AugOp::AutoAugment, on),
                    step(AugOp::CutOut, on),
                ]);
            }
            AugKind::Linprobe => steps.extend([crop, flip]),
        }
        AugPolicy {
            kind,
            size: cfg.size,
            steps,
        }
    }

    /// Op names in application order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.steps.iter().map(|s| s.op.name()).collect()
    }
}

/// Applies `policy` to `img`.
pub fn augment(img: &ImageRecord, policy: &AugPolicy, rng: &mut Rng) -> ImageRecord {
    augment_traced(img, policy, rng).0
}

/// Like [`augment`], also returning the ops that fired, in order.
pub fn augment_traced(
    img: &ImageRecord,
    policy: &AugPolicy,
    rng: &mut Rng,
) -> (ImageRecord, Vec<AugOp>) {
    let mut out = img.clone();
    let mut trace = Vec::new();
    for step in &policy.steps {
        let fire = match step.op {
            AugOp::Resize => true,
            _ => step.prob > 0.0 && rng.random_bool(step.prob.min(1.0)),
        };
        if !fire {
            continue;
        }
        out = match step.op {
            AugOp::Resize => resize(&out, policy.size),
            AugOp::Crop { min_scale } => random_resized_crop(&out, policy.size, min_scale, rng),
            AugOp::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => color_jitter(out, brightness, contrast, saturation, hue, rng),
            AugOp::Grayscale => grayscale(out),
            AugOp::Blur {
                sigma_min,
                sigma_max,
            } => {
                let sigma = rng.random_range(sigma_min..=sigma_max);
                gaussian_blur(&out, blur_kernel_size(policy.size), sigma)
            }
            AugOp::Solarize { threshold } => solarize(out, threshold),
            AugOp::Flip => flip_horizontal(&out),
            AugOp::AutoAugment => auto_augment(&out, rng),
            AugOp::CutOut => cutout(out, rng),
        };
        trace.push(step.op);
    }
    out.label = img.label;
    (out, trace)
}

/// The strong and weak views of one image, drawn one after the other from
/// the same stream.
pub fn two_views(
    img: &ImageRecord,
    strong: &AugPolicy,
    weak: &AugPolicy,
    rng: &mut Rng,
) -> (ImageRecord, ImageRecord) {
    let x1 = augment(img, strong, rng);
    let x2 = augment(img, weak, rng);
    (x1, x2)
}

/// `ceil(size / 10)`, bumped to the next odd number.
pub fn blur_kernel_size(size: usize) -> usize {
    let k = size.div_ceil(10).max(1);
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Bilinear sample at continuous source coordinates, clamped at the border.
fn sample(img: &ImageRecord, y: f64, x: f64, c: usize) -> f64 {
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.at(y0, x0, c) as f64 * (1.0 - fx) + img.at(y0, x1, c) as f64 * fx;
    let bot = img.at(y1, x0, c) as f64 * (1.0 - fx) + img.at(y1, x1, c) as f64 * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resamples the box `(top, left, h, w)` of `img` to `size x size`.
fn crop_resize(img: &ImageRecord, top: f64, left: f64, h: f64, w: f64, size: usize) -> ImageRecord {
    let mut out = ImageRecord::blank(size, size, img.channels);
    out.label = img.label;
    let (sy, sx) = (h / size as f64, w / size as f64);
    for oy in 0..size {
        let y = top + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..size {
            let x = left + (ox as f64 + 0.5) * sx - 0.5;
            for c in 0..img.channels {
                out.set(oy, ox, c, clamp01(sample(img, y, x, c)));
            }
        }
    }
    out
}

pub(crate) fn resize(img: &ImageRecord, size: usize) -> ImageRecord {
    if img.height == size && img.width == size {
        return img.clone();
    }
    crop_resize(img, 0.0, 0.0, img.height as f64, img.width as f64, size)
}

fn random_resized_crop(
    img: &ImageRecord,
    size: usize,
    min_scale: f64,
    rng: &mut Rng,
) -> ImageRecord {
    let (h, w) = (img.height as f64, img.width as f64);
    let area = h * w;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(min_scale.min(1.0)..=1.0);
        let ratio = rng.random_range(lo..=hi).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h && cw >= 1.0 && ch >= 1.0 {
            let top = rng.random_range(0.0..=h - ch);
            let left = rng.random_range(0.0..=w - cw);
            return crop_resize(img, top, left, ch, cw, size);
        }
    }
    resize(img, size)
}

fn luma(img: &ImageRecord, y: usize, x: usize) -> f64 {
    if img.channels == 3 {
        0.299 * img.at(y, x, 0) as f64
            + 0.587 * img.at(y, x, 1) as f64
            + 0.114 * img.at(y, x, 2) as f64
    } else {
        (0..img.channels)
            .map(|c| img.at(y, x, c) as f64)
            .sum::<f64>()
            / img.channels as f64
    }
}

fn factor(spread: f64, rng: &mut Rng) -> f64 {
    if spread <= 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - spread).max(0.0)..=1.0 + spread)
    }
}

fn blend_with(
    img: &mut ImageRecord,
    base: impl Fn(&ImageRecord, usize, usize, usize) -> f64,
    f: f64,
) {
    let src = img.clone();
    for y in 0..src.height {
        for x in 0..src.width {
            for c in 0..src.channels {
                let b = base(&src, y, x, c);
                img.set(y, x, c, clamp01(b + (src.at(y, x, c) as f64 - b) * f));
            }
        }
    }
}

fn adjust_brightness(img: &mut ImageRecord, f: f64) {
    blend_with(img, |_, _, _, _| 0.0, f);
}

fn adjust_contrast(img: &mut ImageRecord, f: f64) {
    let n = (img.height * img.width) as f64;
    let mut mean = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += luma(img, y, x);
        }
    }
    mean /= n;
    blend_with(img, |_, _, _, _| mean, f);
}

fn color_jitter(
    mut img: ImageRecord,
    b: f64,
    c: f64,
    s: f64,
    h: f64,
    rng: &mut Rng,
) -> ImageRecord {
    adjust_brightness(&mut img, factor(b, rng));
    adjust_contrast(&mut img, factor(c, rng));
    if img.channels == 3 {
        blend_with(&mut img, |im, y, x, _| luma(im, y, x), factor(s, rng));
        let shift = if h > 0.0 {
            rng.random_range(-h..=h)
        } else {
            0.0
        };
        rotate_hue(&mut img, shift);
    }
    img
}

/// Hue rotation by `turns` of a full circle in YIQ space.
fn rotate_hue(img: &mut ImageRecord, turns: f64) {
    if turns == 0.0 {
        return;
    }
    let (sin, cos) = (2.0 * PI * turns).sin_cos();
    for px in img.pixels.chunks_mut(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let i = 0.596 * r - 0.274 * g - 0.322 * b;
        let q = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i, q) = (i * cos - q * sin, i * sin + q * cos);
        px[0] = clamp01(y + 0.956 * i + 0.621 * q);
        px[1] = clamp01(y - 0.272 * i - 0.647 * q);
        px[2] = clamp01(y - 1.106 * i + 1.703 * q);
    }
}

pub(crate) fn grayscale(mut img: ImageRecord) -> ImageRecord {
    for y in 0..img.height {
        for x in 0..img.width {
            let v = clamp01(luma(&img, y, x));
            for c in 0..img.channels {
                img.set(y, x, c, v);
            }
        }
    }
    img
}

pub(crate) fn gaussian_blur(img: &ImageRecord, kernel: usize, sigma: f64) -> ImageRecord {
    let r = (kernel / 2) as isize;
    let mut weights: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let mut tmp = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let v: f64 = (-r..=r)
                    .zip(&weights)
                    .map(|(d, w)| w * img.at(y, clamp(x as isize + d, img.width), c) as f64)
                    .sum();
                tmp.set(y, x, c, clamp01(v));
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let v: f64 = (-r..=r)
                    .zip(&weights)
                    .map(|(d, w)| w * tmp.at(clamp(y as isize + d, img.height), x, c) as f64)
                    .sum();
                out.set(y, x, c, clamp01(v));
            }
        }
    }
    out
}

pub(crate) fn solarize(mut img: ImageRecord, threshold: f32) -> ImageRecord {
    for v in &mut img.pixels {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    img
}

pub(crate) fn flip_horizontal(img: &ImageRecord) -> ImageRecord {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, img.width - 1 - x, c, img.at(y, x, c));
            }
        }
    }
    out
}

/// Resamples through an affine map from output to source coordinates about
/// the image centre. Out-of-range samples become 0.
fn warp(img: &ImageRecord, angle: f64, dy: f64, dx: f64) -> ImageRecord {
    let mut out = ImageRecord::blank(img.height, img.width, img.channels);
    let (cy, cx) = (
        (img.height as f64 - 1.0) / 2.0,
        (img.width as f64 - 1.0) / 2.0,
    );
    let (sin, cos) = angle.sin_cos();
    for y in 0..img.height {
        for x in 0..img.width {
            let (ry, rx) = (y as f64 - cy - dy, x as f64 - cx - dx);
            let sy = cos * ry - sin * rx + cy;
            let sx = sin * ry + cos * rx + cx;
            if sy < -0.5 || sx < -0.5 || sy > img.height as f64 - 0.5 || sx > img.width as f64 - 0.5
            {
                continue;
            }
            for c in 0..img.channels {
                out.set(y, x, c, clamp01(sample(img, sy, sx, c)));
            }
        }
    }
    out
}

fn auto_augment(img: &ImageRecord, rng: &mut Rng) -> ImageRecord {
    let mut out = img.clone();
    match rng.random_range(0..5) {
        0 => {
            out = warp(
                img,
                rng.random_range(-30.0f64..=30.0).to_radians(),
                0.0,
                0.0,
            )
        }
        1 => {
            let t = 0.3 * img.height as f64;
            out = warp(img, 0.0, rng.random_range(-t..=t), rng.random_range(-t..=t));
        }
        2 => adjust_contrast(&mut out, rng.random_range(0.1..=1.9)),
        3 => adjust_brightness(&mut out, rng.random_range(0.1..=1.9)),
        _ => {
            let smooth = gaussian_blur(img, 3, 1.0);
            let f = rng.random_range(0.1..=1.9);
            blend_with(&mut out, |_, y, x, c| smooth.at(y, x, c) as f64, f);
        }
    }
    out
}

fn cutout(mut img: ImageRecord, rng: &mut Rng) -> ImageRecord {
    let side = (img.height / 4).max(1);
    let cy = rng.random_range(0..img.height) as isize;
    let cx = rng.random_range(0..img.width) as isize;
    let half = side as isize / 2;
    for y in (cy - half).max(0)..(cy - half + side as isize).min(img.height as isize) {
        for x in (cx - half).max(0)..(cx - half + side as isize).min(img.width as isize) {
            for c in 0..img.channels {
                img.set(y as usize, x as usize, c, 0.0);
            }
        }
    }
    img
}
