//! Attention rollout and heat-map export.
//!
//! Per layer, head-averaged attention is mixed with the identity and its rows
//! renormalized; the rollout is the product of these matrices from the first
//! layer to the last. With no class token, a patch's relevance is the mean
//! attention it receives across all query tokens of the rollout.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::ImageRecord;
use crate::error::{invalid, Result};
use crate::model::{Macrl, MaskPlan};
use crate::params::ParamStore;
use crate::tensor::{Graph, Scalar, Tensor};

/// Per-layer attention probabilities `[batch, heads, T, T]` of the unmasked
/// encoder.
pub fn attention_maps<S: Scalar>(
    model: &Macrl<S>,
    params: &ParamStore<S>,
    images: &[ImageRecord],
) -> Result<Vec<Tensor<S>>> {
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g, |_| false);
    let x = g.constant(model.patchify_batch(images)?);
    let plan = MaskPlan::unmasked(images.len(), model.config().num_patches());
    let enc = model.encode(&mut g, &b, x, &plan)?;
    Ok(enc.attention.iter().map(|&a| g.value(a).clone()).collect())
}

/// Head-averaged attention plus identity with unit row sums, for sample
/// `index` of one layer's `[batch, heads, T, T]` probabilities.
pub fn mixed_attention<S: Scalar>(layer: &Tensor<S>, index: usize) -> Result<Vec<f64>> {
    let [b, h, t, t2] = *layer.shape() else {
        return Err(invalid(
            "rollout",
            format!("expected [batch, heads, T, T], got {:?}", layer.shape()),
        ));
    };
    if t != t2 || index >= b {
        return Err(invalid(
            "rollout",
            format!("sample {index} of attention {:?}", layer.shape()),
        ));
    }
    let per = t * t;
    let base = index * h * per;
    let mut a = vec![0.0; per];
    for head in 0..h {
        for (dst, &v) in a
            .iter_mut()
            .zip(&layer.data()[base + head * per..base + (head + 1) * per])
        {
            *dst += v.to_f64_lossy() / h as f64;
        }
    }
    for i in 0..t {
        a[i * t + i] += 1.0;
    }
    for row in a.chunks_mut(t) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(a)
}

/// Rollout `[T, T]` (row-major) of one sample across `layers`.
pub fn attention_rollout<S: Scalar>(layers: &[Tensor<S>], index: usize) -> Result<Vec<f64>> {
    let first = layers
        .first()
        .ok_or_else(|| invalid("rollout", "no attention layers"))?;
    let t = first.shape().get(2).copied().unwrap_or(0);
    let mut acc: Vec<f64> = (0..t * t)
        .map(|i| if i / t == i % t { 1.0 } else { 0.0 })
        .collect();
    for layer in layers {
        let a = mixed_attention(layer, index)?;
        if a.len() != t * t {
            return Err(invalid("rollout", "layers disagree on token count"));
        }
        // later layers act on the output of earlier ones
        let mut next = vec![0.0; t * t];
        for i in 0..t {
            for k in 0..t {
                let aik = a[i * t + k];
                for j in 0..t {
                    next[i * t + j] += aik * acc[k * t + j];
                }
            }
        }
        acc = next;
    }
    Ok(acc)
}

/// Column means of a `[T, T]` rollout, one value per patch in row-major
/// grid order.
pub fn relevance(rollout: &[f64], tokens: usize) -> Vec<f64> {
    (0..tokens)
        .map(|j| (0..tokens).map(|i| rollout[i * tokens + j]).sum::<f64>() / tokens as f64)
        .collect()
}

/// Nearest-neighbour upsampling of a `grid x grid` map, min-max scaled to
/// `[0, 1]`, rendered as a blue-to-red RGB image of side `grid * patch`.
pub fn heatmap(rel: &[f64], grid: usize, patch: usize) -> ImageRecord {
    let (lo, hi) = rel
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let size = grid * patch;
    let mut img = ImageRecord::blank(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let v = ((rel[(y / patch) * grid + x / patch] - lo) / span) as f32;
            img.set(y, x, 0, v);
            img.set(y, x, 1, 1.0 - (2.0 * v - 1.0).abs());
            img.set(y, x, 2, 1.0 - v);
        }
    }
    img
}

/// Binary PPM (`P6`, maxval 255). Single-channel images are written as gray.
pub fn write_ppm(path: &Path, img: &ImageRecord) -> Result<()> {
    let mut out = Vec::with_capacity(img.height * img.width * 3 + 20);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let v = img.at(y, x, if img.channels == 3 { c } else { 0 });
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}
