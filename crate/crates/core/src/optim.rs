//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments keyed like the parameters they track.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerState<S> {
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        OptimizerState {
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }

    pub fn cast<T: Scalar>(&self) -> OptimizerState<T> {
        OptimizerState {
            m: self.m.cast(),
            v: self.v.cast(),
            step: self.step,
        }
    }
}

/// Biases, layer-norm gains and layer-norm biases are not decayed.
pub fn decays(path: &str) -> bool {
    !(path.ends_with("_b") || path.ends_with("_bias") || path.ends_with("_gain"))
}

/// One update of every parameter that has a gradient in `grads`:
///
/// ```text
/// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
/// p = p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps) - lr wd p
/// ```
pub fn adamw_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &Grads<S>,
    state: &mut OptimizerState<S>,
    hp: &AdamW,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(invalid(
                "adamw_step",
                format!(
                    "`{name}` has shape {:?}, gradient has {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(name) {
                if t.shape() != p.shape() {
                    return Err(invalid(
                        "adamw_step",
                        format!("moment of `{name}` has shape {:?}", t.shape()),
                    ));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(hp.beta1), S::of(hp.beta2));
    let c1 = S::of(1.0 - hp.beta1.powi(t));
    let c2 = S::of(1.0 - hp.beta2.powi(t));
    let (lr, eps) = (S::of(hp.lr), S::of(hp.eps));
    let one = S::one();
    for (name, g) in grads.iter() {
        if !state.m.contains(name) {
            state.m.insert(name, Tensor::zeros(g.shape()));
            state.v.insert(name, Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name).expect("inserted").data_mut();
        let v = state.v.get_mut(name).expect("inserted").data_mut();
        let wd = if decays(name) {
            S::of(hp.weight_decay)
        } else {
            S::zero()
        };
        let p = params.get_mut(name).expect("checked").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] = p[i] - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * p[i];
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then cosine decay to
/// `min_lr` at `total`.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize, min_lr: f64) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if step == warmup {
        return lr;
    }
    if step >= total {
        return min_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(name: &str, v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_f64(&[1], &[v]).unwrap());
        s
    }

    fn value(s: &ParamStore<f64>, name: &str) -> f64 {
        s.get(name).unwrap().data()[0]
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut p = scalar_store("w", 1.0);
        let hp = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        adamw_step(
            &mut p,
            &scalar_store("w", 3.0),
            &mut OptimizerState::new(),
            &hp,
        )
        .unwrap();
        assert_eq!(value(&p, "w"), 1.0);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut p = scalar_store("w", 1.0);
        let hp = AdamW {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamW::default()
        };
        adamw_step(
            &mut p,
            &scalar_store("w", 0.0),
            &mut OptimizerState::new(),
            &hp,
        )
        .unwrap();
        assert!((value(&p, "w") - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store("w", 1.0);
        let hp = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            eps: 1e-12,
            ..AdamW::default()
        };
        adamw_step(
            &mut p,
            &scalar_store("w", 1.0),
            &mut OptimizerState::new(),
            &hp,
        )
        .unwrap();
        assert!((value(&p, "w") - 0.9).abs() < 1e-10);
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut p = scalar_store("fc_b", 1.0);
        let hp = AdamW {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        };
        adamw_step(
            &mut p,
            &scalar_store("fc_b", 0.0),
            &mut OptimizerState::new(),
            &hp,
        )
        .unwrap();
        assert_eq!(value(&p, "fc_b"), 1.0);
        assert!(decays("encoder.patch_embed_w") && decays("decoder.mask_token"));
        assert!(!decays("encoder.norm_gain") && !decays("encoder.norm_bias"));
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_at(0, 0.5, 10, 100, 0.001), 0.0);
        assert_eq!(lr_at(10, 0.5, 10, 100, 0.001), 0.5);
        assert_eq!(lr_at(100, 0.5, 10, 100, 0.001), 0.001);
        assert!((lr_at(55, 0.5, 10, 100, 0.0) - 0.25).abs() < 1e-12);
        assert_eq!(lr_at(3, 0.5, 0, 4, 0.5), 0.5);
    }
}
