//! Exponential moving average of the online encoder and projector.

use crate::error::{invalid, Error, Result};
use crate::model::{ENCODER, PROJECTOR};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Whether a path belongs to the momentum-tracked groups.
pub fn is_tracked(path: &str) -> bool {
    path.starts_with(ENCODER) || path.starts_with(PROJECTOR)
}

/// Detached value copy of the tracked groups of `online`.
pub fn init_momentum_copy<S: Scalar>(online: &ParamStore<S>) -> ParamStore<S> {
    let mut target = online.clone();
    target.retain(is_tracked);
    target
}

/// `target <- m * target + (1 - m) * online` for every path of `target`.
pub fn ema_update<S: Scalar>(
    target: &mut ParamStore<S>,
    online: &ParamStore<S>,
    m: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(invalid(
            "ema_update",
            format!("momentum {m} must lie in [0, 1)"),
        ));
    }
    for (name, t) in target.iter() {
        let o = online
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if o.shape() != t.shape() {
            return Err(invalid(
                "ema_update",
                format!(
                    "`{name}` is {:?} online but {:?} in the target",
                    o.shape(),
                    t.shape()
                ),
            ));
        }
    }
    // lerp form: equal maps stay bit-identical
    let take = S::of(1.0 - m);
    for (name, t) in target.iter_mut() {
        let o = online.get(name).expect("checked above");
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = if m == 0.0 {
                ov
            } else {
                *tv + take * (ov - *tv)
            };
        }
    }
    Ok(())
}
