//! Losses, the memory bank of negatives and the symmetric two-view step.
//!
//! ```text
//! cl    = nce(q1, k2) + nce(q2, k1)
//! mim   = l1(decode(z1), x1) + l1(decode(z2), x2)
//! total = alpha * cl + mim
//! ```
//!
//! `q` are the online projections of the masked views, `k` the momentum
//! projections of the unmasked views. Keys only ever enter the graph as
//! constants.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};

use crate::data::ImageRecord;
use crate::error::{invalid, Result};
use crate::model::{Macrl, MaskPlan};
use crate::params::Bindings;
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Accepted deviation from unit norm for embeddings entering the loss.
pub const UNIT_TOL: f64 = 1e-3;

fn row_norms<S: Scalar>(t: &Tensor<S>) -> impl Iterator<Item = f64> + '_ {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d).map(|r| {
        r.iter()
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    })
}

fn check_unit<S: Scalar>(what: &str, t: &Tensor<S>) -> Result<()> {
    if let Some((i, n)) = row_norms(t)
        .enumerate()
        .find(|(_, n)| (n - 1.0).abs() > UNIT_TOL)
    {
        return Err(invalid(
            "info_nce",
            format!("{what} row {i} has norm {n}, expected 1"),
        ));
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit-norm keys.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<S> {
    keys: Tensor<S>,
    cursor: usize,
}

impl<S: Scalar> MemoryBank<S> {
    /// `capacity` normalized standard-normal draws.
    pub fn random(capacity: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid(
                "memory bank",
                "capacity and dimension must be positive",
            ));
        }
        let mut data = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            data.extend(row.iter().map(|v| S::of(v / n)));
        }
        Self::from_keys(Tensor::new(vec![capacity, dim], data)?, 0)
    }

    pub fn from_keys(keys: Tensor<S>, cursor: usize) -> Result<Self> {
        if keys.rank() != 2 {
            return Err(invalid(
                "memory bank",
                format!("keys must be [capacity, dim], got {:?}", keys.shape()),
            ));
        }
        if cursor >= keys.shape()[0] {
            return Err(invalid(
                "memory bank",
                format!("cursor {cursor} outside capacity {}", keys.shape()[0]),
            ));
        }
        check_unit("bank key", &keys)?;
        Ok(MemoryBank { keys, cursor })
    }

    pub fn capacity(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn keys(&self) -> &Tensor<S> {
        &self.keys
    }

    /// Overwrites `keys.len()` slots starting at the cursor, wrapping around,
    /// and advances the cursor. Rows are renormalized on the way in.
    pub fn enqueue(&mut self, keys: &Tensor<S>) -> Result<()> {
        let (k, d) = (self.capacity(), self.dim());
        let [b, kd] = *keys.shape() else {
            return Err(invalid(
                "bank_update",
                format!("keys must be [batch, dim], got {:?}", keys.shape()),
            ));
        };
        if kd != d {
            return Err(invalid(
                "bank_update",
                format!("key dim {kd} does not match bank dim {d}"),
            ));
        }
        if b > k {
            return Err(invalid(
                "bank_update",
                format!("batch of {b} keys exceeds capacity {k}"),
            ));
        }
        check_unit("key", keys)?;
        let bank = self.keys.data_mut();
        for row in keys.data().chunks(d) {
            let n = row
                .iter()
                .map(|v| v.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt();
            let dst = &mut bank[self.cursor * d..(self.cursor + 1) * d];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = S::of(v.to_f64_lossy() / n);
            }
            self.cursor = (self.cursor + 1) % k;
        }
        Ok(())
    }
}

fn as_rows<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    match *t.shape() {
        [d] => Ok(t.clone().reshaped(vec![1, d])?),
        [_, _] => Ok(t.clone()),
        ref s => Err(invalid(
            "info_nce",
            format!("expected [dim] or [batch, dim], got {s:?}"),
        )),
    }
}

/// Contrastive loss of queries `q: [batch, dim]` (or `[dim]`) against their
/// positive keys and the bank, averaged over the batch. Column 0 of the
/// `1 + K` logits is the positive.
pub fn info_nce<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k_pos: &Tensor<S>,
    bank: &Tensor<S>,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(
            "info_nce",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    let q_rows = as_rows(g.value(q))?;
    let k_rows = as_rows(k_pos)?;
    let (b, d) = (q_rows.shape()[0], q_rows.shape()[1]);
    if k_rows.shape() != q_rows.shape() {
        return Err(invalid(
            "info_nce",
            format!(
                "query shape {:?} does not match key shape {:?}",
                q_rows.shape(),
                k_rows.shape()
            ),
        ));
    }
    if bank.rank() != 2 || bank.shape()[1] != d {
        return Err(invalid(
            "info_nce",
            format!("bank {:?} does not hold {d}-d keys", bank.shape()),
        ));
    }
    check_unit("query", &q_rows)?;
    check_unit("positive key", &k_rows)?;
    check_unit("bank key", bank)?;
    let k = bank.shape()[0];

    let q = g.reshape(q, &[b, d])?;
    let kp = g.constant(k_rows);
    let pos = g.mul(q, kp)?;
    let pos = g.sum_axis(pos, 1)?;
    let pos = g.reshape(pos, &[b, 1])?;
    let bank_t = Tensor::from_fn(&[d, k], |i| bank.data()[(i % k) * d + i / k]);
    let bank_t = g.constant(bank_t);
    let neg = g.matmul(q, bank_t)?;
    let logits = g.concat(&[pos, neg], 1)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let logp = g.log_softmax(logits)?;
    let pick = g.constant(Tensor::from_fn(&[b, k + 1], |i| {
        if i % (k + 1) == 0 {
            S::one()
        } else {
            S::zero()
        }
    }));
    let picked = g.mul(logp, pick)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / b as f64)?)
}

/// [`info_nce`] on plain values.
pub fn info_nce_value<S: Scalar>(
    q: &Tensor<S>,
    k_pos: &Tensor<S>,
    bank: &Tensor<S>,
    tau: f64,
) -> Result<f64> {
    let mut g = Graph::no_grad();
    let qv = g.constant(q.clone());
    let loss = info_nce(&mut g, qv, k_pos, bank, tau)?;
    Ok(g.value(loss).item()?.to_f64_lossy())
}

/// Which tokens the pixel loss covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReconRegion {
    #[default]
    Visible,
    Masked,
    All,
}

impl ReconRegion {
    pub fn name(self) -> &'static str {
        match self {
            ReconRegion::Visible => "visible",
            ReconRegion::Masked => "masked",
            ReconRegion::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "visible" => Some(ReconRegion::Visible),
            "masked" => Some(ReconRegion::Masked),
            "all" => Some(ReconRegion::All),
            _ => None,
        }
    }

    fn covers(self, masked: bool) -> bool {
        match self {
            ReconRegion::Visible => !masked,
            ReconRegion::Masked => masked,
            ReconRegion::All => true,
        }
    }
}

/// Mean absolute error between `pred` and `target` (`[batch, tokens, dim]`)
/// over the entries of the tokens `region` selects. An empty selection
/// gives 0.
pub fn reconstruction_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    target: &Tensor<S>,
    plan: &MaskPlan,
    region: ReconRegion,
) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(invalid(
            "reconstruction_loss",
            format!(
                "prediction {:?} and target {:?} differ in shape",
                g.shape(pred),
                target.shape()
            ),
        ));
    }
    let [b, n, d] = *target.shape() else {
        return Err(invalid(
            "reconstruction_loss",
            format!("expected [batch, tokens, dim], got {:?}", target.shape()),
        ));
    };
    plan.check_batch(b, n)?;
    let mut weights = Vec::with_capacity(b * n * d);
    let mut count = 0usize;
    for row in &plan.mask {
        for &m in row {
            let on = region.covers(m == 1);
            count += on as usize;
            weights.extend(std::iter::repeat_n(
                if on { S::one() } else { S::zero() },
                d,
            ));
        }
    }
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let diff = g.abs(diff)?;
    let w = g.constant(Tensor::new(vec![b, n, d], weights)?);
    let diff = g.mul(diff, w)?;
    let total = g.sum(diff)?;
    Ok(g.scale(total, 1.0 / (count.max(1) * d) as f64)?)
}

pub fn combined_loss(cl: f64, mim: f64, alpha: f64) -> f64 {
    alpha * cl + mim
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub alpha: f64,
    pub region: ReconRegion,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            tau: 0.2,
            alpha: 0.1,
            region: ReconRegion::Visible,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub cl: f64,
    pub mim: f64,
    pub total: f64,
    pub alpha: f64,
    /// `nce(q1, k2)` and `nce(q2, k1)`.
    pub cl_parts: [f64; 2],
    pub mim_parts: [f64; 2],
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cl={} mim={} total={} alpha={}",
            self.cl, self.mim, self.total, self.alpha
        )
    }
}

/// Result of one two-view step. `total` lives on the caller's graph.
#[derive(Clone, Debug)]
pub struct StepOutput<S> {
    pub report: LossReport,
    pub total: Var,
    /// Momentum keys of the two views, in batch order.
    pub keys: [Tensor<S>; 2],
}

/// Momentum projections of unmasked images. The momentum parameters are
/// read from `momentum` on `g`; the result is a plain value.
pub fn momentum_keys<S: Scalar>(
    g: &mut Graph<S>,
    model: &Macrl<S>,
    momentum: &Bindings,
    patches: &Tensor<S>,
) -> Result<Tensor<S>> {
    let [b, n, _] = *patches.shape() else {
        return Err(invalid(
            "macrl_step",
            format!("expected patch batch, got {:?}", patches.shape()),
        ));
    };
    let x = g.constant(patches.clone());
    let enc = model.encode(g, momentum, x, &MaskPlan::unmasked(b, n))?;
    let k = model.project(g, momentum, enc.latent)?;
    Ok(g.value(k).clone())
}

/// One symmetric two-view step on `g`. `plans` are the masks of `x1` and
/// `x2`; the bank is read, never written.
#[allow(clippy::too_many_arguments)]
pub fn macrl_step<S: Scalar>(
    g: &mut Graph<S>,
    model: &Macrl<S>,
    online: &Bindings,
    momentum: &Bindings,
    bank: &MemoryBank<S>,
    views: [&[ImageRecord]; 2],
    plans: [&MaskPlan; 2],
    cfg: &ObjectiveConfig,
) -> Result<StepOutput<S>> {
    let patches = [
        model.patchify_batch(views[0])?,
        model.patchify_batch(views[1])?,
    ];
    let keys = [
        momentum_keys(g, model, momentum, &patches[0])?,
        momentum_keys(g, model, momentum, &patches[1])?,
    ];
    let mut cl = Vec::with_capacity(2);
    let mut mim = Vec::with_capacity(2);
    for v in 0..2 {
        let x = g.constant(patches[v].clone());
        let z = model.encode(g, online, x, plans[v])?;
        let q = model.project(g, online, z.latent)?;
        cl.push(info_nce(g, q, &keys[1 - v], bank.keys(), cfg.tau)?);
        let pred = model.decode(g, online, z.latent, plans[v])?;
        mim.push(reconstruction_loss(
            g,
            pred,
            &patches[v],
            plans[v],
            cfg.region,
        )?);
    }
    let cl_sum = g.add(cl[0], cl[1])?;
    let mim_sum = g.add(mim[0], mim[1])?;
    let scaled = g.scale(cl_sum, cfg.alpha)?;
    let total = g.add(scaled, mim_sum)?;

    let val = |g: &Graph<S>, v: Var| g.value(v).data()[0].to_f64_lossy();
    let report = LossReport {
        cl: val(g, cl_sum),
        mim: val(g, mim_sum),
        total: val(g, total),
        alpha: cfg.alpha,
        cl_parts: [val(g, cl[0]), val(g, cl[1])],
        mim_parts: [val(g, mim[0]), val(g, mim[1])],
    };
    Ok(StepOutput {
        report,
        total,
        keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn orthogonal_negatives() {
        let q = Tensor::<f64>::from_f64(&[4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let bank =
            Tensor::from_f64(&[3, 4], &[0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
        let loss = info_nce_value(&q, &q, &bank, 1.0).unwrap();
        assert!((loss - (1.0 + 3.0 * (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn equal_similarities_give_log_k_plus_one() {
        let q = Tensor::<f64>::from_f64(&[2], &unit(&[1.0, 1.0])).unwrap();
        let bank = Tensor::from_fn(&[5, 2], |i| q.data()[i % 2]);
        let loss = info_nce_value(&q, &q, &bank, 0.2).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let q = Tensor::<f64>::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let bank = Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        assert!(info_nce_value(&q, &q, &bank, 0.0).is_err());
        let long = Tensor::from_f64(&[2], &[2.0, 0.0]).unwrap();
        assert!(info_nce_value(&long, &q, &bank, 1.0).is_err());
    }

    #[test]
    fn bank_fifo() {
        let mut r = rng::stream(0, &[]);
        let mut bank = MemoryBank::<f64>::random(8, 4, &mut r).unwrap();
        let batch = |c: f64| Tensor::from_fn(&[3, 4], |i| if i % 4 == 0 { c } else { 0.0 });
        bank.enqueue(&batch(1.0)).unwrap();
        bank.enqueue(&batch(-1.0)).unwrap();
        assert_eq!(bank.cursor(), 6);
        assert_eq!(bank.keys().data()[0], 1.0);
        assert_eq!(bank.keys().data()[5 * 4], -1.0);
        bank.enqueue(&batch(1.0)).unwrap();
        assert_eq!(bank.cursor(), 1);
        assert!(bank
            .enqueue(&Tensor::from_fn(&[9, 4], |i| (i % 4 == 0) as u8 as f64))
            .is_err());
    }

    #[test]
    fn reconstruction_regions() {
        let plan = MaskPlan::random(2, 4, 0.5, &mut rng::stream(3, &[])).unwrap();
        let target = Tensor::<f64>::from_fn(&[2, 4, 3], |i| i as f64 * 0.1);
        let mut shifted = target.clone();
        for (t, chunk) in shifted.data_mut().chunks_mut(3).enumerate() {
            let offset = if plan.mask[t / 4][t % 4] == 0 {
                0.5
            } else {
                7.0
            };
            chunk.iter_mut().for_each(|v| *v += offset);
        }
        let eval = |region| {
            let mut g = Graph::no_grad();
            let p = g.constant(shifted.clone());
            let l = reconstruction_loss(&mut g, p, &target, &plan, region).unwrap();
            g.value(l).item().unwrap()
        };
        assert!((eval(ReconRegion::Visible) - 0.5).abs() < 1e-12);
        assert!((eval(ReconRegion::Masked) - 7.0).abs() < 1e-12);
        assert!((eval(ReconRegion::All) - 3.75).abs() < 1e-12);
    }

    #[test]
    fn combined_arithmetic() {
        assert!((combined_loss(2.0, 0.5, 0.1) - 0.7).abs() < 1e-12);
        assert_eq!(combined_loss(2.0, 0.5, 0.0), 0.5);
        assert_eq!(combined_loss(2.0, 0.0, 1.0), 2.0);
    }
}
