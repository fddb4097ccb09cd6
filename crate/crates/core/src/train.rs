//! Pre-training, fine-tuning and linear probing loops.
//!
//! One optimizer step of pre-training:
//!
//! 1. take the next `batch_size` samples of the epoch's shuffled order and
//!    split them into `accum_steps` micro-batches;
//! 2. per micro-batch, run the two-view step against the bank as it stood
//!    at the start of the step and accumulate `loss / accum_steps` gradients;
//! 3. AdamW on the online encoder, decoder and projector;
//! 4. one EMA update of the momentum copies;
//! 5. enqueue the first-view keys of the whole batch, then the second-view
//!    keys.
//!
//! Augmentation and masking randomness is drawn per sample from streams keyed
//! by `(seed, step, sample index)`, so the split into micro-batches does not
//! change what any sample sees.

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Stage, TrainConfig};
use crate::data::{augment, AugKind, AugPolicy, ImageRecord};
use crate::error::{invalid, Error, Result};
use crate::metrics::MetricsRow;
use crate::model::{init_head, Macrl, MaskPlan, HEAD};
use crate::momentum::{ema_update, init_momentum_copy};
use crate::objectives::{macrl_step, LossReport, MemoryBank};
use crate::optim::{adamw_step, lr_at, AdamW, OptimizerState};
use crate::params::{Grads, ParamStore};
use crate::rng::{self, tag, Rng};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};

/// Receives progress from the training loops. Every method defaults to a
/// no-op.
pub trait Observer {
    fn on_row(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: u64) -> Result<()> {
        Ok(())
    }

    /// `last` is set for the checkpoint written when the loop ends.
    fn on_checkpoint(&mut self, _ckpt: &Checkpoint, _last: bool) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Collects rows in memory.
#[derive(Default)]
pub struct RowLog(pub Vec<MetricsRow>);

impl Observer for RowLog {
    fn on_row(&mut self, row: &MetricsRow) -> Result<()> {
        self.0.push(*row);
        Ok(())
    }
}

/// Step layout of a run over `n` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: usize,
    pub total: usize,
    pub warmup: usize,
}

impl Schedule {
    /// Full epochs only; the tail of each epoch's order is dropped. A
    /// `max_steps` cap shrinks the warmup in proportion.
    pub fn new(train: &TrainConfig, n: usize) -> Result<Self> {
        let steps_per_epoch = n / train.batch_size;
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {n} available samples",
                train.batch_size
            )));
        }
        let full = steps_per_epoch * train.epochs;
        let full_warmup = steps_per_epoch * train.warmup_epochs;
        let (total, warmup) = if train.max_steps > 0 && train.max_steps < full {
            let w = (full_warmup as f64 * train.max_steps as f64 / full as f64).round() as usize;
            (train.max_steps, w)
        } else {
            (full, full_warmup)
        };
        Ok(Schedule {
            steps_per_epoch,
            total,
            warmup: warmup.min(total),
        })
    }

    /// Learning rate of optimizer step `step` (0-based): the schedule value
    /// at `step + 1`, so the first update already moves.
    pub fn lr(&self, train: &TrainConfig, step: u64) -> f64 {
        lr_at(
            step as usize + 1,
            train.lr,
            self.warmup,
            self.total,
            train.lr * train.min_lr_ratio,
        )
    }
}

fn stage_tag(stage: Stage) -> u64 {
    match stage {
        Stage::Pretrain => 0,
        Stage::Finetune => 1,
        Stage::Linprobe => 2,
    }
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, stage: Stage, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(
        seed,
        &[tag::ORDER, stage_tag(stage), epoch],
    ));
    idx
}

fn hyper(train: &TrainConfig, lr: f64) -> AdamW {
    AdamW {
        lr,
        weight_decay: train.weight_decay,
        beta1: train.beta1,
        beta2: train.beta2,
        eps: train.adam_eps,
    }
}

fn add_grads<S: Scalar>(acc: &mut Option<Grads<S>>, g: Grads<S>) -> Result<()> {
    match acc {
        None => *acc = Some(g),
        Some(a) => a.add_scaled(&g, S::one())?,
    }
    Ok(())
}

fn non_finite(step: u64, last: &LossReport) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
            step,
            last: last.to_string(),
        },
        other => other,
    }
}

/// Outcome of one pre-training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub row: MetricsRow,
    pub report: LossReport,
}

/// Pre-training state: online parameters, momentum copies, bank and
/// optimizer moments.
#[derive(Clone, Debug)]
pub struct Pretrainer<S> {
    pub cfg: RunConfig,
    pub model: Macrl<S>,
    pub params: ParamStore<S>,
    pub momentum: ParamStore<S>,
    pub bank: MemoryBank<S>,
    pub opt: OptimizerState<S>,
    /// Optimizer steps taken.
    pub step: u64,
    pub last_report: LossReport,
    strong: AugPolicy,
    weak: AugPolicy,
}

impl<S: Scalar> Pretrainer<S> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Macrl::new(cfg.model.clone())?;
        let seed = cfg.train.seed;
        let params = model.init_params(&mut rng::stream(seed, &[tag::INIT]));
        let momentum = init_momentum_copy(&params);
        let bank = MemoryBank::random(
            cfg.train.bank_size,
            cfg.model.proj_dim,
            &mut rng::stream(seed, &[tag::BANK]),
        )?;
        Ok(Self::assemble(
            cfg,
            model,
            params,
            momentum,
            bank,
            OptimizerState::new(),
            0,
        ))
    }

    /// Resumes from a pre-training checkpoint. The checkpoint's model
    /// configuration replaces `cfg.model`.
    pub fn from_checkpoint(mut cfg: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.stage != Stage::Pretrain {
            return Err(Error::Config(format!(
                "cannot resume pre-training from a {} checkpoint",
                ckpt.stage
            )));
        }
        let bank = ckpt
            .bank
            .as_ref()
            .ok_or_else(|| Error::Config("pre-training checkpoint has no memory bank".into()))?;
        cfg.model = ckpt.model.clone();
        cfg.validate()?;
        let model = Macrl::new(cfg.model.clone())?;
        let bank = MemoryBank::from_keys(bank.keys().cast(), bank.cursor())?;
        Ok(Self::assemble(
            cfg,
            model,
            ckpt.params.cast(),
            ckpt.momentum.cast(),
            bank,
            ckpt.optimizer.cast(),
            ckpt.step,
        ))
    }

    fn assemble(
        cfg: RunConfig,
        model: Macrl<S>,
        params: ParamStore<S>,
        momentum: ParamStore<S>,
        bank: MemoryBank<S>,
        opt: OptimizerState<S>,
        step: u64,
    ) -> Self {
        let policy = cfg.data.policy(cfg.model.image_size);
        Pretrainer {
            strong: AugPolicy::new(AugKind::PretrainStrong, &policy),
            weak: AugPolicy::new(AugKind::PretrainWeak, &policy),
            cfg,
            model,
            params,
            momentum,
            bank,
            opt,
            step,
            last_report: LossReport::default(),
        }
    }

    pub fn schedule(&self, n: usize) -> Result<Schedule> {
        Schedule::new(&self.cfg.train, n)
    }

    /// Gradient-updated paths.
    pub fn is_trainable(&self, path: &str) -> bool {
        !path.starts_with(HEAD) && !self.cfg.model.is_frozen(path)
    }

    /// The two views of sample `index` at the current step.
    pub fn views(&self, data: &[ImageRecord], index: usize) -> (ImageRecord, ImageRecord) {
        let mut r = rng::stream(
            self.cfg.train.seed,
            &[tag::AUGMENT, 0, self.step, index as u64],
        );
        let x1 = augment(&data[index], &self.strong, &mut r);
        let x2 = augment(&data[index], &self.weak, &mut r);
        (x1, x2)
    }

    /// Masks for the given samples of one view at the current step.
    pub fn plan(&self, indices: &[usize], view: u64) -> Result<MaskPlan> {
        let mut streams: Vec<Rng> = indices
            .iter()
            .map(|&i| rng::stream(self.cfg.train.seed, &[tag::MASK, self.step, i as u64, view]))
            .collect();
        MaskPlan::random_per_sample(
            self.cfg.model.num_patches(),
            self.cfg.train.mask_ratio,
            &mut streams,
        )
    }

    /// Dataset indices of the current step's batch.
    pub fn batch_indices(&self, n: usize) -> Result<Vec<usize>> {
        let sched = self.schedule(n)?;
        let epoch = self.step / sched.steps_per_epoch as u64;
        let pos = (self.step % sched.steps_per_epoch as u64) as usize;
        let order = epoch_order(self.cfg.train.seed, Stage::Pretrain, epoch, n);
        let b = self.cfg.train.batch_size;
        Ok(order[pos * b..(pos + 1) * b].to_vec())
    }

    /// Averaged loss and summed gradients of `loss / accum_steps` over the
    /// micro-batches of the current step, plus the keys to enqueue.
    pub fn accumulate(&self, data: &[ImageRecord]) -> Result<(LossReport, Grads<S>, [Vec<S>; 2])> {
        let train = &self.cfg.train;
        let indices = self.batch_indices(data.len())?;
        let objective = train.objective();
        let accum = train.accum_steps;
        let mut grads = None;
        let mut report = LossReport {
            alpha: train.alpha,
            ..LossReport::default()
        };
        let mut keys: [Vec<S>; 2] = [Vec::new(), Vec::new()];
        for micro in indices.chunks(train.micro_batch()) {
            let (x1, x2): (Vec<_>, Vec<_>) = micro.iter().map(|&i| self.views(data, i)).unzip();
            let plans = [self.plan(micro, 1)?, self.plan(micro, 2)?];
            let mut g = Graph::new();
            let online = self.params.bind(&mut g, |p| self.is_trainable(p));
            let momentum = self.momentum.bind(&mut g, |_| false);
            let out = macrl_step(
                &mut g,
                &self.model,
                &online,
                &momentum,
                &self.bank,
                [&x1, &x2],
                [&plans[0], &plans[1]],
                &objective,
            )
            .map_err(non_finite(self.step, &self.last_report))?;
            let loss = g.scale(out.total, 1.0 / accum as f64)?;
            g.backward(loss)
                .map_err(|e| non_finite(self.step, &out.report)(e.into()))?;
            add_grads(&mut grads, online.grads(&g))?;
            let w = 1.0 / accum as f64;
            let r = &out.report;
            report.cl += w * r.cl;
            report.mim += w * r.mim;
            report.total += w * r.total;
            for (v, key) in keys.iter_mut().enumerate() {
                report.cl_parts[v] += w * r.cl_parts[v];
                report.mim_parts[v] += w * r.mim_parts[v];
                key.extend_from_slice(out.keys[v].data());
            }
        }
        let grads = grads.ok_or_else(|| invalid("pretrain", "empty batch"))?;
        Ok((report, grads, keys))
    }

    /// One optimizer step.
    pub fn step(&mut self, data: &[ImageRecord]) -> Result<StepRecord> {
        let sched = self.schedule(data.len())?;
        let lr = sched.lr(&self.cfg.train, self.step);
        let (report, grads, keys) = self.accumulate(data)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                last: self.last_report.to_string(),
            });
        }
        adamw_step(
            &mut self.params,
            &grads,
            &mut self.opt,
            &hyper(&self.cfg.train, lr),
        )?;
        ema_update(&mut self.momentum, &self.params, self.cfg.train.momentum_m)?;
        let dim = self.cfg.model.proj_dim;
        for k in keys {
            let rows = k.len() / dim;
            self.bank.enqueue(&Tensor::new(vec![rows, dim], k)?)?;
        }
        let epoch = self.step / sched.steps_per_epoch as u64 + 1;
        self.step += 1;
        self.last_report = report;
        let row = MetricsRow {
            step: self.step,
            epoch,
            lr,
            cl_loss: Some(report.cl),
            mim_loss: Some(report.mim),
            total_loss: Some(report.total),
            accuracy: None,
        };
        Ok(StepRecord { row, report })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.cfg.model.clone(),
            stage: Stage::Pretrain,
            step: self.step,
            seed: self.cfg.train.seed,
            params: self.params.cast(),
            momentum: self.momentum.cast(),
            bank: Some(
                MemoryBank::from_keys(self.bank.keys().cast(), self.bank.cursor())
                    .expect("bank keys stay unit norm"),
            ),
            optimizer: self.opt.cast(),
        }
    }

    /// Steps until the schedule ends, reporting rows, epoch ends and
    /// checkpoints.
    pub fn run(&mut self, data: &[ImageRecord], obs: &mut dyn Observer) -> Result<()> {
        let sched = self.schedule(data.len())?;
        let every = self.cfg.train.checkpoint_every as u64;
        while (self.step as usize) < sched.total {
            let rec = self.step(data)?;
            obs.on_row(&rec.row)?;
            if self.step.is_multiple_of(sched.steps_per_epoch as u64) {
                obs.on_epoch_end(rec.row.epoch)?;
            }
            if every > 0 && self.step.is_multiple_of(every) && (self.step as usize) < sched.total {
                obs.on_checkpoint(&self.to_checkpoint(), false)?;
            }
        }
        obs.on_checkpoint(&self.to_checkpoint(), true)
    }
}

/// Pre-trains from scratch at 32-bit and returns the final checkpoint.
pub fn pretrain(
    cfg: &RunConfig,
    data: &[ImageRecord],
    obs: &mut dyn Observer,
) -> Result<Checkpoint> {
    let mut t = Pretrainer::<f32>::new(cfg.clone())?;
    t.run(data, obs)?;
    Ok(t.to_checkpoint())
}

/// Result of fine-tuning or probing.
#[derive(Clone, Debug)]
pub struct FitOutcome<S> {
    pub params: ParamStore<S>,
    pub initial_accuracy: f64,
    /// Held-out accuracy after each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub steps: u64,
}

impl<S: Scalar> FitOutcome<S> {
    pub fn final_accuracy(&self) -> f64 {
        self.epoch_accuracy
            .last()
            .copied()
            .unwrap_or(self.initial_accuracy)
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig, opt: OptimizerState<S>) -> Checkpoint {
        Checkpoint {
            model: cfg.model.clone(),
            stage: cfg.train.stage,
            step: self.steps,
            seed: cfg.train.seed,
            params: self.params.cast(),
            momentum: ParamStore::new(),
            bank: None,
            optimizer: opt.cast(),
        }
    }
}

/// Encoder parameters plus a head for `cfg.model.num_classes`. A head of the
/// wrong shape, or none, is replaced by a fresh one.
pub fn classifier_params<S: Scalar>(
    cfg: &RunConfig,
    mut backbone: ParamStore<S>,
) -> Result<ParamStore<S>> {
    backbone.retain(|n| n.starts_with("encoder.") || n.starts_with(HEAD));
    let head_ok = backbone
        .get("head.fc_w")
        .is_some_and(|w| w.shape() == [cfg.model.enc_dim, cfg.model.num_classes])
        && backbone.contains("head.fc_b");
    if !head_ok {
        backbone.retain(|n| !n.starts_with(HEAD));
        init_head(
            &cfg.model,
            &mut backbone,
            &mut rng::stream(cfg.train.seed, &[tag::INIT, 1]),
        );
    }
    let expected = cfg.model.param_shapes();
    for (name, shape) in expected.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        let t = backbone.require(name)?;
        if t.shape() != shape.as_slice() {
            return Err(invalid(
                "classifier",
                format!(
                    "`{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                ),
            ));
        }
    }
    Ok(backbone)
}

fn label_of(img: &ImageRecord, classes: usize) -> Result<usize> {
    match img.label {
        Some(l) if l < classes => Ok(l),
        Some(l) => Err(invalid(
            "classify",
            format!("label {l} is not below {classes} classes"),
        )),
        None => Err(invalid("classify", "unlabelled image in a labelled set")),
    }
}

/// Top-1 accuracy of the classifier on `data`, evaluated in chunks.
pub fn accuracy<S: Scalar>(
    model: &Macrl<S>,
    params: &ParamStore<S>,
    data: &[ImageRecord],
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let classes = model.config().num_classes;
    let mut correct = 0usize;
    for chunk in data.chunks(64) {
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, |_| false);
        let x = g.constant(model.patchify_batch(chunk)?);
        let logits = model.classify(&mut g, &b, x)?;
        for (img, row) in chunk.iter().zip(g.value(logits).data().chunks(classes)) {
            let label = label_of(img, classes)?;
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, S::neg_infinity()),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0;
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean softmax cross-entropy of `logits: [batch, classes]`.
pub fn cross_entropy<S: Scalar>(
    g: &mut Graph<S>,
    logits: crate::tensor::Var,
    labels: &[usize],
) -> Result<crate::tensor::Var> {
    let [b, c] = *g.shape(logits) else {
        return Err(invalid(
            "cross_entropy",
            format!("expected [batch, classes], got {:?}", g.shape(logits)),
        ));
    };
    if labels.len() != b {
        return Err(invalid(
            "cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    let logp = g.log_softmax(logits)?;
    let onehot = g.constant(Tensor::from_fn(&[b, c], |i| {
        if labels[i / c] == i % c {
            S::one()
        } else {
            S::zero()
        }
    }));
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / b as f64)?)
}

/// Pooled encoder features `[n, enc_dim]` as values, in chunks of 64.
pub fn feature_values<S: Scalar>(
    model: &Macrl<S>,
    params: &ParamStore<S>,
    data: &[ImageRecord],
) -> Result<Tensor<S>> {
    let dim = model.config().enc_dim;
    let mut out = Vec::with_capacity(data.len() * dim);
    for chunk in data.chunks(64) {
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, |_| false);
        let x = g.constant(model.patchify_batch(chunk)?);
        let f = model.features(&mut g, &b, x)?;
        out.extend_from_slice(g.value(f).data());
    }
    Ok(Tensor::new(vec![data.len(), dim], out)?)
}

/// Per-dimension mean and inverse standard deviation of frozen features.
struct FeatureScale {
    mean: Vec<f64>,
    inv_sd: Vec<f64>,
}

impl FeatureScale {
    fn fit<S: Scalar>(
        model: &Macrl<S>,
        params: &ParamStore<S>,
        data: &[ImageRecord],
    ) -> Result<Self> {
        let f = feature_values(model, params, data)?;
        let d = model.config().enc_dim;
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in f.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.to_f64_lossy() / n;
            }
        }
        for row in f.data().chunks(d) {
            for j in 0..d {
                var[j] += (row[j].to_f64_lossy() - mean[j]).powi(2) / n;
            }
        }
        let inv_sd = var.iter().map(|v| 1.0 / (v + 1e-6).sqrt()).collect();
        Ok(FeatureScale { mean, inv_sd })
    }

    fn standardize<S: Scalar>(&self, f: &Tensor<S>) -> Tensor<S> {
        let d = self.mean.len();
        Tensor::from_fn(f.shape(), |i| {
            let j = i % d;
            S::of((f.data()[i].to_f64_lossy() - self.mean[j]) * self.inv_sd[j])
        })
    }

    /// Head over standardized features computing the same logits as the
    /// head in `params`.
    fn unfold<S: Scalar>(&self, params: &ParamStore<S>) -> Result<ParamStore<S>> {
        let w = params.require("head.fc_w")?;
        let b = params.require("head.fc_b")?;
        let c = b.numel();
        let u = Tensor::from_fn(w.shape(), |i| {
            S::of(w.data()[i].to_f64_lossy() / self.inv_sd[i / c])
        });
        let bias = Tensor::from_fn(b.shape(), |k| {
            let shift: f64 = (0..self.mean.len())
                .map(|j| self.mean[j] * w.data()[j * c + k].to_f64_lossy())
                .sum();
            S::of(b.data()[k].to_f64_lossy() + shift)
        });
        let mut out = ParamStore::new();
        out.insert("head.fc_w", u);
        out.insert("head.fc_b", bias);
        Ok(out)
    }

    /// Writes the plain head equivalent to `head` into `params`.
    fn fold<S: Scalar>(&self, head: &ParamStore<S>, params: &mut ParamStore<S>) -> Result<()> {
        let u = head.require("head.fc_w")?;
        let c = head.require("head.fc_b")?;
        let k = c.numel();
        let w = Tensor::from_fn(u.shape(), |i| {
            S::of(u.data()[i].to_f64_lossy() * self.inv_sd[i / k])
        });
        let bias = Tensor::from_fn(c.shape(), |o| {
            let shift: f64 = (0..self.mean.len())
                .map(|j| self.mean[j] * w.data()[j * k + o].to_f64_lossy())
                .sum();
            S::of(c.data()[o].to_f64_lossy() - shift)
        });
        params.insert("head.fc_w", w);
        params.insert("head.fc_b", bias);
        Ok(())
    }
}

fn fit<S: Scalar>(
    cfg: &RunConfig,
    backbone: ParamStore<S>,
    train: &[ImageRecord],
    eval: &[ImageRecord],
    obs: &mut dyn Observer,
) -> Result<(FitOutcome<S>, OptimizerState<S>)> {
    cfg.validate()?;
    let stage = cfg.train.stage;
    let tc = &cfg.train;
    let model = Macrl::<S>::new(cfg.model.clone())?;
    let mut params = classifier_params(cfg, backbone)?;
    let probe = stage == Stage::Linprobe;
    let trainable = |p: &str| {
        if probe {
            p.starts_with(HEAD)
        } else {
            !cfg.model.is_frozen(p)
        }
    };
    let frozen: ParamStore<S> = {
        let mut f = params.clone();
        f.retain(|n| !trainable(n));
        f
    };
    let kind = if probe {
        AugKind::Linprobe
    } else {
        AugKind::Finetune
    };
    let policy = AugPolicy::new(kind, &cfg.data.policy(cfg.model.image_size));
    let classes = cfg.model.num_classes;

    // the probe optimizes the head over standardized features and folds the
    // statistics back into head.fc_w / head.fc_b after every step
    let scale = if probe {
        Some(FeatureScale::fit(&model, &params, train)?)
    } else {
        None
    };
    let mut probe_head = match &scale {
        Some(sc) => sc.unfold(&params)?,
        None => ParamStore::new(),
    };
    let initial = accuracy(&model, &params, eval)?;
    obs.on_row(&MetricsRow {
        accuracy: Some(initial),
        ..MetricsRow::default()
    })?;
    let mut out = FitOutcome {
        params: ParamStore::new(),
        initial_accuracy: initial,
        epoch_accuracy: Vec::new(),
        steps: 0,
    };
    let mut opt = OptimizerState::new();
    if tc.epochs > 0 {
        let sched = Schedule::new(tc, train.len())?;
        let mut step = 0u64;
        'epochs: for epoch in 0..tc.epochs as u64 {
            let order = epoch_order(tc.seed, stage, epoch, train.len());
            let mut loss_sum = 0.0;
            let mut lr = 0.0;
            let mut taken = 0usize;
            for batch in order
                .chunks_exact(tc.batch_size)
                .take(sched.steps_per_epoch)
            {
                if step as usize >= sched.total {
                    break 'epochs;
                }
                lr = sched.lr(tc, step);
                let mut grads = None;
                let mut loss = 0.0;
                for micro in batch.chunks(tc.micro_batch()) {
                    let imgs: Vec<ImageRecord> = micro
                        .iter()
                        .map(|&i| {
                            let mut r = rng::stream(
                                tc.seed,
                                &[tag::AUGMENT, stage_tag(stage), step, i as u64],
                            );
                            augment(&train[i], &policy, &mut r)
                        })
                        .collect();
                    let labels = imgs
                        .iter()
                        .map(|im| label_of(im, classes))
                        .collect::<Result<Vec<_>>>()?;
                    let mut g = Graph::new();
                    let (b, logits) = match &scale {
                        Some(sc) => {
                            let z = sc.standardize(&feature_values(&model, &params, &imgs)?);
                            let b = probe_head.bind(&mut g, |_| true);
                            let z = g.constant(z);
                            let logits = model.head(&mut g, &b, z)?;
                            (b, logits)
                        }
                        None => {
                            let b = params.bind(&mut g, trainable);
                            let x = g.constant(model.patchify_batch(&imgs)?);
                            let logits = model.classify(&mut g, &b, x)?;
                            (b, logits)
                        }
                    };
                    let ce = cross_entropy(&mut g, logits, &labels)?;
                    let scaled = g.scale(ce, 1.0 / tc.accum_steps as f64)?;
                    let last = LossReport {
                        total: loss,
                        ..LossReport::default()
                    };
                    g.backward(scaled)
                        .map_err(|e| non_finite(step, &last)(e.into()))?;
                    loss += g.value(scaled).data()[0].to_f64_lossy();
                    add_grads(&mut grads, b.grads(&g))?;
                }
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        last: format!("cross-entropy {loss}"),
                    });
                }
                let grads = grads.ok_or_else(|| invalid("fit", "empty batch"))?;
                match &scale {
                    Some(sc) => {
                        let before = probe_head.clone();
                        adamw_step(&mut probe_head, &grads, &mut opt, &hyper(tc, lr))?;
                        if probe_head != before {
                            sc.fold(&probe_head, &mut params)?;
                        }
                    }
                    None => adamw_step(&mut params, &grads, &mut opt, &hyper(tc, lr))?,
                }
                loss_sum += loss;
                taken += 1;
                step += 1;
            }
            if taken == 0 {
                break;
            }
            let acc = accuracy(&model, &params, eval)?;
            out.epoch_accuracy.push(acc);
            obs.on_row(&MetricsRow {
                step,
                epoch: epoch + 1,
                lr,
                total_loss: Some(loss_sum / taken as f64),
                accuracy: Some(acc),
                ..MetricsRow::default()
            })?;
            obs.on_epoch_end(epoch + 1)?;
        }
        out.steps = step;
    }
    for (name, before) in frozen.iter() {
        let after = params.require(name)?;
        let same = before
            .data()
            .iter()
            .zip(after.data())
            .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits());
        if !same {
            return Err(Error::FreezeViolation(name.to_string()));
        }
    }
    out.params = params;
    Ok((out, opt))
}

/// Trains encoder and head end to end with cross-entropy. `backbone` needs
/// the encoder parameters; a missing or mismatched head is initialized.
pub fn finetune<S: Scalar>(
    cfg: &RunConfig,
    backbone: ParamStore<S>,
    train: &[ImageRecord],
    eval: &[ImageRecord],
    obs: &mut dyn Observer,
) -> Result<FitOutcome<S>> {
    let mut cfg = cfg.clone();
    cfg.train.stage = Stage::Finetune;
    let (out, opt) = fit(&cfg, backbone, train, eval, obs)?;
    obs.on_checkpoint(&out.to_checkpoint(&cfg, opt), true)?;
    Ok(out)
}

/// Trains the head only. Fails with [`Error::FreezeViolation`] if any other
/// parameter differs bitwise from its loaded value afterwards.
///
/// The head is optimized over features standardized with the training set's
/// per-dimension mean and deviation, then folded back into `head.fc_w` and
/// `head.fc_b`, so the result is an ordinary linear head on raw features.
/// Optimizer moments in the returned checkpoint refer to the standardized
/// head.
pub fn linear_probe<S: Scalar>(
    cfg: &RunConfig,
    backbone: ParamStore<S>,
    train: &[ImageRecord],
    eval: &[ImageRecord],
    obs: &mut dyn Observer,
) -> Result<FitOutcome<S>> {
    let mut cfg = cfg.clone();
    cfg.train.stage = Stage::Linprobe;
    let (out, opt) = fit(&cfg, backbone, train, eval, obs)?;
    obs.on_checkpoint(&out.to_checkpoint(&cfg, opt), true)?;
    Ok(out)
}
