//! Joint training loop: minibatch SGD with momentum, weight decay, linear
//! warmup and cosine decay over the weighted objective of the chosen variant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_views, TransformSpec};
use crate::data::{InputShape, SplitView};
use crate::error::{Error, Result};
use crate::losses::{training_objective, GradKey, LossParts, LossValue, Objective, TemperaturePair, TrainBatch};
use crate::model::{Architecture, ModelParams, ParamKind, PrototypeBank};
use crate::rng::substream;

/// Which loss terms are active during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Cross-entropy only.
    #[serde(rename = "baseline")]
    Baseline,
    /// Cross-entropy and swapped prediction.
    #[serde(rename = "jt")]
    Jt,
    /// Cross-entropy, swapped prediction and prototype entropy.
    #[serde(rename = "jt-ent")]
    JtEnt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Jt, Variant::JtEnt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Jt => "jt",
            Variant::JtEnt => "jt-ent",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected baseline, jt or jt-ent)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate for the joint variants.
    pub base_lr: f64,
    /// Base learning rate for the supervised-only baseline.
    pub baseline_lr: f64,
    pub lr_floor: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply momentum to prototype updates. Weight decay never applies to them.
    pub prototype_momentum: bool,
    pub tau: f64,
    pub epsilon: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sinkhorn_iterations: usize,
    pub num_prototypes: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            base_lr: 0.1,
            baseline_lr: 0.1,
            lr_floor: 0.0,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 1e-5,
            prototype_momentum: true,
            tau: 0.2,
            epsilon: 0.05,
            gamma1: 0.3,
            gamma2: 0.1,
            sinkhorn_iterations: 3,
            num_prototypes: 30,
            variant: Variant::JtEnt,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.sinkhorn_iterations == 0 || self.num_prototypes == 0 {
            return Err(Error::Config(
                "epochs, sinkhorn iterations and prototype count must be positive; batch size at least 2".into(),
            ));
        }
        if !(self.base_lr > 0.0 && self.baseline_lr > 0.0 && self.tau > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("learning rates and temperatures must be positive".into()));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 || self.gamma1 < 0.0 || self.gamma2 < 0.0 || self.lr_floor < 0.0 {
            return Err(Error::Config("momentum, weight decay, loss weights and lr floor must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        match self.variant {
            Variant::Baseline => self.baseline_lr,
            _ => self.base_lr,
        }
    }

    pub fn objective(&self) -> Objective {
        let temps = TemperaturePair { tau: self.tau, epsilon: self.epsilon };
        let (swav, ce, ent) = match self.variant {
            Variant::Baseline => (0.0, 1.0, 0.0),
            Variant::Jt => (1.0, self.gamma1, 0.0),
            Variant::JtEnt => (1.0, self.gamma1, self.gamma2),
        };
        Objective { temps, sinkhorn_iterations: self.sinkhorn_iterations, swav_weight: swav, ce_weight: ce, ent_weight: ent }
    }

    pub fn steps_per_epoch(&self, train_size: usize) -> usize {
        batches(train_size, self.batch_size).len()
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then a cosine from
/// `base_lr` down to `floor`, reached at `step = total_steps - 1`.
///
/// Step 0 has rate 0, step `k < warmup_steps` has `base_lr * k / warmup_steps`,
/// and step `warmup_steps` has exactly `base_lr`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, floor: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(1).saturating_sub(warmup_steps);
    if decay_steps == 0 {
        return base_lr;
    }
    let t = ((step - warmup_steps) as f64 / decay_steps as f64).min(1.0);
    floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Contiguous batches over `n` items; a trailing batch of one is merged into
/// the previous batch because train-mode codes need at least two columns.
fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// SGD with heavy-ball momentum. Decay is applied to linear weights only.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub prototype_momentum: bool,
    velocity: BTreeMap<GradKey, Array2<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, prototype_momentum: bool) -> Self {
        Sgd { momentum, weight_decay, prototype_momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut ModelParams, prototypes: &mut PrototypeBank, loss: &LossValue, lr: f64) {
        for (&key, grad) in &loss.grads {
            match key {
                GradKey::Block(id) => {
                    let mut g = grad.clone();
                    if model.block(id).kind == ParamKind::Weight && self.weight_decay > 0.0 {
                        g.scaled_add(self.weight_decay, &model.block(id).value);
                    }
                    let v = self.advance(key, g, self.momentum);
                    model.block_mut(id).scaled_add(-lr, &v);
                }
                GradKey::Prototypes => {
                    let mu = if self.prototype_momentum { self.momentum } else { 0.0 };
                    let v = self.advance(key, grad.clone(), mu);
                    prototypes.update(|c| c.scaled_add(-lr, &v));
                }
                _ => {}
            }
        }
    }

    fn advance(&mut self, key: GradKey, g: Array2<f64>, mu: f64) -> Array2<f64> {
        let v = match self.velocity.remove(&key) {
            Some(mut v) if mu > 0.0 => {
                v.mapv_inplace(|x| x * mu);
                v += &g;
                v
            }
            _ => g,
        };
        self.velocity.insert(key, v.clone());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    /// Mean unweighted components over the epoch's batches.
    pub losses: LossParts,
    pub total_loss: f64,
    pub val_acc: f64,
}

/// Training state carried across epochs.
pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub transform: &'a TransformSpec,
    pub shape: InputShape,
    pub model: ModelParams,
    pub prototypes: PrototypeBank,
    pub optimizer: Sgd,
    pub lr_trace: Vec<f64>,
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, transform: &'a TransformSpec, arch: Architecture, shape: InputShape, train_size: usize) -> Result<Self> {
        config.validate()?;
        transform.validate()?;
        if arch.input_dim != shape.size() {
            return Err(Error::Config("architecture input does not match data shape".into()));
        }
        let model = ModelParams::new(arch, config.seed)?;
        let prototypes = PrototypeBank::random(arch.proj_dim, config.num_prototypes, &mut substream(config.seed, &[0x70726f74]));
        let spe = config.steps_per_epoch(train_size);
        Ok(Trainer {
            config,
            transform,
            shape,
            model,
            prototypes,
            optimizer: Sgd::new(config.momentum, config.weight_decay, config.prototype_momentum),
            lr_trace: Vec::new(),
            step: 0,
            total_steps: spe * config.epochs,
            warmup_steps: spe * config.warmup_epochs,
        })
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.step, self.total_steps, self.warmup_steps, self.config.peak_lr(), self.config.lr_floor)
    }

    /// One shuffled pass over `train`. The view rng of every sample is keyed
    /// by `(seed, epoch, sample id)`.
    pub fn train_epoch(&mut self, train: &SplitView, epoch: usize) -> Result<EpochMetrics> {
        let n = train.labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(self.config.seed, &[10, epoch as u64]));
        let objective = self.config.objective();
        let mut sums = LossParts::default();
        let mut total = 0.0;
        let ranges = batches(n, self.config.batch_size);
        let mut lr = 0.0;
        for range in &ranges {
            let idx = &order[range.clone()];
            let batch = self.make_batch(train, idx, epoch)?;
            let (loss, parts) = training_objective(&batch, &self.model, &self.prototypes, &objective)?;
            if !loss.is_finite() {
                let ids: Vec<usize> = idx.iter().map(|&i| train.ids[i]).collect();
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, step {}: parts {parts:?}, batch sample ids {ids:?}",
                    self.step
                )));
            }
            lr = self.current_lr();
            self.lr_trace.push(lr);
            self.optimizer.step(&mut self.model, &mut self.prototypes, &loss, lr);
            self.step += 1;
            sums.swav += parts.swav;
            sums.ce += parts.ce;
            sums.ent += parts.ent;
            total += loss.value;
        }
        let nb = ranges.len() as f64;
        Ok(EpochMetrics {
            epoch,
            lr,
            losses: LossParts { swav: sums.swav / nb, ce: sums.ce / nb, ent: sums.ent / nb },
            total_loss: total / nb,
            val_acc: f64::NAN,
        })
    }

    fn make_batch(&self, data: &SplitView, idx: &[usize], epoch: usize) -> Result<TrainBatch> {
        let d = self.shape.size();
        let mut view_s = Array2::zeros((idx.len(), d));
        let mut view_t = Array2::zeros((idx.len(), d));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            let mut rng = substream(self.config.seed ^ self.transform.seed, &[11, epoch as u64, data.ids[i] as u64]);
            let x = data.inputs.row(i).to_vec();
            let (s, t) = sample_views(&x, self.shape, self.transform, &mut rng)?;
            view_s.row_mut(row).assign(&ndarray::ArrayView1::from(&s));
            view_t.row_mut(row).assign(&ndarray::ArrayView1::from(&t));
            labels.push(data.labels[i]);
        }
        Ok(TrainBatch { view_s, view_t, labels })
    }
}

pub fn accuracy(model: &ModelParams, data: &SplitView) -> Result<f64> {
    if data.labels.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = model.predict(&data.inputs)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.labels.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub lr_trace: Vec<f64>,
    pub final_val_acc: f64,
}

/// Train a model and prototype bank from scratch on `train`, validating on
/// `val` after every epoch.
pub fn fit(
    config: &TrainConfig,
    transform: &TransformSpec,
    arch: Architecture,
    shape: InputShape,
    train: &SplitView,
    val: &SplitView,
) -> Result<(TrainReport, ModelParams, PrototypeBank)> {
    let mut trainer = Trainer::new(config, transform, arch, shape, train.labels.len())?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut m = trainer.train_epoch(train, epoch)?;
        m.val_acc = accuracy(&trainer.model, val)?;
        log::debug!("{} epoch {epoch}: loss {:.4} val_acc {:.3}", config.variant, m.total_loss, m.val_acc);
        epochs.push(m);
    }
    let final_val_acc = epochs.last().map(|m| m.val_acc).unwrap_or(f64::NAN);
    let Trainer { model, prototypes, lr_trace, .. } = trainer;
    Ok((TrainReport { epochs, lr_trace, final_val_acc }, model, prototypes))
}
