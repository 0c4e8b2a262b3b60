//! Single-sample test-time adaptation.
//!
//! For every test sample: snapshot the parameters, take `P` plain gradient
//! steps on the swapped-prediction loss over `B_T` augmented copies (codes
//! from the closed-form relaxed polytope), predict on the raw sample, and
//! restore the snapshot. Classifier and prototypes never move.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{Transform, TransformSpec};
use crate::data::{InputShape, SplitView};
use crate::error::{Error, Result};
use crate::losses::{swav_test_loss, GradKey, ParamGroup, TemperaturePair};
use crate::model::{BlockRole, ModelParams, PrototypeBank};
use crate::rng::{substream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdaptScope {
    /// Every backbone block.
    #[serde(rename = "all")]
    AllBackbone,
    /// Only the final residual stage.
    #[serde(rename = "last-block")]
    LastBlock,
}

impl AdaptScope {
    pub fn groups(self) -> Vec<ParamGroup> {
        match self {
            AdaptScope::AllBackbone => vec![
                ParamGroup::Blocks(BlockRole::BackboneEarly),
                ParamGroup::Blocks(BlockRole::BackboneLast),
            ],
            AdaptScope::LastBlock => vec![ParamGroup::Blocks(BlockRole::BackboneLast)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdaptScope::AllBackbone => "all",
            AdaptScope::LastBlock => "last-block",
        }
    }
}

impl std::str::FromStr for AdaptScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(AdaptScope::AllBackbone),
            "last-block" => Ok(AdaptScope::LastBlock),
            _ => Err(Error::Config(format!("unknown adaptation scope '{s}' (expected all or last-block)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Copies of the test sample per step (`B_T`).
    pub batch_copies: usize,
    /// Gradient steps (`P`).
    pub steps: usize,
    /// Test learning rate (`α`).
    pub lr: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub scope: AdaptScope,
    /// Record the prediction after every step.
    pub probe: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            batch_copies: 32,
            steps: 10,
            lr: 0.1,
            epsilon: 1.0,
            tau: 0.75,
            scope: AdaptScope::LastBlock,
            probe: true,
            seed: 23,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_copies < 2 {
            return Err(Error::Config("test batch needs at least two copies".into()));
        }
        if !(self.lr > 0.0 && self.epsilon > 0.0 && self.tau > 0.0) {
            return Err(Error::Config("test learning rate and temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn temps(&self) -> TemperaturePair {
        TemperaturePair { tau: self.tau, epsilon: self.epsilon }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptTrace {
    /// Test loss evaluated before each of the `P` updates.
    pub losses: Vec<f64>,
    /// Prediction after `p` updates for `p = 0..=P` (probing only).
    pub predictions: Vec<usize>,
    pub elapsed: Duration,
    /// Set when adaptation was abandoned and the unadapted prediction used.
    pub incident: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub prediction: usize,
    pub trace: AdaptTrace,
}

fn predict_one(model: &ModelParams, x: &[f64]) -> Result<usize> {
    let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    Ok(model.predict(&row)?[0])
}

/// Adapt to one sample and predict. `model` is bitwise restored on return,
/// including on error.
pub fn adapt_single(
    model: &mut ModelParams,
    prototypes: &PrototypeBank,
    x: &[f64],
    shape: InputShape,
    config: &AdaptConfig,
    transform: &TransformSpec,
    rng: &mut Rng,
) -> Result<AdaptOutcome> {
    config.validate()?;
    let snapshot = model.snapshot();
    let result = run_adaptation(model, prototypes, x, shape, config, transform, rng);
    model.restore(&snapshot)?;
    result
}

fn run_adaptation(
    model: &mut ModelParams,
    prototypes: &PrototypeBank,
    x: &[f64],
    shape: InputShape,
    config: &AdaptConfig,
    transform: &TransformSpec,
    rng: &mut Rng,
) -> Result<AdaptOutcome> {
    let start = Instant::now();
    let scope = config.scope.groups();
    let base = predict_one(model, x)?;
    let mut trace = AdaptTrace { losses: Vec::with_capacity(config.steps), predictions: Vec::new(), elapsed: Duration::ZERO, incident: None };
    if config.probe {
        trace.predictions.push(base);
    }
    let n = config.batch_copies;
    for step in 0..config.steps {
        let mut view_s = Array2::zeros((n, shape.size()));
        let mut view_t = Array2::zeros((n, shape.size()));
        for i in 0..n {
            let s = Transform::sample(transform, shape, rng);
            let t = Transform::sample(transform, shape, rng);
            view_s.row_mut(i).assign(&ndarray::ArrayView1::from(&s.apply(x, shape)));
            view_t.row_mut(i).assign(&ndarray::ArrayView1::from(&t.apply(x, shape)));
        }
        let loss = match swav_test_loss(&view_s, &view_t, model, prototypes, config.temps(), &scope) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::Numerical(_)) => {
                trace.incident = Some(format!("non-finite test loss at step {step}; fell back to unadapted prediction"));
                trace.elapsed = start.elapsed();
                return Ok(AdaptOutcome { prediction: base, trace });
            }
            Err(e) => return Err(e),
        };
        trace.losses.push(loss.value);
        for (key, grad) in &loss.grads {
            if let GradKey::Block(id) = key {
                model.block_mut(*id).scaled_add(-config.lr, grad);
            }
        }
        if config.probe {
            trace.predictions.push(predict_one(model, x)?);
        }
    }
    let prediction = predict_one(model, x)?;
    trace.elapsed = start.elapsed();
    Ok(AdaptOutcome { prediction, trace })
}

/// Per-sample outcome inside [`adapt_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub label: usize,
    pub prediction_before: usize,
    pub prediction_after: usize,
    pub step_predictions: Vec<usize>,
    pub losses: Vec<f64>,
    pub incident: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptResults {
    pub records: Vec<SampleRecord>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Accuracy after `p` steps, `p = 0..=P` (probing only).
    pub step_accuracy: Vec<f64>,
    /// Mean test loss before each update.
    pub mean_losses: Vec<f64>,
    pub failures: usize,
}

/// Adapt independently to every sample of `data`. The rng stream of each
/// sample is keyed by its dataset id, so results do not depend on the order
/// of `data` or on how many threads run.
pub fn adapt_dataset(
    model: &ModelParams,
    prototypes: &PrototypeBank,
    data: &SplitView,
    shape: InputShape,
    config: &AdaptConfig,
    transform: &TransformSpec,
) -> Result<AdaptResults> {
    config.validate()?;
    let records: Vec<SampleRecord> = (0..data.labels.len())
        .into_par_iter()
        .map(|i| {
            let mut local = model.clone();
            let id = data.ids[i];
            let x = data.inputs.row(i).to_vec();
            let before = predict_one(&local, &x)?;
            let mut rng = substream(config.seed ^ transform.seed, &[20, id as u64]);
            let out = adapt_single(&mut local, prototypes, &x, shape, config, transform, &mut rng)?;
            Ok(SampleRecord {
                id,
                label: data.labels[i],
                prediction_before: before,
                prediction_after: out.prediction,
                step_predictions: out.trace.predictions,
                losses: out.trace.losses,
                incident: out.trace.incident,
            })
        })
        .collect::<Result<_>>()?;
    Ok(summarize(records, config))
}

fn summarize(records: Vec<SampleRecord>, config: &AdaptConfig) -> AdaptResults {
    let n = records.len().max(1) as f64;
    let acc = |f: &dyn Fn(&SampleRecord) -> usize| records.iter().filter(|r| f(r) == r.label).count() as f64 / n;
    let accuracy_before = acc(&|r| r.prediction_before);
    let accuracy_after = acc(&|r| r.prediction_after);
    let failures = records.iter().filter(|r| r.incident.is_some()).count();
    let step_accuracy = if config.probe {
        (0..=config.steps)
            .map(|p| {
                acc(&|r| match r.step_predictions.get(p) {
                    Some(&pred) => pred,
                    None => r.prediction_after,
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    let mean_losses = (0..config.steps)
        .map(|p| {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.losses.get(p).copied()).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        })
        .collect();
    AdaptResults { records, accuracy_before, accuracy_after, step_accuracy, mean_losses, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::SeedableRng;

    fn fixture() -> (ModelParams, PrototypeBank, InputShape) {
        let shape = InputShape { channels: 2, length: 8 };
        let arch = Architecture { input_dim: 16, width: 8, num_stages: 2, groups: 2, proj_hidden: 8, proj_dim: 4, num_classes: 3 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        (ModelParams::new(arch, 5).unwrap(), PrototypeBank::random(4, 6, &mut rng), shape)
    }

    fn sample(shape: InputShape, seed: u64) -> Vec<f64> {
        let mut r = substream(seed, &[]);
        (0..shape.size()).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect()
    }

    #[test]
    fn zero_steps_match_base_prediction() {
        let (mut m, c, shape) = fixture();
        let x = sample(shape, 3);
        let cfg = AdaptConfig { steps: 0, batch_copies: 4, ..Default::default() };
        let out = adapt_single(&mut m, &c, &x, shape, &cfg, &TransformSpec::default(), &mut substream(0, &[])).unwrap();
        assert_eq!(out.prediction, predict_one(&m, &x).unwrap());
        assert!(out.trace.losses.is_empty());
    }

    #[test]
    fn parameters_restored_bitwise() {
        let (mut m, c, shape) = fixture();
        let before = m.snapshot();
        let cfg = AdaptConfig { steps: 3, batch_copies: 4, lr: 0.5, scope: AdaptScope::AllBackbone, ..Default::default() };
        let out = adapt_single(&mut m, &c, &sample(shape, 1), shape, &cfg, &TransformSpec::default(), &mut substream(0, &[])).unwrap();
        assert_eq!(out.trace.losses.len(), 3);
        assert_eq!(out.trace.predictions.len(), 4);
        assert_eq!(m.snapshot(), before);
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("last-block".parse::<AdaptScope>().unwrap(), AdaptScope::LastBlock);
        assert!("head".parse::<AdaptScope>().is_err());
        assert!(AdaptConfig { batch_copies: 1, ..Default::default() }.validate().is_err());
    }
}
