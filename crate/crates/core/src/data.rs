//! Synthetic classification data, corruption suite and dataset files.
//!
//! Each class is a pair of channel profiles built from Gaussian bumps at
//! class-specific positions. Samples jitter bump position, width and
//! amplitude and add sensor noise; `difficulty` scales all nuisance terms.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur;
use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const VALUE_MIN: f64 = 0.0;
pub const VALUE_MAX: f64 = 1.0;

const MAGIC: &[u8; 8] = b"PALNDSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub length: usize,
}

impl InputShape {
    pub fn size(&self) -> usize {
        self.channels * self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub shape: InputShape,
    pub difficulty: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Contrast,
    Blur,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Blur,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Per-severity intensity (noise sigma, impulse rate, contrast factor,
    /// blur sigma, pixel block size).
    pub fn level(self, severity: u8) -> f64 {
        let i = (severity.clamp(1, 5) - 1) as usize;
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.07, 0.10, 0.14, 0.18][i],
            CorruptionKind::ImpulseNoise => [0.02, 0.04, 0.06, 0.09, 0.12][i],
            CorruptionKind::Contrast => [0.7, 0.55, 0.4, 0.3, 0.2][i],
            CorruptionKind::Blur => [0.5, 0.8, 1.1, 1.4, 1.8][i],
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0][i],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!("severity must be in 1..=5, got {}", self.severity)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: GeneratorParams,
    pub corruption: Option<CorruptionSpec>,
    /// `N × shape.size()`, channel-major per row.
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

/// A borrowed split with its rows gathered.
#[derive(Debug, Clone)]
pub struct SplitView {
    /// Row indices in the parent dataset.
    pub ids: Vec<usize>,
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn shape(&self) -> InputShape {
        self.params.shape
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> SplitView {
        let idx = self.indices(split);
        SplitView {
            inputs: self.inputs.select(ndarray::Axis(0), &idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx,
        }
    }

    /// Only the rows of one split, keeping metadata.
    pub fn subset(&self, split: Split) -> Dataset {
        let idx = self.indices(split);
        Dataset {
            params: self.params,
            corruption: self.corruption,
            inputs: self.inputs.select(ndarray::Axis(0), &idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: vec![split; idx.len()],
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.inputs.dim() != (n, self.params.shape.size()) || self.splits.len() != n {
            return Err(Error::Shape("dataset arrays disagree in length".into()));
        }
        if self.labels.iter().any(|&l| l >= self.params.num_classes) {
            return Err(Error::Input("label out of range".into()));
        }
        Ok(())
    }
}

/// Bump positions for `class` on `channel`, spread evenly and ordered
/// differently per channel so both channels carry class information.
fn class_profile(class: usize, channel: usize, classes: usize, length: usize) -> (f64, f64) {
    let span = (length as f64 - 5.0).max(1.0);
    let slot = if channel.is_multiple_of(2) { class } else { classes - 1 - class };
    let pos = 2.5 + span * (slot as f64 + 0.5) / classes as f64;
    let width = 1.0 + 0.35 * ((class + channel) % 3) as f64;
    (pos, width)
}

fn render_sample(class: usize, params: &GeneratorParams, rng: &mut impl Rng) -> Vec<f64> {
    let d = params.difficulty;
    let InputShape { channels, length } = params.shape;
    let shift_sd = 0.3 + 1.2 * d;
    let noise = Normal::new(0.0, 0.02 + 0.06 * d).unwrap();
    let shift = Normal::new(0.0, shift_sd).unwrap().sample(rng);
    let mut out = Vec::with_capacity(params.shape.size());
    for ch in 0..channels {
        let (pos, width) = class_profile(class, ch, params.num_classes, length);
        let amp = 0.7 * (1.0 + (0.1 + 0.3 * d) * rng.gen_range(-1.0..1.0));
        let w = width * (1.0 + 0.15 * d * rng.gen_range(-1.0..1.0));
        let base = 0.15 + 0.05 * d * rng.gen_range(-1.0..1.0);
        for i in 0..length {
            let u = (i as f64 - pos - shift) / w;
            let v = base + amp * (-0.5 * u * u).exp() + noise.sample(rng);
            out.push(v.clamp(VALUE_MIN, VALUE_MAX));
        }
    }
    out
}

/// Class-conditional synthetic data with train/val/test splits.
///
/// One sixth of every class goes to the test split; the remainder is split
/// 80/20 into train and validation.
pub fn generate_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    shape: InputShape,
    difficulty: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if samples_per_class < 3 {
        return Err(Error::Config(format!(
            "samples_per_class must be at least 3 to populate every split, got {samples_per_class}"
        )));
    }
    if shape.channels == 0 || shape.length < 4 {
        return Err(Error::Config(format!("degenerate input shape {shape:?}")));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Config(format!("difficulty must lie in [0, 1], got {difficulty}")));
    }
    let params = GeneratorParams { num_classes, samples_per_class, shape, difficulty, seed };
    let n = num_classes * samples_per_class;
    let mut inputs = Array2::zeros((n, shape.size()));
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let n_test = (samples_per_class as f64 / 6.0).round().max(1.0) as usize;
    let n_val = (((samples_per_class - n_test) as f64) * 0.2).round().max(1.0) as usize;
    for class in 0..num_classes {
        let mut order: Vec<usize> = (0..samples_per_class).collect();
        order.shuffle(&mut substream(seed, &[1, class as u64]));
        let mut class_splits = vec![Split::Train; samples_per_class];
        for &i in &order[..n_test] {
            class_splits[i] = Split::Test;
        }
        for &i in &order[n_test..n_test + n_val] {
            class_splits[i] = Split::Val;
        }
        for (j, split) in class_splits.into_iter().enumerate() {
            let row = class * samples_per_class + j;
            let mut rng = substream(seed, &[2, row as u64]);
            let x = render_sample(class, &params, &mut rng);
            inputs.row_mut(row).assign(&ndarray::ArrayView1::from(&x));
            labels.push(class);
            splits.push(split);
        }
    }
    Ok(Dataset { params, corruption: None, inputs, labels, splits })
}

/// Replace each entry with 0 or 1 with probability `rate`. Returns the
/// number of replaced entries.
pub fn impulse_noise(x: &mut [f64], rate: f64, rng: &mut impl Rng) -> usize {
    let mut hits = 0;
    for v in x.iter_mut() {
        if rng.gen::<f64>() < rate {
            *v = if rng.gen::<bool>() { VALUE_MAX } else { VALUE_MIN };
            hits += 1;
        }
    }
    hits
}

fn pixelate(signal: &[f64], block: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(signal.len());
    for chunk in signal.chunks(block) {
        let m = chunk.iter().sum::<f64>() / chunk.len() as f64;
        out.extend(std::iter::repeat_n(m, chunk.len()));
    }
    out
}

/// Corrupt a single sample in place.
pub fn corrupt_sample(x: &mut [f64], shape: InputShape, kind: CorruptionKind, severity: u8, rng: &mut impl Rng) {
    let level = kind.level(severity);
    match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, level).unwrap();
            for v in x.iter_mut() {
                *v += n.sample(rng);
            }
        }
        CorruptionKind::ImpulseNoise => {
            impulse_noise(x, level, rng);
        }
        CorruptionKind::Contrast => {
            for ch in x.chunks_mut(shape.length) {
                let m = ch.iter().sum::<f64>() / ch.len() as f64;
                for v in ch.iter_mut() {
                    *v = m + level * (*v - m);
                }
            }
        }
        CorruptionKind::Blur => {
            for ch in x.chunks_mut(shape.length) {
                let b = gaussian_blur(ch, level);
                ch.copy_from_slice(&b);
            }
        }
        CorruptionKind::Pixelate => {
            for ch in x.chunks_mut(shape.length) {
                let p = pixelate(ch, level as usize);
                ch.copy_from_slice(&p);
            }
        }
    }
    for v in x.iter_mut() {
        *v = v.clamp(VALUE_MIN, VALUE_MAX);
    }
}

/// Corrupted copy of `dataset`. Labels, splits and shape are unchanged.
pub fn corrupt(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut out = dataset.clone();
    let shape = dataset.shape();
    for (i, mut row) in out.inputs.rows_mut().into_iter().enumerate() {
        let mut rng = substream(spec.seed, &[3, spec.kind as u64, spec.severity as u64, i as u64]);
        let mut x = row.to_vec();
        corrupt_sample(&mut x, shape, spec.kind, spec.severity, &mut rng);
        row.assign(&ndarray::ArrayView1::from(&x));
    }
    out.corruption = Some(*spec);
    Ok(out)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut w = Writer::new(MAGIC, DATASET_VERSION);
    let p = &dataset.params;
    w.u32(p.num_classes as u32);
    w.u32(p.samples_per_class as u32);
    w.u32(p.shape.channels as u32);
    w.u32(p.shape.length as u32);
    w.f64(p.difficulty);
    w.u64(p.seed);
    match &dataset.corruption {
        Some(c) => {
            w.u8(1);
            w.str(c.kind.name());
            w.u8(c.severity);
            w.u64(c.seed);
        }
        None => w.u8(0),
    }
    w.u64(dataset.len() as u64);
    w.matrix(&dataset.inputs);
    for &l in &dataset.labels {
        w.u32(l as u32);
    }
    for &s in &dataset.splits {
        w.u8(s.code());
    }
    w.finish(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&read_file(path)?)
}

pub fn dataset_from_bytes(data: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(data, MAGIC, DATASET_VERSION)?;
    let num_classes = r.u32()? as usize;
    let samples_per_class = r.u32()? as usize;
    let shape = InputShape { channels: r.u32()? as usize, length: r.u32()? as usize };
    let difficulty = r.f64()?;
    let seed = r.u64()?;
    let corruption = match r.u8()? {
        0 => None,
        1 => {
            let kind = CorruptionKind::from_str(&r.str()?).map_err(|e| r.err(e.to_string()))?;
            Some(CorruptionSpec { kind, severity: r.u8()?, seed: r.u64()? })
        }
        _ => return Err(r.err("invalid corruption flag")),
    };
    let n = r.u64()? as usize;
    let inputs = r.matrix()?;
    if inputs.dim() != (n, shape.size()) {
        return Err(r.err(format!("payload shape {:?} does not match header ({n}, {})", inputs.dim(), shape.size())));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.u32()? as usize;
        if l >= num_classes {
            return Err(r.err(format!("label {l} out of range")));
        }
        labels.push(l);
    }
    let mut splits = Vec::with_capacity(n);
    for _ in 0..n {
        splits.push(Split::from_code(r.u8()?).ok_or_else(|| r.err("invalid split tag"))?);
    }
    r.expect_end()?;
    let params = GeneratorParams { num_classes, samples_per_class, shape, difficulty, seed };
    Ok(Dataset { params, corruption, inputs, labels, splits })
}
