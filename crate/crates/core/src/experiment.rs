//! Experiment orchestration: dataset generation, training of every variant
//! and seed, and corruption sweeps with test-time adaptation.
//!
//! Output layout below the run directory:
//!
//! ```text
//! config.toml
//! data/dataset.bin, data/dataset.json
//! checkpoints/{variant}_k{K}_seed{n}.ckpt
//! metrics/{variant}_k{K}_seed{n}.csv, metrics/train_summary.csv
//! adapt/{variant}_k{K}/seed{n}/{kind}_s{severity}.jsonl
//! adapt/{variant}_k{K}/per_seed.csv, summary.csv, steps.csv
//! ```
//!
//! Every CSV starts with a `# config_hash=...` line; JSON outputs carry a
//! `config_hash` field.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_dataset, AdaptConfig, AdaptResults};
use crate::config::ExperimentConfig;
use crate::data::{corrupt, generate_synthetic, load_dataset, save_dataset, CorruptionKind, CorruptionSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::train::{fit, TrainReport, Variant};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "data/dataset.bin";
pub const DATASET_META_FILE: &str = "data/dataset.json";

pub fn run_name(variant: Variant, k: usize, seed: u64) -> String {
    format!("{}_k{k}_seed{seed}", variant.name())
}

pub fn checkpoint_path(out: &Path, variant: Variant, k: usize, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("{}.ckpt", run_name(variant, k, seed)))
}

pub fn metrics_path(out: &Path, variant: Variant, k: usize, seed: u64) -> PathBuf {
    out.join("metrics").join(format!("{}.csv", run_name(variant, k, seed)))
}

pub fn adapt_dir(out: &Path, variant: Variant, k: usize) -> PathBuf {
    out.join("adapt").join(format!("{}_k{k}", variant.name()))
}

/// Prototype counts a variant is trained with. The baseline has no
/// prototype loss, so it is trained once per seed at the configured count.
pub fn counts_for(config: &ExperimentConfig, variant: Variant) -> Vec<usize> {
    match variant {
        Variant::Baseline => vec![config.train.num_prototypes],
        _ => config.prototype_counts(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output exists; pass --force to overwrite"),
        ));
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Header line that tags a CSV with its provenance.
pub fn hash_line(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

fn write_config(out: &Path, config: &ExperimentConfig) -> Result<()> {
    write_text(&out.join(CONFIG_FILE), &format!("# config_hash = \"{}\"\n{}", config.hash(), config.to_toml()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    config_hash: String,
    num_classes: usize,
    samples_per_class: usize,
    channels: usize,
    length: usize,
    difficulty: f64,
    seed: u64,
    train: usize,
    val: usize,
    test: usize,
}

/// Generate the synthetic dataset into `out/data`.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path, force: bool) -> Result<Dataset> {
    config.validate()?;
    let path = out.join(DATASET_FILE);
    refuse_existing(&path, force)?;
    let d = &config.data;
    let dataset = generate_synthetic(d.num_classes, d.samples_per_class, d.shape(), d.difficulty, d.seed)?;
    ensure_parent(&path)?;
    save_dataset(&dataset, &path)?;
    let meta = DatasetMeta {
        config_hash: config.hash(),
        num_classes: d.num_classes,
        samples_per_class: d.samples_per_class,
        channels: d.channels,
        length: d.length,
        difficulty: d.difficulty,
        seed: d.seed,
        train: dataset.indices(Split::Train).len(),
        val: dataset.indices(Split::Val).len(),
        test: dataset.indices(Split::Test).len(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    write_text(&out.join(DATASET_META_FILE), &(json + "\n"))?;
    write_config(out, config)?;
    log::info!("wrote {} samples to {}", dataset.len(), path.display());
    Ok(dataset)
}

pub fn load_run_dataset(config: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let dataset = load_dataset(&out.join(DATASET_FILE))?;
    let d = &config.data;
    let p = &dataset.params;
    if p.num_classes != d.num_classes || p.shape != d.shape() || p.seed != d.seed || p.samples_per_class != d.samples_per_class {
        return Err(Error::Config("dataset on disk was generated from a different data config; regenerate it".into()));
    }
    Ok(dataset)
}

/// Metrics CSV for one training run.
pub fn metrics_csv(hash: &str, report: &TrainReport) -> String {
    let mut s = hash_line(hash);
    s.push_str("epoch,lr,l_swav,l_ce,l_ent,val_acc\n");
    for m in &report.epochs {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.9},{:.9},{:.6}", m.epoch, m.lr, m.losses.swav, m.losses.ce, m.losses.ent, m.val_acc);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub variant: Variant,
    pub num_prototypes: usize,
    pub seed: u64,
    pub report: TrainReport,
    pub checkpoint: PathBuf,
}

/// Train every requested variant for every seed and prototype count. Runs
/// always start from scratch; an existing checkpoint is refused unless
/// `force` is set.
pub fn cmd_train(config: &ExperimentConfig, out: &Path, variants: &[Variant], force: bool) -> Result<Vec<TrainedRun>> {
    config.validate()?;
    let dataset = load_run_dataset(config, out)?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    let shape = dataset.shape();
    let arch = config.model.architecture(shape, dataset.num_classes());
    let hash = config.hash();
    let mut plan = Vec::new();
    for &variant in variants {
        for k in counts_for(config, variant) {
            for &seed in &config.seeds {
                let path = checkpoint_path(out, variant, k, seed);
                refuse_existing(&path, force)?;
                plan.push((variant, k, seed, path));
            }
        }
    }
    let mut runs = Vec::new();
    for (variant, k, seed, path) in plan {
        let tc = config.train_for(variant, seed, k);
        log::info!("training {}", run_name(variant, k, seed));
        let (report, model, prototypes) = fit(&tc, config.augment_for(variant), arch, shape, &train, &val)?;
        ensure_parent(&path)?;
        Checkpoint { config_hash: hash.clone(), variant: variant.name().into(), seed, model, prototypes }.save(&path)?;
        write_text(&metrics_path(out, variant, k, seed), &metrics_csv(&hash, &report))?;
        log::info!("{}: final val_acc {:.4}", run_name(variant, k, seed), report.final_val_acc);
        runs.push(TrainedRun { variant, num_prototypes: k, seed, report, checkpoint: path });
    }
    let mut s = hash_line(&hash);
    s.push_str("variant,k,seed,final_val_acc,checkpoint\n");
    for r in &runs {
        let rel = r.checkpoint.strip_prefix(out).unwrap_or(&r.checkpoint);
        let _ = writeln!(s, "{},{},{},{:.6},{}", r.variant, r.num_prototypes, r.seed, r.report.final_val_acc, rel.display());
    }
    write_text(&out.join("metrics").join("train_summary.csv"), &s)?;
    write_config(out, config)?;
    Ok(runs)
}

/// One per-sample line of the JSON-lines record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLine {
    pub config_hash: String,
    pub sample_id: usize,
    pub label: usize,
    pub prediction_p0: usize,
    pub prediction: usize,
    pub step_predictions: Vec<usize>,
    pub losses: Vec<f64>,
    pub incident: Option<String>,
}

/// Result of one (checkpoint, corruption) adaptation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub seed: u64,
    pub kind: CorruptionKind,
    pub severity: u8,
    pub results: AdaptResults,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Tables written for one variant and prototype count.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTables {
    pub per_seed: String,
    pub summary: String,
    /// Empty when probing is off.
    pub steps: String,
}

/// Aggregate the cells of one variant/K sweep into CSV tables.
///
/// `steps.csv` averages accuracy over corruptions per seed, then reports the
/// mean and std over seeds for every step count.
pub fn sweep_tables(hash: &str, variant: Variant, k: usize, seeds: &[u64], cells: &[CellResult]) -> SweepTables {
    let mut per_seed = hash_line(hash);
    per_seed.push_str("variant,k,seed,corruption,severity,accuracy_before,accuracy_after,failures\n");
    for c in cells {
        let _ = writeln!(
            per_seed,
            "{variant},{k},{},{},{},{:.6},{:.6},{}",
            c.seed, c.kind, c.severity, c.results.accuracy_before, c.results.accuracy_after, c.results.failures
        );
    }

    let mut keys: Vec<(CorruptionKind, u8)> = cells.iter().map(|c| (c.kind, c.severity)).collect();
    keys.sort();
    keys.dedup();
    let mut summary = hash_line(hash);
    summary.push_str("variant,k,corruption,severity,accuracy_before,accuracy_before_std,accuracy_after,accuracy_after_std,seeds\n");
    let per_seed_avg = |f: &dyn Fn(&CellResult) -> f64| -> Vec<f64> {
        seeds
            .iter()
            .filter_map(|s| {
                let v: Vec<f64> = cells.iter().filter(|c| c.seed == *s).map(f).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    };
    for (kind, sev) in &keys {
        let sel: Vec<&CellResult> = cells.iter().filter(|c| c.kind == *kind && c.severity == *sev).collect();
        let (bm, bs) = mean_std(&sel.iter().map(|c| c.results.accuracy_before).collect::<Vec<_>>());
        let (am, as_) = mean_std(&sel.iter().map(|c| c.results.accuracy_after).collect::<Vec<_>>());
        let _ = writeln!(summary, "{variant},{k},{kind},{sev},{bm:.6},{bs:.6},{am:.6},{as_:.6},{}", sel.len());
    }
    let before = per_seed_avg(&|c| c.results.accuracy_before);
    let after = per_seed_avg(&|c| c.results.accuracy_after);
    let (bm, bs) = mean_std(&before);
    let (am, as_) = mean_std(&after);
    let _ = writeln!(summary, "{variant},{k},avg,,{bm:.6},{bs:.6},{am:.6},{as_:.6},{}", before.len());

    let mut steps = String::new();
    let n_steps = cells.iter().map(|c| c.results.step_accuracy.len()).min().unwrap_or(0);
    if n_steps > 0 {
        steps = hash_line(hash);
        steps.push_str("variant,k,step,accuracy,accuracy_std,seeds\n");
        for p in 0..n_steps {
            let v = per_seed_avg(&|c| c.results.step_accuracy[p]);
            let (m, s) = mean_std(&v);
            let _ = writeln!(steps, "{variant},{k},{p},{m:.6},{s:.6},{}", v.len());
        }
    }
    SweepTables { per_seed, summary, steps }
}

fn records_jsonl(hash: &str, results: &AdaptResults) -> String {
    let mut s = String::new();
    for r in &results.records {
        let line = SampleLine {
            config_hash: hash.to_string(),
            sample_id: r.id,
            label: r.label,
            prediction_p0: r.prediction_before,
            prediction: r.prediction_after,
            step_predictions: r.step_predictions.clone(),
            losses: r.losses.clone(),
            incident: r.incident.clone(),
        };
        s.push_str(&serde_json::to_string(&line).expect("record serialises"));
        s.push('\n');
    }
    s
}

/// Adaptation over the configured corruption sweep for every requested
/// variant, prototype count and seed.
///
/// The baseline has no prototypes to align, so asking for it with a
/// positive step count is refused. It is evaluated with `P = 0` when it is
/// run as part of a full sweep (`explicit = false`).
pub fn cmd_adapt(
    config: &ExperimentConfig,
    out: &Path,
    variants: &[Variant],
    explicit: bool,
    force: bool,
) -> Result<Vec<(Variant, usize, Vec<CellResult>)>> {
    config.validate()?;
    let sweep = &config.corruptions;
    if sweep.kinds.is_empty() || sweep.severities.is_empty() {
        return Err(Error::Config("corruption sweep is empty".into()));
    }
    if explicit && variants.contains(&Variant::Baseline) && config.adapt.steps > 0 {
        return Err(Error::Contract(
            "the baseline has no prototypes to align; test-time adaptation needs jt or jt-ent (or --steps 0)".into(),
        ));
    }
    let dataset = load_run_dataset(config, out)?;
    let test = dataset.subset(Split::Test);
    let shape = dataset.shape();
    let hash = config.hash();
    let mut corrupted = Vec::new();
    for &kind in &sweep.kinds {
        for &severity in &sweep.severities {
            let spec = CorruptionSpec { kind, severity, seed: sweep.seed };
            corrupted.push((kind, severity, corrupt(&test, &spec)?.split(Split::Test)));
        }
    }
    for &variant in variants {
        for k in counts_for(config, variant) {
            refuse_existing(&adapt_dir(out, variant, k).join("summary.csv"), force)?;
            for &seed in &config.seeds {
                let p = checkpoint_path(out, variant, k, seed);
                if !p.exists() {
                    return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint missing; run train first")));
                }
            }
        }
    }
    let mut all = Vec::new();
    for &variant in variants {
        let adapt_cfg = AdaptConfig { steps: if variant == Variant::Baseline { 0 } else { config.adapt.steps }, ..config.adapt.clone() };
        for k in counts_for(config, variant) {
            let dir = adapt_dir(out, variant, k);
            let mut cells = Vec::new();
            for &seed in &config.seeds {
                let ckpt = Checkpoint::load(&checkpoint_path(out, variant, k, seed))?;
                if ckpt.variant != variant.name() || ckpt.seed != seed {
                    return Err(Error::Format {
                        offset: 0,
                        message: format!("checkpoint holds {} seed {}, expected {variant} seed {seed}", ckpt.variant, ckpt.seed),
                    });
                }
                for (kind, severity, view) in &corrupted {
                    log::info!("adapting {} on {kind} s{severity}", run_name(variant, k, seed));
                    let results = adapt_dataset(&ckpt.model, &ckpt.prototypes, view, shape, &adapt_cfg, &config.augment)?;
                    if results.failures > 0 {
                        log::warn!("{} {kind} s{severity}: {} samples fell back to the unadapted prediction", run_name(variant, k, seed), results.failures);
                    }
                    let path = dir.join(format!("seed{seed}")).join(format!("{kind}_s{severity}.jsonl"));
                    write_text(&path, &records_jsonl(&hash, &results))?;
                    cells.push(CellResult { seed, kind: *kind, severity: *severity, results });
                }
            }
            let tables = sweep_tables(&hash, variant, k, &config.seeds, &cells);
            write_text(&dir.join("per_seed.csv"), &tables.per_seed)?;
            write_text(&dir.join("summary.csv"), &tables.summary)?;
            if !tables.steps.is_empty() {
                write_text(&dir.join("steps.csv"), &tables.steps)?;
            }
            all.push((variant, k, cells));
        }
    }
    write_config(out, config)?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_single_value_has_zero_spread() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn names_are_stable() {
        assert_eq!(run_name(Variant::JtEnt, 30, 2), "jt-ent_k30_seed2");
        let p = checkpoint_path(Path::new("o"), Variant::Jt, 10, 0);
        assert_eq!(p, Path::new("o/checkpoints/jt_k10_seed0.ckpt"));
    }
}
