//! Shared fixtures and independent loss oracles for the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoalign::losses::{GradKey, LossValue, TrainBatch};
use protoalign::model::{Architecture, BlockId, ModelParams, PrototypeBank};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_arch() -> Architecture {
    Architecture { input_dim: 12, width: 8, num_stages: 2, groups: 2, proj_hidden: 6, proj_dim: 4, num_classes: 3 }
}

/// A randomly initialised model whose parameters are perturbed away from
/// their initial values so that biases and norm parameters are non-trivial.
pub fn random_model(arch: Architecture, seed: u64) -> ModelParams {
    let mut m = ModelParams::new(arch, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let ids: Vec<BlockId> = m.block_ids().collect();
    for id in ids {
        m.block_mut(id).mapv_inplace(|v| v + r.gen_range(-0.2..0.2));
    }
    m
}

pub fn random_batch(arch: &Architecture, b: usize, seed: u64) -> TrainBatch {
    let mut r = rng(seed);
    TrainBatch {
        view_s: Array2::from_shape_fn((b, arch.input_dim), |_| r.gen_range(0.0..1.0)),
        view_t: Array2::from_shape_fn((b, arch.input_dim), |_| r.gen_range(0.0..1.0)),
        labels: (0..b).map(|_| r.gen_range(0..arch.num_classes)).collect(),
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `-(1/B) Σ_b Σ_k q[k,b] log softmax_k(c_k·z_b / τ)`, for `z` given as
/// `B × D` rows and `q` as per-column distributions.
pub fn oracle_swap(z_rows: &Array2<f64>, c: &Array2<f64>, q: &Array2<f64>, tau: f64) -> f64 {
    let (b, k) = (z_rows.nrows(), c.ncols());
    let mut total = 0.0;
    for n in 0..b {
        let scores: Vec<f64> = (0..k).map(|j| c.column(j).dot(&z_rows.row(n)) / tau).collect();
        let lp = log_softmax(&scores);
        total -= (0..k).map(|j| q[[j, n]] * lp[j]).sum::<f64>();
    }
    total / b as f64
}

/// Both swap directions: codes of `s` predicted from `t` and vice versa.
pub fn oracle_swav(zs: &Array2<f64>, zt: &Array2<f64>, c: &Array2<f64>, qs: &Array2<f64>, qt: &Array2<f64>, tau: f64) -> f64 {
    oracle_swap(zt, c, qs, tau) + oracle_swap(zs, c, qt, tau)
}

pub fn oracle_ce(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        total -= log_softmax(&logits.row(n).to_vec())[y];
    }
    total / labels.len() as f64
}

fn h(p: &[f64]) -> f64 {
    p.iter().map(|&v| if v > 0.0 { -v * v.max(1e-12).ln() } else { 0.0 }).sum()
}

/// Mean entropy of the classifier's prediction on every prototype minus the
/// entropy of the mean prediction.
pub fn oracle_ent(c: &Array2<f64>, w: &Array2<f64>, bias: &Array2<f64>) -> f64 {
    let k = c.ncols();
    let classes = w.ncols();
    let mut mean = vec![0.0; classes];
    let mut mean_h = 0.0;
    for j in 0..k {
        let logits: Vec<f64> = (0..classes).map(|cl| c.column(j).dot(&w.column(cl)) + bias[[0, cl]]).collect();
        let p: Vec<f64> = log_softmax(&logits).iter().map(|v| v.exp()).collect();
        mean_h += h(&p) / k as f64;
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v / k as f64;
        }
    }
    mean_h - h(&mean)
}

/// Projections as `B × D` rows and logits of `inputs`.
pub fn forward_rows(model: &ModelParams, inputs: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let f = model.forward(inputs).unwrap();
    (f.projections.values().t().to_owned(), f.logits)
}

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Largest relative error over sampled entries of every parameter block.
/// With `missing_is_zero`, blocks absent from `loss` must have a zero
/// numerical gradient; otherwise they are skipped.
pub fn check_blocks(
    model: &ModelParams,
    loss: &LossValue,
    entries_per_block: usize,
    seed: u64,
    missing_is_zero: bool,
    f: impl Fn(&ModelParams) -> f64,
) -> (f64, usize) {
    let mut r = rng(seed);
    let mut worst = 0.0_f64;
    let mut checked = 0;
    let ids: Vec<BlockId> = model.block_ids().collect();
    for id in ids {
        let dim = model.block(id).value.dim();
        let analytic = loss.grad(GradKey::Block(id));
        if analytic.is_none() && !missing_is_zero {
            continue;
        }
        for _ in 0..entries_per_block {
            let (i, j) = (r.gen_range(0..dim.0), r.gen_range(0..dim.1));
            let mut plus = model.clone();
            plus.block_mut(id)[[i, j]] += FD_STEP;
            let mut minus = model.clone();
            minus.block_mut(id)[[i, j]] -= FD_STEP;
            let num = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            let a = analytic.map(|g| g[[i, j]]).unwrap_or(0.0);
            let e = if analytic.is_some() { rel_err(a, num) } else { num.abs() };
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Relative error of the prototype gradient over every entry.
pub fn check_prototypes(c: &Array2<f64>, grad: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let mut worst = 0.0_f64;
    for ((i, j), &a) in grad.indexed_iter() {
        let mut plus = c.clone();
        plus[[i, j]] += FD_STEP;
        let mut minus = c.clone();
        minus[[i, j]] -= FD_STEP;
        let num = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(a, num));
    }
    worst
}

pub fn random_bank(d: usize, k: usize, seed: u64) -> PrototypeBank {
    PrototypeBank::random(d, k, &mut rng(seed))
}

use protoalign::adapt::AdaptScope;
use protoalign::losses::{swav_test_loss, training_objective, Objective, TemperaturePair};
use protoalign::ot_codes::{score_matrix, sinkhorn_codes, test_codes, SinkhornSettings};

/// Analytic-vs-finite-difference relative errors for every loss on one
/// randomized small model. Codes are evaluated once at the base point and
/// held fixed, matching their stop-gradient treatment.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let arch = small_arch();
    let model = random_model(arch, seed);
    let bank = random_bank(arch.proj_dim, 5, seed + 1);
    let batch = random_batch(&arch, 4, seed + 2);
    let temps = TemperaturePair { tau: 0.5, epsilon: 0.05 };
    let iters = 3;
    let settings = SinkhornSettings::new(temps.epsilon, iters);
    let fs = model.forward(&batch.view_s).unwrap();
    let ft = model.forward(&batch.view_t).unwrap();
    let qs = sinkhorn_codes(&score_matrix(&bank, &fs.projections).unwrap(), &settings).unwrap().column_distributions();
    let qt = sinkhorn_codes(&score_matrix(&bank, &ft.projections).unwrap(), &settings).unwrap().column_distributions();

    let swav_at = |m: &ModelParams, c: &Array2<f64>| {
        let (zs, _) = forward_rows(m, &batch.view_s);
        let (zt, _) = forward_rows(m, &batch.view_t);
        oracle_swav(&zs, &zt, c, &qs, &qt, temps.tau)
    };
    let ce_at = |m: &ModelParams| {
        let (_, ls) = forward_rows(m, &batch.view_s);
        let (_, lt) = forward_rows(m, &batch.view_t);
        0.5 * (oracle_ce(&ls, &batch.labels) + oracle_ce(&lt, &batch.labels))
    };
    let ent_at = |m: &ModelParams, c: &Array2<f64>| {
        let h = m.classifier();
        oracle_ent(c, h.weight, h.bias)
    };
    let c0 = bank.values().clone();
    let mut out = Vec::new();
    let mut run = |name: &'static str, w: (f64, f64, f64)| {
        let obj = Objective { temps, sinkhorn_iterations: iters, swav_weight: w.0, ce_weight: w.1, ent_weight: w.2 };
        let (loss, _) = training_objective(&batch, &model, &bank, &obj).unwrap();
        let total = |m: &ModelParams, c: &Array2<f64>| {
            let mut v = 0.0;
            if w.0 != 0.0 {
                v += w.0 * swav_at(m, c);
            }
            if w.1 != 0.0 {
                v += w.1 * ce_at(m);
            }
            if w.2 != 0.0 {
                v += w.2 * ent_at(m, c);
            }
            v
        };
        let (e_blocks, _) = check_blocks(&model, &loss, 4, seed + 3, true, |m| total(m, &c0));
        let e_protos = match loss.grad(GradKey::Prototypes) {
            Some(g) => check_prototypes(&c0, g, |c| total(&model, c)),
            None => 0.0,
        };
        out.push((name, e_blocks.max(e_protos)));
    };
    run("L_SwAV", (1.0, 0.0, 0.0));
    run("L_CE", (0.0, 1.0, 0.0));
    run("L_ent", (0.0, 0.0, 1.0));
    run("L_TTAPS", (1.0, 0.3, 0.1));

    let test_temps = TemperaturePair { tau: 0.75, epsilon: 1.0 };
    let tqs = test_codes(&score_matrix(&bank, &fs.projections).unwrap(), test_temps.epsilon).unwrap().column_distributions();
    let tqt = test_codes(&score_matrix(&bank, &ft.projections).unwrap(), test_temps.epsilon).unwrap().column_distributions();
    let loss = swav_test_loss(&batch.view_s, &batch.view_t, &model, &bank, test_temps, &AdaptScope::AllBackbone.groups()).unwrap();
    let (e, _) = check_blocks(&model, &loss, 4, seed + 4, false, |m| {
        let (zs, _) = forward_rows(m, &batch.view_s);
        let (zt, _) = forward_rows(m, &batch.view_t);
        oracle_swav(&zs, &zt, &c0, &tqs, &tqt, test_temps.tau)
    });
    out.push(("L_SwAV_test", e));
    out
}
