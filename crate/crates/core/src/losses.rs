//! Training and test objectives with analytic gradients.
//!
//! Codes are always treated as constants: no gradient flows through the
//! Sinkhorn solve or the closed-form test codes.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{BlockId, BlockRole, ClassifierHead, ModelParams, PrototypeBank, ProjectionBatch, Upstream};
use crate::ot_codes::{score_matrix, sinkhorn_codes, test_codes, CodeMatrix, SinkhornSettings};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    S,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GradKey {
    Block(BlockId),
    Prototypes,
    /// W.r.t. the `D × B` projections of one view.
    Projections(View),
    /// W.r.t. a `B × classes` logit matrix.
    Logits,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: BTreeMap<GradKey, Array2<f64>>,
}

impl LossValue {
    fn accumulate(&mut self, key: GradKey, g: Array2<f64>, scale: f64) {
        match self.grads.get_mut(&key) {
            Some(acc) => acc.scaled_add(scale, &g),
            None => {
                self.grads.insert(key, if scale == 1.0 { g } else { g * scale });
            }
        }
    }

    /// `self += weight * other`, value and gradients.
    pub fn add_scaled(&mut self, other: &LossValue, weight: f64) {
        self.value += weight * other.value;
        for (k, g) in &other.grads {
            self.accumulate(*k, g.clone(), weight);
        }
    }

    pub fn grad(&self, key: GradKey) -> Option<&Array2<f64>> {
        self.grads.get(&key)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperaturePair {
    /// Softmax temperature of the prototype predictions.
    pub tau: f64,
    /// Code smoothness.
    pub epsilon: f64,
}

impl TemperaturePair {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Parameter(format!(
                "temperatures must be positive, got tau={} epsilon={}",
                self.tau, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Column-wise log-softmax of `x / temperature`.
fn log_softmax_columns(x: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = x.mapv(|v| v / temperature);
    for mut col in out.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        col.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax.
fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Entropy in nats with `0 log 0 = 0` and logs floored at [`PROB_FLOOR`].
pub fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().map(|v| if v > 0.0 { -v * v.max(PROB_FLOOR).ln() } else { 0.0 }).sum()
}

/// `dH/dp` matching [`entropy`].
fn entropy_grad(p: f64) -> f64 {
    -(p.max(PROB_FLOOR).ln() + 1.0)
}

/// One swap direction: `-(1/B) Σ_b Σ_k q[k,b] log p[k,b]` with
/// `p = softmax(Cᵀ z / τ)`. Returns `(value, d_scores)`.
fn swap_term(scores: &Array2<f64>, q: &Array2<f64>, tau: f64) -> (f64, Array2<f64>) {
    let batch = scores.ncols() as f64;
    let logp = log_softmax_columns(scores, tau);
    let value = -(q * &logp).sum() / batch;
    let mut d = logp.mapv(f64::exp);
    for (mut dcol, qcol) in d.columns_mut().into_iter().zip(q.columns()) {
        let mass = qcol.sum();
        dcol.zip_mut_with(&qcol, |g, &qv| *g = (*g * mass - qv) / (tau * batch));
    }
    (value, d)
}

/// Swapped prediction: codes of view `s` are predicted from projections of
/// view `t` and vice versa, averaged over the batch.
///
/// Gradients are reported w.r.t. both projection batches and the prototypes.
pub fn swapped_prediction_loss(
    z_s: &ProjectionBatch,
    z_t: &ProjectionBatch,
    q_s: &CodeMatrix,
    q_t: &CodeMatrix,
    prototypes: &PrototypeBank,
    tau: f64,
) -> Result<LossValue> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
    }
    let (k, b) = (prototypes.count(), z_s.len());
    if z_t.len() != b || q_s.values().dim() != (k, b) || q_t.values().dim() != (k, b) {
        return Err(Error::Shape(format!(
            "views/codes disagree: z_s {}x{}, z_t {}x{}, q_s {:?}, q_t {:?}, K={k}",
            z_s.dim(),
            b,
            z_t.dim(),
            z_t.len(),
            q_s.values().dim(),
            q_t.values().dim()
        )));
    }
    let s_scores = score_matrix(prototypes, z_s)?;
    let t_scores = score_matrix(prototypes, z_t)?;
    let (qs, qt) = (q_s.column_distributions(), q_t.column_distributions());
    let (v_t, d_t) = swap_term(t_scores.values(), &qs, tau);
    let (v_s, d_s) = swap_term(s_scores.values(), &qt, tau);

    let c = prototypes.values();
    let mut out = LossValue { value: v_t + v_s, grads: BTreeMap::new() };
    out.grads.insert(GradKey::Projections(View::S), c.dot(&d_s));
    out.grads.insert(GradKey::Projections(View::T), c.dot(&d_t));
    let dc = z_s.values().dot(&d_s.t()) + z_t.values().dot(&d_t.t());
    out.grads.insert(GradKey::Prototypes, dc);
    Ok(out)
}

/// Mean negative log-likelihood of the true class. `logits` is `B × classes`.
pub fn cross_entropy_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<LossValue> {
    let (b, classes) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let p = softmax_rows(logits);
    let mut value = 0.0;
    let mut d = p.clone();
    for (n, &y) in labels.iter().enumerate() {
        let row = logits.row(n);
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        value += lse - row[y];
        d[[n, y]] -= 1.0;
    }
    d /= b as f64;
    let mut out = LossValue { value: value / b as f64, grads: BTreeMap::new() };
    out.grads.insert(GradKey::Logits, d);
    Ok(out)
}

/// Mean per-prototype prediction entropy minus the entropy of the mean
/// prediction, with the classifier applied to each prototype.
///
/// Gradients flow to the prototypes and to both classifier blocks.
pub fn prototype_entropy_loss(prototypes: &PrototypeBank, classifier: ClassifierHead<'_>) -> Result<LossValue> {
    let c = prototypes.values();
    if classifier.weight.nrows() != c.nrows() {
        return Err(Error::Shape(format!(
            "classifier expects {}-dimensional inputs, prototypes are {}-dimensional",
            classifier.weight.nrows(),
            c.nrows()
        )));
    }
    let k = c.ncols() as f64;
    let logits = classifier.logits(&c.t().to_owned());
    let p = softmax_rows(&logits);
    let marginal = p.mean_axis(Axis(0)).unwrap();
    let mean_h: f64 = p.rows().into_iter().map(|r| entropy(r.iter().copied())).sum::<f64>() / k;
    let value = mean_h - entropy(marginal.iter().copied());

    let g_marg = marginal.mapv(entropy_grad);
    let mut dlogits = Array2::zeros(p.dim());
    for (n, prow) in p.rows().into_iter().enumerate() {
        let g: Vec<f64> = prow
            .iter()
            .zip(g_marg.iter())
            .map(|(&pv, &gm)| (entropy_grad(pv) - gm) / k)
            .collect();
        let dot: f64 = prow.iter().zip(&g).map(|(a, b)| a * b).sum();
        for (j, &pv) in prow.iter().enumerate() {
            dlogits[[n, j]] = pv * (g[j] - dot);
        }
    }
    let mut out = LossValue { value, grads: BTreeMap::new() };
    out.grads.insert(GradKey::Block(classifier.weight_id), c.dot(&dlogits));
    out.grads.insert(GradKey::Block(classifier.bias_id), dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
    out.grads.insert(GradKey::Prototypes, classifier.weight.dot(&dlogits.t()));
    Ok(out)
}

/// Two augmented views of a labelled batch, each `B × input_dim`.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub view_s: Array2<f64>,
    pub view_t: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Loss-term weights. The cross-entropy is averaged over both views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub temps: TemperaturePair,
    pub sinkhorn_iterations: usize,
    pub swav_weight: f64,
    pub ce_weight: f64,
    pub ent_weight: f64,
}

/// Unweighted component values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub swav: f64,
    pub ce: f64,
    pub ent: f64,
}

const ALL_ROLES: [BlockRole; 4] = [
    BlockRole::BackboneEarly,
    BlockRole::BackboneLast,
    BlockRole::Projection,
    BlockRole::Classifier,
];

/// `L_SwAV + γ₁ L_CE + γ₂ L_ent` with gradients w.r.t. every model block and
/// the prototypes.
pub fn ttaps_training_loss(
    batch: &TrainBatch,
    model: &ModelParams,
    prototypes: &PrototypeBank,
    temps: TemperaturePair,
    gamma1: f64,
    gamma2: f64,
    sinkhorn_iterations: usize,
) -> Result<(LossValue, LossParts)> {
    if gamma1 < 0.0 || gamma2 < 0.0 {
        return Err(Error::Parameter("loss weights must be nonnegative".into()));
    }
    let obj = Objective { temps, sinkhorn_iterations, swav_weight: 1.0, ce_weight: gamma1, ent_weight: gamma2 };
    training_objective(batch, model, prototypes, &obj)
}

/// Weighted training objective; terms with zero weight are skipped entirely.
pub fn training_objective(
    batch: &TrainBatch,
    model: &ModelParams,
    prototypes: &PrototypeBank,
    obj: &Objective,
) -> Result<(LossValue, LossParts)> {
    obj.temps.validate()?;
    let fs = model.forward(&batch.view_s)?;
    let ft = model.forward(&batch.view_t)?;
    let mut parts = LossParts::default();
    let mut total = LossValue::default();
    let mut up_s = Upstream::default();
    let mut up_t = Upstream::default();

    if obj.swav_weight != 0.0 {
        let settings = SinkhornSettings::new(obj.temps.epsilon, obj.sinkhorn_iterations);
        let q_s = sinkhorn_codes(&score_matrix(prototypes, &fs.projections)?, &settings)?;
        let q_t = sinkhorn_codes(&score_matrix(prototypes, &ft.projections)?, &settings)?;
        let l = swapped_prediction_loss(&fs.projections, &ft.projections, &q_s, &q_t, prototypes, obj.temps.tau)?;
        parts.swav = l.value;
        total.value += obj.swav_weight * l.value;
        up_s.projections = Some(&l.grads[&GradKey::Projections(View::S)] * obj.swav_weight);
        up_t.projections = Some(&l.grads[&GradKey::Projections(View::T)] * obj.swav_weight);
        total.accumulate(GradKey::Prototypes, l.grads[&GradKey::Prototypes].clone(), obj.swav_weight);
    }
    if obj.ce_weight != 0.0 {
        let ls = cross_entropy_loss(&fs.logits, &batch.labels)?;
        let lt = cross_entropy_loss(&ft.logits, &batch.labels)?;
        parts.ce = 0.5 * (ls.value + lt.value);
        total.value += obj.ce_weight * parts.ce;
        up_s.logits = Some(&ls.grads[&GradKey::Logits] * (0.5 * obj.ce_weight));
        up_t.logits = Some(&lt.grads[&GradKey::Logits] * (0.5 * obj.ce_weight));
    }
    if obj.ent_weight != 0.0 {
        let l = prototype_entropy_loss(prototypes, model.classifier())?;
        parts.ent = l.value;
        total.add_scaled(&l, obj.ent_weight);
    }
    for (f, up) in [(&fs, &up_s), (&ft, &up_t)] {
        if up.projections.is_none() && up.logits.is_none() {
            continue;
        }
        for (id, g) in model.backward(&f.tape, up, &ALL_ROLES)? {
            total.accumulate(GradKey::Block(id), g, 1.0);
        }
    }
    Ok((total, parts))
}

/// Parameters a caller may ask the test loss to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Blocks(BlockRole),
    Prototypes,
}

/// Swapped-prediction loss on augmented copies of one test sample, with
/// closed-form codes. Only backbone blocks may be differentiated.
pub fn swav_test_loss(
    view_s: &Array2<f64>,
    view_t: &Array2<f64>,
    model: &ModelParams,
    prototypes: &PrototypeBank,
    temps: TemperaturePair,
    scope: &[ParamGroup],
) -> Result<LossValue> {
    temps.validate()?;
    let mut roles = Vec::new();
    for g in scope {
        match g {
            ParamGroup::Blocks(r @ (BlockRole::BackboneEarly | BlockRole::BackboneLast)) => roles.push(*r),
            other => {
                return Err(Error::Contract(format!(
                    "test-time loss only differentiates backbone blocks; {other:?} stays fixed"
                )))
            }
        }
    }
    let fs = model.forward(view_s)?;
    let ft = model.forward(view_t)?;
    let q_s = test_codes(&score_matrix(prototypes, &fs.projections)?, temps.epsilon)?;
    let q_t = test_codes(&score_matrix(prototypes, &ft.projections)?, temps.epsilon)?;
    let l = swapped_prediction_loss(&fs.projections, &ft.projections, &q_s, &q_t, prototypes, temps.tau)?;
    let mut out = LossValue { value: l.value, grads: BTreeMap::new() };
    for (f, view) in [(&fs, View::S), (&ft, View::T)] {
        let up = Upstream { projections: Some(l.grads[&GradKey::Projections(view)].clone()), logits: None };
        for (id, g) in model.backward(&f.tape, &up, &roles)? {
            out.accumulate(GradKey::Block(id), g, 1.0);
        }
    }
    Ok(out)
}
