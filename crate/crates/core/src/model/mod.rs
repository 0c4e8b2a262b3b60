//! Backbone `f`, projection head `g` and classifier `h`.
//!
//! ```text
//! x ─ stem(linear, group norm, relu) ─ stage₁ … stageₙ ─ fc, relu, fc ─ ‖·‖ ─ z ─ linear ─ logits
//! ```
//!
//! Each residual stage computes `relu(h + gn(fc(relu(gn(fc(h))))))`. The last
//! stage is tagged [`BlockRole::BackboneLast`], which is the default scope of
//! test-time adaptation. The classifier reads the unit-norm projection, so
//! prototypes live in the same space the classifier sees.

pub mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::GroupNormCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    BackboneEarly,
    BackboneLast,
    Projection,
    Classifier,
}

impl BlockRole {
    pub fn code(self) -> u8 {
        match self {
            BlockRole::BackboneEarly => 0,
            BlockRole::BackboneLast => 1,
            BlockRole::Projection => 2,
            BlockRole::Classifier => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => BlockRole::BackboneEarly,
            1 => BlockRole::BackboneLast,
            2 => BlockRole::Projection,
            3 => BlockRole::Classifier,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub role: BlockRole,
    pub kind: ParamKind,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub width: usize,
    pub num_stages: usize,
    pub groups: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.width,
            self.groups,
            self.proj_hidden,
            self.proj_dim,
            self.num_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("architecture dimensions must be positive: {self:?}")));
        }
        if self.num_stages < 2 {
            return Err(Error::Config("backbone needs at least two residual stages".into()));
        }
        for (what, n) in [("width", self.width), ("projection hidden width", self.proj_hidden)] {
            if n % self.groups != 0 {
                return Err(Error::Config(format!("{what} {n} is not divisible into {} groups", self.groups)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct NormedLinear {
    w: BlockId,
    b: BlockId,
    gamma: BlockId,
    beta: BlockId,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    first: NormedLinear,
    second: NormedLinear,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: NormedLinear,
    stages: Vec<Stage>,
    proj_in: NormedLinear,
    proj_out: [BlockId; 2],
    cls: [BlockId; 2],
}

/// Backbone, projection head and classifier parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: Architecture,
    blocks: Vec<ParamBlock>,
    layout: Layout,
    rng_seed: u64,
    version: u64,
}

/// Saved parameter values. Optimiser state is never part of a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    arch: Architecture,
    values: Vec<Array2<f64>>,
}

struct Builder {
    blocks: Vec<ParamBlock>,
}

impl Builder {
    fn push(&mut self, name: String, role: BlockRole, kind: ParamKind, value: Array2<f64>) -> BlockId {
        self.blocks.push(ParamBlock { name, role, kind, value });
        BlockId(self.blocks.len() - 1)
    }

    fn linear(&mut self, prefix: &str, role: BlockRole, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (BlockId, BlockId) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
        let w = self.push(format!("{prefix}.weight"), role, ParamKind::Weight, w);
        let b = self.push(format!("{prefix}.bias"), role, ParamKind::Bias, Array2::zeros((1, fan_out)));
        (w, b)
    }

    fn normed(&mut self, prefix: &str, role: BlockRole, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> NormedLinear {
        let (w, b) = self.linear(&format!("{prefix}.fc"), role, fan_in, fan_out, rng);
        let gamma = self.push(format!("{prefix}.gn.scale"), role, ParamKind::NormScale, Array2::ones((1, fan_out)));
        let beta = self.push(format!("{prefix}.gn.shift"), role, ParamKind::NormShift, Array2::zeros((1, fan_out)));
        NormedLinear { w, b, gamma, beta }
    }
}

fn build_layout(arch: &Architecture, rng: &mut impl Rng) -> (Vec<ParamBlock>, Layout) {
    let mut bld = Builder { blocks: Vec::new() };
    let stem = bld.normed("stem", BlockRole::BackboneEarly, arch.input_dim, arch.width, rng);
    let stages = (0..arch.num_stages)
        .map(|i| {
            let role = if i + 1 == arch.num_stages { BlockRole::BackboneLast } else { BlockRole::BackboneEarly };
            Stage {
                first: bld.normed(&format!("stage{i}.a"), role, arch.width, arch.width, rng),
                second: bld.normed(&format!("stage{i}.b"), role, arch.width, arch.width, rng),
            }
        })
        .collect();
    let proj_in = bld.normed("proj.a", BlockRole::Projection, arch.width, arch.proj_hidden, rng);
    let (pw2, pb2) = bld.linear("proj.fc2", BlockRole::Projection, arch.proj_hidden, arch.proj_dim, rng);
    let (cw, cb) = bld.linear("cls", BlockRole::Classifier, arch.proj_dim, arch.num_classes, rng);
    let layout = Layout { stem, stages, proj_in, proj_out: [pw2, pb2], cls: [cw, cb] };
    (bld.blocks, layout)
}

/// Unit-norm projections, stored `D × B` (one column per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBatch {
    values: Array2<f64>,
}

pub const UNIT_NORM_TOL: f64 = 1e-6;

impl ProjectionBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_unit_columns(&values, "projection")?;
        Ok(ProjectionBatch { values })
    }

    pub(crate) fn from_rows(z: &Array2<f64>) -> Self {
        ProjectionBatch { values: z.t().to_owned() }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

fn check_unit_columns(values: &Array2<f64>, what: &str) -> Result<()> {
    for (j, col) in values.columns().into_iter().enumerate() {
        let n = col.dot(&col).sqrt();
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Input(format!("{what} column {j} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Prototype matrix `C`, stored `D × K`, every column unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    values: Array2<f64>,
}

impl PrototypeBank {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_unit_columns(&values, "prototype")?;
        Ok(PrototypeBank { values })
    }

    /// Uniform on the unit sphere.
    pub fn random(dim: usize, count: usize, rng: &mut impl Rng) -> Self {
        let mut values = Array2::from_shape_fn((dim, count), |_| StandardNormal.sample(rng));
        normalize_columns(&mut values);
        PrototypeBank { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn count(&self) -> usize {
        self.values.ncols()
    }

    /// Apply an in-place update, then project every column back to the sphere.
    pub fn update(&mut self, f: impl FnOnce(&mut Array2<f64>)) {
        f(&mut self.values);
        normalize_columns(&mut self.values);
    }
}

fn normalize_columns(values: &mut Array2<f64>) {
    for mut col in values.columns_mut() {
        let n = col.dot(&col).sqrt().max(1e-12);
        col.mapv_inplace(|v| v / n);
    }
}

#[derive(Debug, Clone)]
struct NormedCache {
    input: Array2<f64>,
    gn: GroupNormCache,
}

#[derive(Debug, Clone)]
struct StageCache {
    a: NormedCache,
    a_out: Array2<f64>,
    b: NormedCache,
    out: Array2<f64>,
}

/// Activations recorded by [`ModelParams::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    arch: Architecture,
    stem: NormedCache,
    stem_out: Array2<f64>,
    stages: Vec<StageCache>,
    proj_cache: NormedCache,
    proj_hidden: Array2<f64>,
    proj_norms: Vec<f64>,
    z_rows: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub projections: ProjectionBatch,
    /// `B × num_classes`
    pub logits: Array2<f64>,
    pub tape: Tape,
}

/// Upstream gradients entering the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    /// `D × B`, w.r.t. the unit-norm projections.
    pub projections: Option<Array2<f64>>,
    /// `B × num_classes`
    pub logits: Option<Array2<f64>>,
}

pub type GradMap = BTreeMap<BlockId, Array2<f64>>;

/// Borrowed view of the linear classification head.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead<'a> {
    pub weight: &'a Array2<f64>,
    pub bias: &'a Array2<f64>,
    pub weight_id: BlockId,
    pub bias_id: BlockId,
}

impl ClassifierHead<'_> {
    /// `inputs` is `n × D`; returns `n × num_classes`.
    pub fn logits(&self, inputs: &Array2<f64>) -> Array2<f64> {
        layers::linear(inputs, self.weight, self.bias)
    }
}

fn check_finite(a: &Array2<f64>, layer: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite activations in layer {layer}")))
    }
}

impl ModelParams {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = crate::rng::substream(seed, &[0x6d6f_6465_6c]);
        let (blocks, layout) = build_layout(&arch, &mut rng);
        Ok(ModelParams { arch, blocks, layout, rng_seed: seed, version: 0 })
    }

    pub(crate) fn from_blocks(arch: Architecture, seed: u64, values: Vec<(String, BlockRole, Array2<f64>)>) -> Result<Self> {
        let mut m = ModelParams::new(arch, seed)?;
        if values.len() != m.blocks.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter blocks, found {}",
                m.blocks.len(),
                values.len()
            )));
        }
        for (block, (name, role, value)) in m.blocks.iter_mut().zip(values) {
            if block.name != name || block.role != role || block.value.dim() != value.dim() {
                return Err(Error::Contract(format!(
                    "block {name} ({role:?}, {:?}) does not match architecture block {} ({:?}, {:?})",
                    value.dim(),
                    block.name,
                    block.role,
                    block.value.dim()
                )));
            }
            block.value = value;
        }
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    /// Mutable access to a block's values. Invalidates outstanding tapes.
    pub fn block_mut(&mut self, id: BlockId) -> &mut Array2<f64> {
        self.version += 1;
        &mut self.blocks[id.0].value
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        (0..self.blocks.len()).map(BlockId)
    }

    pub fn ids_with_roles<'a>(&'a self, roles: &'a [BlockRole]) -> impl Iterator<Item = BlockId> + 'a {
        self.block_ids().filter(move |id| roles.contains(&self.blocks[id.0].role))
    }

    pub fn classifier(&self) -> ClassifierHead<'_> {
        let [w, b] = self.layout.cls;
        ClassifierHead {
            weight: &self.blocks[w.0].value,
            bias: &self.blocks[b.0].value,
            weight_id: w,
            bias_id: b,
        }
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            arch: self.arch,
            values: self.blocks.iter().map(|b| b.value.clone()).collect(),
        }
    }

    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.arch != self.arch || snap.values.len() != self.blocks.len() {
            return Err(Error::Contract("snapshot was taken from a different architecture".into()));
        }
        for (b, v) in self.blocks.iter_mut().zip(&snap.values) {
            b.value.assign(v);
        }
        self.version += 1;
        Ok(())
    }

    fn v(&self, id: BlockId) -> &Array2<f64> {
        &self.blocks[id.0].value
    }

    fn normed_forward(&self, x: &Array2<f64>, nl: &NormedLinear, name: &str) -> Result<(Array2<f64>, NormedCache)> {
        let pre = layers::linear(x, self.v(nl.w), self.v(nl.b));
        check_finite(&pre, name)?;
        let (y, gn) = layers::group_norm(&pre, self.v(nl.gamma), self.v(nl.beta), self.arch.groups)?;
        check_finite(&y, name)?;
        Ok((y, NormedCache { input: x.clone(), gn }))
    }

    /// `inputs` is `B × input_dim`.
    pub fn forward(&self, inputs: &Array2<f64>) -> Result<ForwardOutput> {
        if inputs.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input dimension {} does not match backbone input {}",
                inputs.ncols(),
                self.arch.input_dim
            )));
        }
        let (pre, stem) = self.normed_forward(inputs, &self.layout.stem, "stem")?;
        let stem_out = layers::relu(&pre);
        let mut h = stem_out.clone();
        let mut stages = Vec::with_capacity(self.layout.stages.len());
        for (i, st) in self.layout.stages.iter().enumerate() {
            let (a_pre, a) = self.normed_forward(&h, &st.first, &format!("stage{i}.a"))?;
            let a_out = layers::relu(&a_pre);
            let (b_pre, b) = self.normed_forward(&a_out, &st.second, &format!("stage{i}.b"))?;
            let out = layers::relu(&(&h + &b_pre));
            stages.push(StageCache { a, a_out, b, out: out.clone() });
            h = out;
        }
        let [pw2, pb2] = self.layout.proj_out;
        let (hid_pre, proj_cache) = self.normed_forward(&h, &self.layout.proj_in, "proj.a")?;
        let proj_hidden = layers::relu(&hid_pre);
        let v = layers::linear(&proj_hidden, self.v(pw2), self.v(pb2));
        check_finite(&v, "proj")?;
        let (z_rows, proj_norms) = layers::l2_normalize_rows(&v);
        let logits = self.classifier().logits(&z_rows);
        check_finite(&logits, "cls")?;
        Ok(ForwardOutput {
            projections: ProjectionBatch::from_rows(&z_rows),
            logits,
            tape: Tape {
                version: self.version,
                arch: self.arch,
                stem,
                stem_out,
                stages,
                proj_cache,
                proj_hidden,
                proj_norms,
                z_rows,
            },
        })
    }

    /// Class predictions for `B × input_dim` inputs.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Vec<usize>> {
        let out = self.forward(inputs)?;
        Ok(out.logits.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    /// Reverse pass. Returns gradients for blocks whose role is in `roles`
    /// and that the supplied upstream gradients reach. The pass stops early
    /// once no requested block remains upstream.
    pub fn backward(&self, tape: &Tape, upstream: &Upstream, roles: &[BlockRole]) -> Result<GradMap> {
        if tape.version != self.version || tape.arch != self.arch {
            return Err(Error::Contract("tape was recorded against different parameters".into()));
        }
        let batch = tape.z_rows.nrows();
        let mut grads = GradMap::new();
        let want = |id: BlockId| roles.contains(&self.blocks[id.0].role);

        let mut dz = Array2::<f64>::zeros((batch, self.arch.proj_dim));
        if let Some(up) = &upstream.projections {
            if up.dim() != (self.arch.proj_dim, batch) {
                return Err(Error::Shape(format!("projection upstream shape {:?}", up.dim())));
            }
            dz += &up.t();
        }
        if let Some(dl) = &upstream.logits {
            if dl.dim() != (batch, self.arch.num_classes) {
                return Err(Error::Shape(format!("logit upstream shape {:?}", dl.dim())));
            }
            let [cw, cb] = self.layout.cls;
            let (dx, dw, db) = layers::linear_backward(&tape.z_rows, self.v(cw), dl);
            if want(cw) {
                grads.insert(cw, dw);
                grads.insert(cb, db);
            }
            dz += &dx;
        }
        let needs_below = |from_stage: usize| -> bool {
            let mut ids: Vec<BlockId> = vec![self.layout.stem.w];
            for st in &self.layout.stages[..from_stage] {
                ids.push(st.first.w);
            }
            ids.into_iter().any(want)
        };
        let n_stages = self.layout.stages.len();
        if !(want(self.layout.proj_in.w) || needs_below(n_stages)) {
            return Ok(grads);
        }

        let dv = layers::l2_normalize_backward(&tape.z_rows, &tape.proj_norms, &dz);
        let [pw2, pb2] = self.layout.proj_out;
        let (dhid, dw2, db2) = layers::linear_backward(&tape.proj_hidden, self.v(pw2), &dv);
        if want(pw2) {
            grads.insert(pw2, dw2);
            grads.insert(pb2, db2);
        }
        let dhid = layers::relu_backward(&tape.proj_hidden, &dhid);
        let mut dh = self.normed_backward(&self.layout.proj_in, &tape.proj_cache, &dhid, &want, &mut grads);

        for i in (0..n_stages).rev() {
            if !needs_below(i + 1) {
                return Ok(grads);
            }
            let st = &self.layout.stages[i];
            let c = &tape.stages[i];
            let d_sum = layers::relu_backward(&c.out, &dh);
            let d_a_out = self.normed_backward(&st.second, &c.b, &d_sum, &want, &mut grads);
            let d_a_pre = layers::relu_backward(&c.a_out, &d_a_out);
            let d_in = self.normed_backward(&st.first, &c.a, &d_a_pre, &want, &mut grads);
            dh = d_sum + d_in;
        }
        if needs_below(0) {
            let d_pre = layers::relu_backward(&tape.stem_out, &dh);
            self.normed_backward(&self.layout.stem, &tape.stem, &d_pre, &want, &mut grads);
        }
        Ok(grads)
    }

    fn normed_backward(
        &self,
        nl: &NormedLinear,
        cache: &NormedCache,
        dy: &Array2<f64>,
        want: &impl Fn(BlockId) -> bool,
        grads: &mut GradMap,
    ) -> Array2<f64> {
        let (d_pre, dgamma, dbeta) = layers::group_norm_backward(&cache.gn, self.v(nl.gamma), dy);
        let (dx, dw, db) = layers::linear_backward(&cache.input, self.v(nl.w), &d_pre);
        if want(nl.w) {
            grads.insert(nl.w, dw);
            grads.insert(nl.b, db);
            grads.insert(nl.gamma, dgamma);
            grads.insert(nl.beta, dbeta);
        }
        dx
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 6,
            width: 8,
            num_stages: 2,
            groups: 2,
            proj_hidden: 6,
            proj_dim: 4,
            num_classes: 3,
        }
    }

    fn inputs(b: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((b, 6), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn projections_are_unit_norm_and_deterministic() {
        let m = ModelParams::new(tiny_arch(), 3).unwrap();
        let mut x = inputs(5, 1);
        let row = x.row(0).to_owned();
        x.row_mut(3).assign(&row);
        let out = m.forward(&x).unwrap();
        for col in out.projections.values().columns() {
            assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.projections.values().column(0), out.projections.values().column(3));
        let again = ModelParams::new(tiny_arch(), 3).unwrap().forward(&x).unwrap();
        assert_eq!(out.logits, again.logits);
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let mut m = ModelParams::new(tiny_arch(), 3).unwrap();
        let [w, b] = m.layout.cls;
        m.block_mut(w).fill(0.0);
        m.block_mut(b).fill(0.0);
        let out = m.forward(&inputs(4, 2)).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_dimension_is_rejected() {
        let m = ModelParams::new(tiny_arch(), 0).unwrap();
        assert!(matches!(m.forward(&Array2::zeros((2, 5))), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let mut m = ModelParams::new(tiny_arch(), 0).unwrap();
        let id = m.layout.stages[1].first.w;
        m.block_mut(id)[[0, 0]] = f64::NAN;
        match m.forward(&inputs(2, 0)) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("stage1.a"), "{msg}"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut m = ModelParams::new(tiny_arch(), 0).unwrap();
        let out = m.forward(&inputs(2, 0)).unwrap();
        m.block_mut(BlockId(0))[[0, 0]] += 1.0;
        let up = Upstream { logits: Some(Array2::ones((2, 3))), projections: None };
        assert!(matches!(m.backward(&out.tape, &up, &[BlockRole::Classifier]), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_blocks_are_absent() {
        let m = ModelParams::new(tiny_arch(), 0).unwrap();
        let out = m.forward(&inputs(3, 0)).unwrap();
        let up = Upstream { projections: Some(Array2::ones((4, 3))), logits: None };
        let all = [BlockRole::BackboneEarly, BlockRole::BackboneLast, BlockRole::Projection, BlockRole::Classifier];
        let g = m.backward(&out.tape, &up, &all).unwrap();
        let cls = m.classifier();
        assert!(!g.contains_key(&cls.weight_id) && !g.contains_key(&cls.bias_id));
        let g = m.backward(&out.tape, &up, &[BlockRole::BackboneLast]).unwrap();
        assert!(g.keys().all(|id| m.block(*id).role == BlockRole::BackboneLast));
        assert_eq!(g.len(), 8);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut m = ModelParams::new(tiny_arch(), 4).unwrap();
        let x = inputs(3, 5);
        let before = m.forward(&x).unwrap().logits;
        let snap = m.snapshot();
        for id in m.block_ids().collect::<Vec<_>>() {
            m.block_mut(id).mapv_inplace(|v| v * 1.5 + 0.1);
        }
        assert_ne!(m.forward(&x).unwrap().logits, before);
        m.restore(&snap).unwrap();
        m.restore(&snap).unwrap();
        assert_eq!(m.forward(&x).unwrap().logits, before);
        assert_eq!(m.snapshot(), snap);

        let mut other = ModelParams::new(Architecture { num_classes: 4, ..tiny_arch() }, 4).unwrap();
        assert!(matches!(other.restore(&snap), Err(Error::Contract(_))));
    }

    #[test]
    fn prototypes_stay_on_sphere() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut c = PrototypeBank::random(4, 6, &mut rng);
        c.update(|v| v.mapv_inplace(|x| x * 3.0 - 0.2));
        for col in c.values().columns() {
            assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(PrototypeBank::new(Array2::ones((2, 2))).is_err());
    }

    #[test]
    fn architecture_validation() {
        assert!(ModelParams::new(Architecture { num_stages: 1, ..tiny_arch() }, 0).is_err());
        assert!(matches!(ModelParams::new(Architecture { groups: 3, ..tiny_arch() }, 0), Err(Error::Config(_))));
    }
}
