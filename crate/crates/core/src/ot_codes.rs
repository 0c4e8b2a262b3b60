//! Code assignment between projections and prototypes.
//!
//! Codes are the maximisers of `Tr(Qᵀ Cᵀ Z) + ε H(Q)` over a set of
//! nonnegative `K × B` matrices. During training the feasible set is the
//! equipartition transportation polytope (rows sum to `1/K`, columns to
//! `1/B`), solved with Sinkhorn-Knopp scaling. At test time only the columns
//! are constrained to sum to one, and the maximiser is a column-wise softmax.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{PrototypeBank, ProjectionBatch};

/// `K × B` matrix of prototype/projection dot products.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(Array2<f64>);

impl ScoreMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (k, b) = values.dim();
        if k == 0 || b == 0 {
            return Err(Error::Shape(format!("score matrix must be non-empty, got {k}x{b}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("score matrix contains non-finite entries".into()));
        }
        Ok(ScoreMatrix(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_prototypes(&self) -> usize {
        self.0.nrows()
    }

    pub fn batch_size(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeMode {
    /// Equipartition polytope: rows sum to `1/K`, columns to `1/B`.
    Train,
    /// Relaxed polytope: every column sums to one.
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    values: Array2<f64>,
    mode: CodeMode,
}

impl CodeMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mode(&self) -> CodeMode {
        self.mode
    }

    /// Per-sample code distributions: every column rescaled to sum to one.
    ///
    /// Train-mode columns carry mass `1/B`; the swapped-prediction loss
    /// consumes each column as a distribution over prototypes.
    pub fn column_distributions(&self) -> Array2<f64> {
        let mut q = self.values.clone();
        for mut col in q.columns_mut() {
            let s: f64 = col.sum();
            if s > 0.0 {
                col.mapv_inplace(|v| v / s);
            }
        }
        q
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(1))
    }

    pub fn column_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornSettings {
    pub epsilon: f64,
    pub iterations: usize,
    /// Run the scaling updates on log-potentials.
    pub stabilized: bool,
}

impl SinkhornSettings {
    /// Log-domain updates are switched on automatically below `ε = 0.1`.
    pub fn new(epsilon: f64, iterations: usize) -> Self {
        SinkhornSettings {
            epsilon,
            iterations,
            stabilized: epsilon < 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter("sinkhorn iterations must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        SinkhornSettings::new(0.05, 3)
    }
}

/// Outcome of a Sinkhorn run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornReport {
    pub iterations: usize,
    /// Max absolute deviation of any row or column sum from its target.
    pub residual: f64,
}

/// `scores[k][b] = c_k · z_b`.
pub fn score_matrix(prototypes: &PrototypeBank, projections: &ProjectionBatch) -> Result<ScoreMatrix> {
    let c = prototypes.values();
    let z = projections.values();
    if c.nrows() != z.nrows() {
        return Err(Error::Shape(format!(
            "prototype dimension {} does not match projection dimension {}",
            c.nrows(),
            z.nrows()
        )));
    }
    ScoreMatrix::new(c.t().dot(z))
}

/// Sinkhorn-Knopp codes with a fixed number of row-then-column rescalings.
pub fn sinkhorn_codes(scores: &ScoreMatrix, settings: &SinkhornSettings) -> Result<CodeMatrix> {
    settings.validate()?;
    run_sinkhorn(scores, settings.epsilon, settings.stabilized, settings.iterations, None).map(|(q, _)| q)
}

/// Sinkhorn-Knopp iterated until the max marginal residual drops below `tol`
/// or `max_iterations` full iterations have run. If the iterate is still
/// outside tolerance it is refined with Newton steps on the same potentials.
pub fn sinkhorn_converged(
    scores: &ScoreMatrix,
    epsilon: f64,
    stabilized: bool,
    tol: f64,
    max_iterations: usize,
) -> Result<(CodeMatrix, SinkhornReport)> {
    SinkhornSettings { epsilon, iterations: max_iterations, stabilized }.validate()?;
    run_sinkhorn(scores, epsilon, stabilized, max_iterations, Some(tol))
}

fn run_sinkhorn(
    scores: &ScoreMatrix,
    epsilon: f64,
    stabilized: bool,
    max_iterations: usize,
    tol: Option<f64>,
) -> Result<(CodeMatrix, SinkhornReport)> {
    let (k, b) = scores.values().dim();
    if b == 1 {
        return Err(Error::Contract(
            "train-mode codes need a batch of at least two projections; \
             a single column forces uniform codes, use test_codes instead"
                .into(),
        ));
    }
    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let values = if stabilized {
        sinkhorn_log(scores.values(), epsilon, row_target, col_target, max_iterations, tol)
    } else {
        sinkhorn_plain(scores.values(), epsilon, row_target, col_target, max_iterations, tol)?
    };
    let (values, iterations) = values;
    let mut q = CodeMatrix { values, mode: CodeMode::Train };
    let mut residual = marginal_residual(&q);
    if let Some(tol) = tol {
        if residual >= tol {
            if let Some(polished) = newton_polish(scores.values(), epsilon, &q.values, tol) {
                let cand = CodeMatrix { values: polished, mode: CodeMode::Train };
                let r = marginal_residual(&cand);
                if r < residual {
                    q = cand;
                    residual = r;
                }
            }
        }
    }
    if !residual.is_finite() {
        return Err(Error::Numerical("sinkhorn produced non-finite codes".into()));
    }
    Ok((q, SinkhornReport { iterations, residual }))
}

fn marginal_residual(q: &CodeMatrix) -> f64 {
    let (k, b) = q.values.dim();
    let row = q.row_sums().iter().map(|s| (s - 1.0 / k as f64).abs()).fold(0.0, f64::max);
    let col = q.column_sums().iter().map(|s| (s - 1.0 / b as f64).abs()).fold(0.0, f64::max);
    row.max(col)
}

fn sinkhorn_plain(
    scores: &Array2<f64>,
    epsilon: f64,
    row_target: f64,
    col_target: f64,
    max_iterations: usize,
    tol: Option<f64>,
) -> Result<(Array2<f64>, usize)> {
    let mut q = scores.mapv(|s| (s / epsilon).exp());
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "exp(score / {epsilon}) overflows; enable stabilized (log-domain) mode"
        )));
    }
    let mut it = 0;
    while it < max_iterations {
        it += 1;
        for mut row in q.rows_mut() {
            let s = row.sum();
            if !(s > 0.0) {
                return Err(Error::Numerical("row mass underflowed; enable stabilized mode".into()));
            }
            row.mapv_inplace(|v| v * row_target / s);
        }
        for mut col in q.columns_mut() {
            let s = col.sum();
            if !(s > 0.0) {
                return Err(Error::Numerical("column mass underflowed; enable stabilized mode".into()));
            }
            col.mapv_inplace(|v| v * col_target / s);
        }
        if let Some(tol) = tol {
            let row_err = q
                .rows()
                .into_iter()
                .map(|r| (r.sum() - row_target).abs())
                .fold(0.0, f64::max);
            if row_err < tol {
                break;
            }
        }
    }
    Ok((q, it))
}

fn logsumexp<I: Iterator<Item = f64> + Clone>(xs: I) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sinkhorn_log(
    scores: &Array2<f64>,
    epsilon: f64,
    row_target: f64,
    col_target: f64,
    max_iterations: usize,
    tol: Option<f64>,
) -> (Array2<f64>, usize) {
    let (k, b) = scores.dim();
    let kernel = scores.mapv(|s| s / epsilon);
    let (log_r, log_c) = (row_target.ln(), col_target.ln());
    let mut f = Array1::<f64>::zeros(k);
    let mut g = Array1::<f64>::zeros(b);
    let mut it = 0;
    while it < max_iterations {
        it += 1;
        for i in 0..k {
            let row = kernel.row(i);
            f[i] = log_r - logsumexp((0..b).map(|j| row[j] + g[j]));
        }
        for j in 0..b {
            let col = kernel.column(j);
            g[j] = log_c - logsumexp((0..k).map(|i| col[i] + f[i]));
        }
        if let Some(tol) = tol {
            let row_err = (0..k)
                .map(|i| {
                    let s: f64 = (0..b).map(|j| (kernel[[i, j]] + f[i] + g[j]).exp()).sum();
                    (s - row_target).abs()
                })
                .fold(0.0, f64::max);
            if row_err < tol {
                break;
            }
        }
    }
    let q = Array2::from_shape_fn((k, b), |(i, j)| (kernel[[i, j]] + f[i] + g[j]).exp());
    (q, it)
}

/// Newton's method on the scaling potentials, started from a Sinkhorn
/// iterate. Sinkhorn converges linearly and stalls on near-sparse plans at
/// small `ε`; the fixed point is the same `Diag(u) exp(S/ε) Diag(v)`.
fn newton_polish(scores: &Array2<f64>, epsilon: f64, start: &Array2<f64>, tol: f64) -> Option<Array2<f64>> {
    let (k, b) = scores.dim();
    let (row_target, col_target) = (1.0 / k as f64, 1.0 / b as f64);
    let kernel = scores.mapv(|s| s / epsilon);
    // Recover potentials from the current plan: log q = kernel + f + g.
    let logq = start.mapv(|v| v.max(f64::MIN_POSITIVE).ln()) - &kernel;
    let g_last = logq[[0, b - 1]];
    let mut f: Vec<f64> = (0..k).map(|i| logq[[i, b - 1]] - g_last).collect();
    let mut g: Vec<f64> = (0..b).map(|j| logq[[0, j]] - f[0]).collect();
    let n = k + b - 1;
    let plan = |f: &[f64], g: &[f64]| Array2::from_shape_fn((k, b), |(i, j)| (kernel[[i, j]] + f[i] + g[j]).exp());
    let residuals = |q: &Array2<f64>| -> Vec<f64> {
        let mut r: Vec<f64> = q.rows().into_iter().map(|row| row.sum() - row_target).collect();
        r.extend(q.columns().into_iter().take(b - 1).map(|c| c.sum() - col_target));
        r
    };
    let norm = |r: &[f64]| r.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut q = plan(&f, &g);
    let mut res = residuals(&q);
    for _ in 0..100 {
        if norm(&res) < tol * 1e-2 {
            break;
        }
        let mut jac = vec![vec![0.0; n]; n];
        for i in 0..k {
            jac[i][i] = q.row(i).sum();
            for j in 0..b - 1 {
                jac[i][k + j] = q[[i, j]];
                jac[k + j][i] = q[[i, j]];
            }
        }
        for j in 0..b - 1 {
            jac[k + j][k + j] = q.column(j).sum();
        }
        let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
        let delta = solve_dense(jac, rhs)?;
        let current = norm(&res);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-6 {
            let nf: Vec<f64> = (0..k).map(|i| f[i] + t * delta[i]).collect();
            let ng: Vec<f64> = (0..b).map(|j| if j < b - 1 { g[j] + t * delta[k + j] } else { g[j] }).collect();
            let nq = plan(&nf, &ng);
            let nr = residuals(&nq);
            if norm(&nr) < current {
                f = nf;
                g = ng;
                q = nq;
                res = nr;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    // End on an exact column normalisation, matching the Sinkhorn convention.
    for mut col in q.columns_mut() {
        let s = col.sum();
        if !(s > 0.0) {
            return None;
        }
        col.mapv_inplace(|v| v * col_target / s);
    }
    Some(q)
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if !(a[p][c].abs() > 0.0) {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let m = a[r][c] / a[c][c];
            if m != 0.0 {
                for cc in c..n {
                    a[r][cc] -= m * a[c][cc];
                }
                b[r] -= m * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Closed-form codes for the relaxed polytope: column-wise `softmax(scores / ε)`.
pub fn test_codes(scores: &ScoreMatrix, epsilon: f64) -> Result<CodeMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut q = scores.values().mapv(|s| s / epsilon);
    for mut col in q.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        col.mapv_inplace(|v| (v - m).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    Ok(CodeMatrix { values: q, mode: CodeMode::Test })
}

/// Column objective `Σ_k q_k s_k + ε H(q)` with `0 log 0 = 0`.
pub fn column_objective(q: &[f64], scores: &[f64], epsilon: f64) -> f64 {
    let linear: f64 = q.iter().zip(scores).map(|(a, b)| a * b).sum();
    let entropy: f64 = q.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    linear + epsilon * entropy
}

/// Result of [`verify_closed_form`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormCheck {
    /// Max over columns of `closed-form objective − searched optimum`.
    /// Non-negative (up to rounding) when the closed form is optimal.
    pub gap: f64,
    /// Largest observed `|searched optimum − closed-form objective|`.
    pub max_abs_gap: f64,
    pub warning: Option<String>,
}

/// Derivative-free check that [`test_codes`] maximises the per-column
/// entropic objective on the probability simplex.
///
/// Two prototypes use golden-section search on the segment. Larger `K` use a
/// uniform simplex grid (coarsened so it stays tractable) followed by a
/// pairwise mass-transfer pattern search started from both the grid optimum
/// and the barycentre.
pub fn verify_closed_form(scores: &ScoreMatrix, epsilon: f64, grid_resolution: usize) -> Result<ClosedFormCheck> {
    let (k, b) = scores.values().dim();
    if k > 6 || b > 4 {
        return Err(Error::Parameter(format!("oracle limited to K <= 6 and B <= 4, got K={k}, B={b}")));
    }
    if grid_resolution == 0 {
        return Err(Error::Parameter("grid resolution must be positive".into()));
    }
    let codes = test_codes(scores, epsilon)?;
    let mut gap = f64::NEG_INFINITY;
    let mut max_abs_gap = 0.0_f64;
    let mut warning = None;
    for j in 0..b {
        let s: Vec<f64> = scores.values().column(j).to_vec();
        let q: Vec<f64> = codes.values().column(j).to_vec();
        let closed = column_objective(&q, &s, epsilon);
        let (searched, coarse_on_boundary) = if k == 1 {
            (column_objective(&[1.0], &s, epsilon), false)
        } else if k == 2 {
            (golden_section_two(&s, epsilon), false)
        } else {
            simplex_search(&s, epsilon, grid_resolution)
        };
        if coarse_on_boundary && warning.is_none() {
            warning = Some(format!(
                "grid resolution {grid_resolution} did not bracket the interior optimum of column {j}"
            ));
        }
        gap = gap.max(closed - searched);
        max_abs_gap = max_abs_gap.max((closed - searched).abs());
    }
    Ok(ClosedFormCheck { gap, max_abs_gap, warning })
}

fn golden_section_two(s: &[f64], epsilon: f64) -> f64 {
    let f = |x: f64| column_objective(&[x, 1.0 - x], s, epsilon);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-12 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        }
    }
    [f(0.5 * (lo + hi)), f1, f2, f(0.5)].into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Number of grid points `C(n + k - 1, k - 1)`, saturating.
fn grid_size(n: usize, k: usize) -> f64 {
    (1..k).fold(1.0, |acc, i| acc * (n + i) as f64 / i as f64)
}

fn simplex_search(s: &[f64], epsilon: f64, grid_resolution: usize) -> (f64, bool) {
    let k = s.len();
    let mut n = grid_resolution;
    while n > 1 && grid_size(n, k) > 2.0e5 {
        n /= 2;
    }
    let mut counts = vec![0usize; k];
    let mut best_grid = (f64::NEG_INFINITY, vec![0.0; k]);
    enumerate_compositions(n, 0, &mut counts, &mut |c| {
        let q: Vec<f64> = c.iter().map(|&v| v as f64 / n as f64).collect();
        let val = column_objective(&q, s, epsilon);
        if val > best_grid.0 {
            best_grid = (val, q);
        }
    });
    let on_boundary = best_grid.1.contains(&0.0);

    let start_step = 1.0 / n as f64;
    let barycentre = vec![1.0 / k as f64; k];
    let from_grid = pattern_search(best_grid.1, s, epsilon, start_step);
    let from_centre = pattern_search(barycentre, s, epsilon, start_step);
    (from_grid.max(from_centre), on_boundary)
}

fn enumerate_compositions(remaining: usize, idx: usize, counts: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    let k = counts.len();
    if idx == k - 1 {
        counts[idx] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[idx] = c;
        enumerate_compositions(remaining - c, idx + 1, counts, visit);
    }
}

fn pattern_search(mut q: Vec<f64>, s: &[f64], epsilon: f64, mut step: f64) -> f64 {
    let k = q.len();
    let mut best = column_objective(&q, s, epsilon);
    while step > 1e-13 {
        let mut improved = false;
        for i in 0..k {
            for j in 0..k {
                if i == j || q[j] <= 0.0 {
                    continue;
                }
                let h = step.min(q[j]);
                let mut cand = q.clone();
                cand[i] += h;
                cand[j] -= h;
                let val = column_objective(&cand, s, epsilon);
                if val > best {
                    best = val;
                    q = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_scores(k: usize, b: usize, seed: u64) -> ScoreMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ScoreMatrix::new(Array2::from_shape_fn((k, b), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn zero_scores_give_uniform_codes_after_one_iteration() {
        let s = ScoreMatrix::new(Array2::zeros((2, 4))).unwrap();
        for stabilized in [false, true] {
            let q = sinkhorn_codes(&s, &SinkhornSettings { epsilon: 0.3, iterations: 1, stabilized }).unwrap();
            for &v in q.values() {
                assert!((v - 0.125).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn converged_two_by_two_matches_grid_maximiser() {
        // Brute-force the entropic transport objective over the 2x2 equipartition polytope,
        // parameterised by q11 in [0, 0.5].
        let s = [[10.0, 0.0], [0.0, 10.0]];
        let eps = 0.05;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=200_000 {
            let a = 0.5 * i as f64 / 200_000.0;
            let q = [a, 0.5 - a, 0.5 - a, a];
            let sc = [s[0][0], s[0][1], s[1][0], s[1][1]];
            let v = column_objective(&q, &sc, eps);
            if v > best.0 {
                best = (v, a);
            }
        }
        let scores = ScoreMatrix::new(array![[10.0, 0.0], [0.0, 10.0]]).unwrap();
        let (q, _) = sinkhorn_converged(&scores, eps, true, 1e-12, 10_000).unwrap();
        assert!((q.values()[[0, 0]] - best.1).abs() < 1e-5);
        assert!((q.values()[[0, 0]] - 0.5).abs() < 1e-6);
        assert!(q.values()[[0, 1]].abs() < 1e-6);
    }

    #[test]
    fn three_iterations_leave_small_row_residual() {
        for seed in 0..20 {
            let s = random_scores(5, 8, seed);
            let q = sinkhorn_codes(&s, &SinkhornSettings::new(0.05, 3)).unwrap();
            for v in q.column_sums() {
                assert!((v - 1.0 / 8.0).abs() < 2e-2);
            }
        }
    }

    #[test]
    fn plain_and_log_domain_agree() {
        let s = random_scores(6, 9, 3);
        let a = sinkhorn_codes(&s, &SinkhornSettings { epsilon: 0.3, iterations: 7, stabilized: false }).unwrap();
        let b = sinkhorn_codes(&s, &SinkhornSettings { epsilon: 0.3, iterations: 7, stabilized: true }).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn plain_domain_overflow_is_reported() {
        let s = ScoreMatrix::new(array![[1.0, -1.0], [0.5, 1.0]]).unwrap();
        let err = sinkhorn_codes(&s, &SinkhornSettings { epsilon: 1e-3, iterations: 3, stabilized: false });
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert!(sinkhorn_codes(&s, &SinkhornSettings { epsilon: 1e-3, iterations: 3, stabilized: true }).is_ok());
    }

    #[test]
    fn single_column_train_codes_are_rejected() {
        let s = random_scores(4, 1, 0);
        assert!(matches!(sinkhorn_codes(&s, &SinkhornSettings::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        assert!(ScoreMatrix::new(array![[f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let s = random_scores(3, 3, 0);
        assert!(sinkhorn_codes(&s, &SinkhornSettings { epsilon: 0.0, iterations: 3, stabilized: true }).is_err());
        assert!(sinkhorn_codes(&s, &SinkhornSettings { epsilon: 0.1, iterations: 0, stabilized: true }).is_err());
        assert!(test_codes(&s, -1.0).is_err());
    }

    #[test]
    fn test_codes_examples() {
        let s = ScoreMatrix::new(array![[0.3], [0.3], [0.3], [0.3]]).unwrap();
        for &v in test_codes(&s, 0.7).unwrap().values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let s = random_scores(5, 3, 11);
        for &v in test_codes(&s, 1e9).unwrap().values() {
            assert!((v - 0.2).abs() < 1e-8);
        }
        let s = ScoreMatrix::new(array![[1.0], [0.0], [0.0]]).unwrap();
        let q = test_codes(&s, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expect = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in q.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(q.mode(), CodeMode::Test);
    }

    #[test]
    fn closed_form_check_examples() {
        let zero = ScoreMatrix::new(Array2::zeros((3, 2))).unwrap();
        let chk = verify_closed_form(&zero, 1.0, 200).unwrap();
        assert!(chk.max_abs_gap < 1e-12, "{chk:?}");

        let s = ScoreMatrix::new(array![[0.4], [-0.7]]).unwrap();
        let chk = verify_closed_form(&s, 0.75, 200).unwrap();
        assert!(chk.gap >= -1e-9 && chk.max_abs_gap <= 1e-4, "{chk:?}");

        for seed in 0..5 {
            let s = random_scores(4, 2, seed);
            let chk = verify_closed_form(&s, 0.5, 200).unwrap();
            assert!(chk.gap >= -1e-9 && chk.max_abs_gap <= 1e-3, "{chk:?}");
        }
    }

    #[test]
    fn closed_form_check_flags_wrong_solution() {
        // A sharper-than-optimal softmax is strictly suboptimal, so comparing
        // it against the oracle must produce a clearly negative gap.
        let s = random_scores(4, 1, 5);
        let eps = 0.5;
        let wrong = test_codes(&s, eps * 0.5).unwrap();
        let col: Vec<f64> = s.values().column(0).to_vec();
        let wrong_val = column_objective(&wrong.values().column(0).to_vec(), &col, eps);
        let (searched, _) = simplex_search(&col, eps, 200);
        assert!(wrong_val - searched < -1e-3);
    }

    #[test]
    fn oracle_limits_enforced() {
        assert!(verify_closed_form(&random_scores(7, 2, 0), 1.0, 10).is_err());
    }

    proptest! {
        #[test]
        fn codes_are_nonnegative(seed in 0u64..1000, k in 1usize..7, b in 2usize..9, eps in 0.02f64..2.0) {
            let s = random_scores(k, b, seed);
            let q = sinkhorn_codes(&s, &SinkhornSettings::new(eps, 3)).unwrap();
            prop_assert!(q.values().iter().all(|&v| v >= 0.0 && v.is_finite()));
            let q = test_codes(&s, eps).unwrap();
            prop_assert!(q.values().iter().all(|&v| v >= 0.0));
            for c in q.column_sums() {
                prop_assert!((c - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn converged_marginals(seed in 0u64..1000, k in 1usize..8, b in 2usize..12, eps in prop::sample::select(vec![0.05, 0.5, 1.0])) {
            let s = random_scores(k, b, seed);
            let (q, _) = sinkhorn_converged(&s, eps, true, 1e-10, 10_000).unwrap();
            for r in q.row_sums() {
                prop_assert!((r - 1.0 / k as f64).abs() < 1e-8);
            }
            for c in q.column_sums() {
                prop_assert!((c - 1.0 / b as f64).abs() < 1e-8);
            }
        }

        #[test]
        fn sharpening_with_smaller_epsilon(seed in 0u64..1000, k in 2usize..6) {
            let s = random_scores(k, 3, seed);
            let hi = test_codes(&s, 1.0).unwrap();
            let lo = test_codes(&s, 0.5).unwrap();
            for j in 0..3 {
                let mh = hi.values().column(j).fold(0.0f64, |a, &v| a.max(v));
                let ml = lo.values().column(j).fold(0.0f64, |a, &v| a.max(v));
                prop_assert!(ml > mh);
            }
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..1000, shift in 1usize..5) {
            let k = 5;
            let s = random_scores(k, 4, seed);
            let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
            let sp = ScoreMatrix::new(s.values().select(Axis(0), &perm)).unwrap();
            let settings = SinkhornSettings::new(0.3, 5);
            let (a, b) = (sinkhorn_codes(&s, &settings).unwrap(), sinkhorn_codes(&sp, &settings).unwrap());
            let (c, d) = (test_codes(&s, 0.7).unwrap(), test_codes(&sp, 0.7).unwrap());
            for (i, &p) in perm.iter().enumerate() {
                for j in 0..4 {
                    prop_assert!((b.values()[[i, j]] - a.values()[[p, j]]).abs() < 1e-12);
                    prop_assert!((d.values()[[i, j]] - c.values()[[p, j]]).abs() < 1e-15);
                }
            }
        }
    }
}
