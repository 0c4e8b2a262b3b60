//! Layer primitives with hand-written reverse passes.
//!
//! Activations are `batch × features` matrices; weights are stored
//! `in × out` so that `y = x · W + b`.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dw, db)
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `y` is the forward output.
pub fn relu_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub xhat: Array2<f64>,
    /// `batch × groups`
    pub inv_std: Array2<f64>,
    pub groups: usize,
}

/// Normalise each sample's channels within `num_groups` contiguous groups to
/// zero mean and unit variance. No learned affine.
pub fn group_normalize(x: &Array2<f64>, num_groups: usize) -> Result<(Array2<f64>, GroupNormCache)> {
    let (batch, channels) = x.dim();
    if num_groups == 0 || channels % num_groups != 0 {
        return Err(Error::Config(format!(
            "{channels} channels are not divisible into {num_groups} groups"
        )));
    }
    let m = channels / num_groups;
    let mut xhat = Array2::zeros((batch, channels));
    let mut inv_std = Array2::zeros((batch, num_groups));
    for n in 0..batch {
        for g in 0..num_groups {
            let seg = x.slice(ndarray::s![n, g * m..(g + 1) * m]);
            let mean = seg.sum() / m as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            inv_std[[n, g]] = is;
            for c in 0..m {
                xhat[[n, g * m + c]] = (seg[c] - mean) * is;
            }
        }
    }
    Ok((xhat.clone(), GroupNormCache { xhat, inv_std, groups: num_groups }))
}

pub fn group_norm(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
    num_groups: usize,
) -> Result<(Array2<f64>, GroupNormCache)> {
    let (xhat, cache) = group_normalize(x, num_groups)?;
    let mut y = xhat * gamma;
    y += beta;
    Ok((y, cache))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    cache: &GroupNormCache,
    gamma: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gamma;
    (group_normalize_backward(cache, &dxhat), dgamma, dbeta)
}

/// Reverse pass of [`group_normalize`] (no affine).
pub fn group_normalize_backward(cache: &GroupNormCache, dxhat: &Array2<f64>) -> Array2<f64> {
    let (batch, channels) = dxhat.dim();
    let m = channels / cache.groups;
    let mf = m as f64;
    let mut dx = Array2::zeros((batch, channels));
    for n in 0..batch {
        for g in 0..cache.groups {
            let r = g * m..(g + 1) * m;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for c in r.clone() {
                sum_d += dxhat[[n, c]];
                sum_dx += dxhat[[n, c]] * cache.xhat[[n, c]];
            }
            let is = cache.inv_std[[n, g]];
            for c in r {
                dx[[n, c]] = is / mf * (mf * dxhat[[n, c]] - sum_d - cache.xhat[[n, c]] * sum_dx);
            }
        }
    }
    dx
}

/// Row-wise unit normalisation. Returns `(z, norms)`.
pub fn l2_normalize_rows(v: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut z = v.clone();
    let mut norms = Vec::with_capacity(v.nrows());
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|x| x / n);
        norms.push(n);
    }
    (z, norms)
}

/// Projects the upstream gradient onto the tangent space of the sphere at `z`
/// and rescales by the pre-normalisation norm.
pub fn l2_normalize_backward(z: &Array2<f64>, norms: &[f64], dz: &Array2<f64>) -> Array2<f64> {
    let mut dv = dz.clone();
    for (n, mut row) in dv.rows_mut().into_iter().enumerate() {
        let zr = z.row(n);
        let radial = zr.dot(&row);
        row.zip_mut_with(&zr, |d, &zz| *d = (*d - zz * radial) / norms[n]);
    }
    dv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `sum(f(x) * w)` w.r.t. x.
    fn fd(x: &Array2<f64>, w: &Array2<f64>, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            g[[i, j]] = ((f(&xp) * w).sum() - (f(&xm) * w).sum()) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < 1e-4 || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn group_norm_gradients() {
        let x = rand_mat(3, 8, 1);
        let gamma = rand_mat(1, 8, 2);
        let beta = rand_mat(1, 8, 3);
        let w = rand_mat(3, 8, 4);
        let (_, cache) = group_norm(&x, &gamma, &beta, 2).unwrap();
        let (dx, dg, db) = group_norm_backward(&cache, &gamma, &w);
        assert_close(&dx, &fd(&x, &w, |x| group_norm(x, &gamma, &beta, 2).unwrap().0));
        assert_close(&dg, &fd(&gamma, &w, |g| group_norm(&x, g, &beta, 2).unwrap().0));
        assert_close(&db, &fd(&beta, &w, |b| group_norm(&x, &gamma, b, 2).unwrap().0));
    }

    #[test]
    fn group_norm_statistics_and_batch_independence() {
        let x = rand_mat(32, 8, 9);
        let (y, _) = group_normalize(&x, 4).unwrap();
        for row in y.rows() {
            for g in 0..4 {
                let seg = row.slice(ndarray::s![g * 2..g * 2 + 2]);
                assert!(seg.sum().abs() < 1e-12);
            }
        }
        let single = x.slice(ndarray::s![5..6, ..]).to_owned();
        let (ys, _) = group_normalize(&single, 4).unwrap();
        for (a, b) in ys.row(0).iter().zip(y.row(5)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn group_norm_constant_group_is_zero() {
        let x = Array2::from_elem((1, 4), 3.5);
        let (y, _) = group_normalize(&x, 2).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12 && v.is_finite()));
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        assert!(matches!(group_normalize(&rand_mat(2, 6, 0), 4), Err(Error::Config(_))));
    }

    #[test]
    fn linear_relu_l2_gradients() {
        let x = rand_mat(4, 5, 1);
        let w = rand_mat(5, 3, 2);
        let b = rand_mat(1, 3, 3);
        let up = rand_mat(4, 3, 4);
        let (dx, dw, db) = linear_backward(&x, &w, &up);
        assert_close(&dx, &fd(&x, &up, |x| linear(x, &w, &b)));
        assert_close(&dw, &fd(&w, &up, |w| linear(&x, w, &b)));
        assert_close(&db, &fd(&b, &up, |b| linear(&x, &w, b)));

        let y = relu(&x.mapv(|v| if v.abs() < 0.05 { 0.3 } else { v }));
        let xr = x.mapv(|v| if v.abs() < 0.05 { 0.3 } else { v });
        let up = rand_mat(4, 5, 7);
        assert_close(&relu_backward(&y, &up), &fd(&xr, &up, relu));

        let (z, norms) = l2_normalize_rows(&x);
        assert_close(&l2_normalize_backward(&z, &norms, &up), &fd(&x, &up, |v| l2_normalize_rows(v).0));
    }

    #[test]
    fn radial_gradient_vanishes_through_normalization() {
        let v = rand_mat(2, 4, 3);
        let (z, norms) = l2_normalize_rows(&v);
        let up = z.mapv(|x| 2.5 * x);
        let dv = l2_normalize_backward(&z, &norms, &up);
        assert!(dv.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn normalization_preserves_direction() {
        let v = rand_mat(3, 4, 8);
        let (z, norms) = l2_normalize_rows(&v);
        for n in 0..3 {
            for j in 0..4 {
                assert!((z[[n, j]] * norms[n] - v[[n, j]]).abs() < 1e-14);
            }
            assert!((z.row(n).dot(&z.row(n)) - 1.0).abs() < 1e-12);
        }
    }
}
