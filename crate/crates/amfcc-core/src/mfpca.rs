//! Multivariate functional principal component analysis in coefficient
//! space.
//!
//! Smoothed observations are standardized pointwise by the training mean and
//! variance functions, re-projected onto the spline basis, and decomposed by
//! an eigenanalysis of the covariance of the Gram-weighted coefficient
//! vectors. Eigenfunction coefficients, eigenvalues, scores and truncated
//! reconstructions all live in the basis representation.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, BasisSystem};
use crate::error::{Error, Result};
use crate::smoothing::SmoothedObservation;

/// Eigenvalues below `RANK_EPS * largest` are treated as zero and excluded
/// from the usable rank.
const RANK_EPS: f64 = 1e-12;

/// Tuning knobs for the dense evaluation grid used by standardization and
/// reconstruction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MfpcaOptions {
    /// Number of equally spaced evaluation points.
    pub grid_len: usize,
}

impl Default for MfpcaOptions {
    fn default() -> Self {
        Self { grid_len: 512 }
    }
}

/// Scores of one observation on the model's eigenfunctions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub obs_id: String,
    pub scores: DVector<f64>,
}

/// A fitted MFPCA model for one smoothing parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MfpcaModel {
    pub lambda: f64,
    pub basis: BasisSystem,
    /// Coefficient vectors of the per-component mean functions.
    pub mean_coeffs: Vec<DVector<f64>>,
    /// Floored pointwise variance of each component on the dense grid;
    /// linear interpolation applies between grid points.
    pub var_grid: Vec<DVector<f64>>,
    pub grid_len: usize,
    /// Strictly positive eigenvalues, descending; length is the usable rank.
    pub eigenvalues: DVector<f64>,
    /// Eigenfunction coefficients: `eigen_coeffs[l][k]` holds the basis
    /// coefficients of component `k` of eigenfunction `l`.
    pub eigen_coeffs: Vec<Vec<DVector<f64>>>,
    pub n_train: usize,
    #[serde(skip)]
    cache: OnceLock<ModelCache>,
}

/// Derived matrices rebuilt on demand (never serialized).
#[derive(Clone, Debug)]
struct ModelCache {
    grid: Vec<f64>,
    /// Basis evaluated on the dense grid (n_basis x grid_len).
    b_mat: DMatrix<f64>,
    /// Cholesky factor of `B B'` for unpenalized least-squares projection.
    bbt_chol: Cholesky<f64, Dyn>,
    /// Mean functions on the grid.
    mean_grid: Vec<DVector<f64>>,
    /// `1 / sqrt(var)` on the grid.
    inv_sqrt_var: Vec<DVector<f64>>,
    /// Per component: rows are `b_lk' * Gram`, so a product with a
    /// standardized coefficient vector yields the per-component inner
    /// products with every eigenfunction.
    piece_mats: Vec<DMatrix<f64>>,
}

/// Per-observation projection artifacts shared by scoring, charting and
/// diagnostics.
pub(crate) struct ObsProjection {
    /// `pieces[(l, k)] = <psi_lk, Z_k>`; row sums are the scores.
    pub pieces: DMatrix<f64>,
    pub scores: DVector<f64>,
}

impl MfpcaModel {
    pub fn n_components(&self) -> usize {
        self.mean_coeffs.len()
    }

    /// Number of strictly positive (non-clamped) eigenvalues.
    pub fn usable_rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// True when no principal component survived the rank clamp, e.g. for a
    /// training set of identical curves.
    pub fn is_degenerate(&self) -> bool {
        self.usable_rank() == 0
    }

    /// Floored variance of component `k` at `t`, linearly interpolated
    /// between grid points.
    pub fn variance_at(&self, k: usize, t: f64) -> f64 {
        let cache = self.cache();
        let grid = &cache.grid;
        let v = &self.var_grid[k];
        if t <= grid[0] {
            return v[0];
        }
        if t >= grid[grid.len() - 1] {
            return v[grid.len() - 1];
        }
        let step = grid[1] - grid[0];
        let idx = (((t - grid[0]) / step) as usize).min(grid.len() - 2);
        let frac = (t - grid[idx]) / step;
        v[idx] * (1.0 - frac) + v[idx + 1] * frac
    }

    fn cache(&self) -> &ModelCache {
        self.cache.get_or_init(|| {
            let grid = dense_grid(&self.basis, self.grid_len);
            let b_mat = eval_basis(&self.basis, &grid).expect("grid within domain");
            let bbt = &b_mat * b_mat.transpose();
            let bbt_chol = bbt.cholesky().expect("B B' positive definite");
            let mean_grid: Vec<DVector<f64>> = self
                .mean_coeffs
                .iter()
                .map(|c| b_mat.transpose() * c)
                .collect();
            let inv_sqrt_var: Vec<DVector<f64>> = self
                .var_grid
                .iter()
                .map(|v| v.map(|x| 1.0 / x.sqrt()))
                .collect();
            let rank = self.usable_rank();
            let p = self.n_components();
            let k = self.basis.n_basis;
            let piece_mats: Vec<DMatrix<f64>> = (0..p)
                .map(|comp| {
                    let mut e = DMatrix::zeros(rank, k);
                    for l in 0..rank {
                        e.row_mut(l).copy_from(&self.eigen_coeffs[l][comp].transpose());
                    }
                    e * &self.basis.gram
                })
                .collect();
            ModelCache {
                grid,
                b_mat,
                bbt_chol,
                mean_grid,
                inv_sqrt_var,
                piece_mats,
            }
        })
    }

    pub(crate) fn dense_grid_points(&self) -> &[f64] {
        &self.cache().grid
    }

    fn check_compatible(&self, obs: &SmoothedObservation) -> Result<()> {
        if obs.coeffs.len() != self.n_components() {
            return Err(Error::ModelMismatch {
                obs_id: obs.obs_id.clone(),
                reason: format!(
                    "{} components, model has {}",
                    obs.coeffs.len(),
                    self.n_components()
                ),
            });
        }
        if obs.coeffs.iter().any(|c| c.len() != self.basis.n_basis) {
            return Err(Error::ModelMismatch {
                obs_id: obs.obs_id.clone(),
                reason: "coefficient length differs from model basis".into(),
            });
        }
        let tol = 1e-12 * self.lambda.max(1.0);
        if (obs.lambda - self.lambda).abs() > tol {
            return Err(Error::ModelMismatch {
                obs_id: obs.obs_id.clone(),
                reason: format!(
                    "smoothed at lambda {} but model was fit at {}",
                    obs.lambda, self.lambda
                ),
            });
        }
        Ok(())
    }

    /// Standardize an observation with the model's mean and variance (never
    /// re-estimated) and project back onto the basis.
    pub(crate) fn standardized_coeffs(&self, obs: &SmoothedObservation) -> Result<Vec<DVector<f64>>> {
        self.check_compatible(obs)?;
        let cache = self.cache();
        Ok((0..self.n_components())
            .map(|k| {
                let x = cache.b_mat.transpose() * &obs.coeffs[k];
                let z = (x - &cache.mean_grid[k]).component_mul(&cache.inv_sqrt_var[k]);
                cache.bbt_chol.solve(&(&cache.b_mat * z))
            })
            .collect())
    }

    /// Score pieces and scores of one observation against this model.
    pub(crate) fn project(&self, obs: &SmoothedObservation) -> Result<ObsProjection> {
        let std_coeffs = self.standardized_coeffs(obs)?;
        let cache = self.cache();
        let rank = self.usable_rank();
        let p = self.n_components();
        let mut pieces = DMatrix::zeros(rank, p);
        for k in 0..p {
            pieces.column_mut(k).copy_from(&(&cache.piece_mats[k] * &std_coeffs[k]));
        }
        let scores = DVector::from_iterator(rank, (0..rank).map(|l| pieces.row(l).sum()));
        Ok(ObsProjection { pieces, scores })
    }
}

fn dense_grid(basis: &BasisSystem, len: usize) -> Vec<f64> {
    let (lo, hi) = (basis.domain_lo, basis.domain_hi);
    (0..len)
        .map(|i| lo + (hi - lo) * i as f64 / (len - 1) as f64)
        .collect()
}

/// Fit an MFPCA model with default options.
pub fn fit_mfpca(basis: &BasisSystem, train: &[SmoothedObservation]) -> Result<MfpcaModel> {
    fit_mfpca_with(basis, train, &MfpcaOptions::default())
}

/// Fit an MFPCA model on smoothed training observations sharing one lambda.
pub fn fit_mfpca_with(
    basis: &BasisSystem,
    train: &[SmoothedObservation],
    opts: &MfpcaOptions,
) -> Result<MfpcaModel> {
    let n = train.len();
    if n < 3 {
        return Err(Error::TooFewObservations { min: 3, got: n });
    }
    if opts.grid_len < 2 * basis.n_basis {
        return Err(Error::Config(format!(
            "dense grid of {} points is too coarse for {} basis functions",
            opts.grid_len, basis.n_basis
        )));
    }
    let p = train[0].coeffs.len();
    let k = basis.n_basis;
    let lambda = train[0].lambda;
    for obs in train {
        if obs.coeffs.len() != p {
            return Err(Error::ModelMismatch {
                obs_id: obs.obs_id.clone(),
                reason: format!("{} components, expected {}", obs.coeffs.len(), p),
            });
        }
        if obs.coeffs.iter().any(|c| c.len() != k) {
            return Err(Error::ModelMismatch {
                obs_id: obs.obs_id.clone(),
                reason: "coefficient length differs from basis".into(),
            });
        }
        if (obs.lambda - lambda).abs() > 1e-12 * lambda.max(1.0) {
            return Err(Error::ModelMismatch {
                obs_id: obs.obs_id.clone(),
                reason: "training observations smoothed at different lambdas".into(),
            });
        }
    }

    let grid = dense_grid(basis, opts.grid_len);
    let g = grid.len();
    let b_mat = eval_basis(basis, &grid)?;

    // Mean in coefficient space equals the coefficient-wise sample mean.
    let mean_coeffs: Vec<DVector<f64>> = (0..p)
        .map(|comp| {
            let mut acc = DVector::zeros(k);
            for obs in train {
                acc += &obs.coeffs[comp];
            }
            acc / n as f64
        })
        .collect();

    // Pointwise sample variance on the grid, floored away from zero before
    // the inverse square root.
    let mut x_grids: Vec<DMatrix<f64>> = Vec::with_capacity(p);
    let mut var_grid: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut mean_grid: Vec<DVector<f64>> = Vec::with_capacity(p);
    for comp in 0..p {
        let mut coef_mat = DMatrix::zeros(k, n);
        for (i, obs) in train.iter().enumerate() {
            coef_mat.column_mut(i).copy_from(&obs.coeffs[comp]);
        }
        let x = b_mat.transpose() * coef_mat; // g x n
        let mu = b_mat.transpose() * &mean_coeffs[comp];
        let mut var = DVector::zeros(g);
        for i in 0..n {
            let d = x.column(i) - &mu;
            var += d.component_mul(&d);
        }
        var /= (n - 1) as f64;
        let floor = (1e-6 * var.max()).max(1e-8);
        let var = var.map(|v| v.max(floor));
        x_grids.push(x);
        var_grid.push(var);
        mean_grid.push(mu);
    }

    // Standardize and re-project onto the basis by unpenalized least squares.
    let bbt_chol = (&b_mat * b_mat.transpose())
        .cholesky()
        .ok_or_else(|| Error::Numeric("B B' not positive definite".into()))?;
    let mut stacked = DMatrix::zeros(p * k, n);
    for comp in 0..p {
        let inv_sd = var_grid[comp].map(|v| 1.0 / v.sqrt());
        for i in 0..n {
            let z = (x_grids[comp].column(i) - &mean_grid[comp]).component_mul(&inv_sd);
            let c = bbt_chol.solve(&(&b_mat * z));
            stacked.view_mut((comp * k, i), (k, 1)).copy_from(&c);
        }
    }
    drop(x_grids);

    // Eigen square root of the Gram block and the weighted covariance.
    let gram_eig = SymmetricEigen::new(basis.gram.clone());
    let sqrt_d = gram_eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let gram_sqrt =
        &gram_eig.eigenvectors * DMatrix::from_diagonal(&sqrt_d) * gram_eig.eigenvectors.transpose();
    let gram_inv_sqrt = &gram_eig.eigenvectors
        * DMatrix::from_diagonal(&sqrt_d.map(|v| 1.0 / v))
        * gram_eig.eigenvectors.transpose();

    let mut weighted = DMatrix::zeros(p * k, n);
    for comp in 0..p {
        let block = stacked.view((comp * k, 0), (k, n));
        weighted
            .view_mut((comp * k, 0), (k, n))
            .copy_from(&(&gram_sqrt * block));
    }
    let row_means = weighted.column_mean();
    for mut col in weighted.column_iter_mut() {
        col -= &row_means;
    }
    let cov = &weighted * weighted.transpose() / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let max_eig = eig.eigenvalues[order[0]].max(0.0);
    let threshold = RANK_EPS * max_eig;

    let mut eigenvalues = Vec::new();
    let mut eigen_coeffs = Vec::new();
    for &idx in &order {
        let value = eig.eigenvalues[idx];
        if !(value > threshold) || !(value > 0.0) {
            break;
        }
        let mut u = eig.eigenvectors.column(idx).into_owned();
        if let Some(first) = u.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                u.neg_mut();
            }
        }
        let coeffs: Vec<DVector<f64>> = (0..p)
            .map(|comp| &gram_inv_sqrt * u.rows(comp * k, k))
            .collect();
        eigenvalues.push(value);
        eigen_coeffs.push(coeffs);
    }

    if eigenvalues.is_empty() {
        log::warn!(
            "MFPCA at lambda {lambda:.3e} is degenerate: no positive eigenvalue survived \
             (training curves may be identical)"
        );
    }

    Ok(MfpcaModel {
        lambda,
        basis: basis.clone(),
        mean_coeffs,
        var_grid,
        grid_len: opts.grid_len,
        eigenvalues: DVector::from_vec(eigenvalues),
        eigen_coeffs,
        n_train: n,
        cache: OnceLock::new(),
    })
}

/// Project one observation onto the model's eigenfunctions.
pub fn project_scores(model: &MfpcaModel, obs: &SmoothedObservation) -> Result<ScoreVector> {
    let projection = model.project(obs)?;
    Ok(ScoreVector {
        obs_id: obs.obs_id.clone(),
        scores: projection.scores,
    })
}

/// Smallest rank whose explained-variance share reaches `delta`.
pub fn truncate_rank(model: &MfpcaModel, delta: f64) -> Result<usize> {
    if model.is_degenerate() {
        return Err(Error::DegenerateModel);
    }
    rank_for_explained(model.eigenvalues.as_slice(), delta)
}

/// Shared helper over a raw descending spectrum.
pub(crate) fn rank_for_explained(eigenvalues: &[f64], delta: f64) -> Result<usize> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!(
            "explained-variance share must lie in (0,1), got {delta}"
        )));
    }
    if eigenvalues.is_empty() {
        return Err(Error::DegenerateModel);
    }
    let total: f64 = eigenvalues.iter().sum();
    let mut cum = 0.0;
    for (i, v) in eigenvalues.iter().enumerate() {
        cum += v;
        if cum / total >= delta {
            return Ok(i + 1);
        }
    }
    Ok(eigenvalues.len())
}

/// Truncated reconstruction: mean plus the rescaled rank-`rank` expansion of
/// the standardized deviation, returned in coefficient form.
pub fn reconstruct(
    model: &MfpcaModel,
    scores: &ScoreVector,
    rank: usize,
) -> Result<SmoothedObservation> {
    if rank > model.usable_rank() {
        return Err(Error::RankExceeded {
            requested: rank,
            usable: model.usable_rank(),
        });
    }
    if scores.scores.len() < rank {
        return Err(Error::DimensionMismatch {
            expected: rank,
            got: scores.scores.len(),
            context: "score vector shorter than requested rank",
        });
    }
    let cache = model.cache();
    let p = model.n_components();
    let coeffs: Vec<DVector<f64>> = (0..p)
        .map(|comp| {
            let mut z = DVector::zeros(cache.grid.len());
            for l in 0..rank {
                let psi = cache.b_mat.transpose() * &model.eigen_coeffs[l][comp];
                z += psi * scores.scores[l];
            }
            let sd = model.var_grid[comp].map(|v| v.sqrt());
            let x = &cache.mean_grid[comp] + z.component_mul(&sd);
            cache.bbt_chol.solve(&(&cache.b_mat * x))
        })
        .collect();
    let lambda = model.lambda;
    Ok(SmoothedObservation {
        obs_id: scores.obs_id.clone(),
        coeffs,
        lambda,
        component_lambdas: vec![lambda / p as f64; p],
        curvature_capped: vec![false; p],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{eval_expansion, make_basis};
    use crate::sample::{ComponentSamples, DiscreteSample};
    use crate::smoothing::smooth_batch;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    fn synthetic_train(
        n: usize,
        p: usize,
        n_points: usize,
        noise: f64,
        seed: u64,
    ) -> Vec<DiscreteSample> {
        let t = grid(n_points);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let comps = (0..p)
                    .map(|k| {
                        let a: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                        let b: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                        let c: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                        let values = t
                            .iter()
                            .map(|&x| {
                                a * (2.0 * std::f64::consts::PI * x).sin()
                                    + b * (3.0 * std::f64::consts::PI * x).cos()
                                    + c
                                    + (k as f64 + 1.0) * 0.1
                                    + noise * (rng.gen::<f64>() - 0.5)
                            })
                            .collect();
                        ComponentSamples {
                            times: t.clone(),
                            values,
                        }
                    })
                    .collect();
                DiscreteSample::new(format!("train-{i}"), comps).unwrap()
            })
            .collect()
    }

    /// Rank-one training set: every curve is `mu(t) + s_i * g(t)` with g a
    /// strictly positive spline, so standardization is exact and the single
    /// eigenfunction is the constant.
    fn rank_one_setup(p: usize) -> (BasisSystem, Vec<SmoothedObservation>, MfpcaModel, Vec<f64>) {
        let basis = make_basis(0.0, 1.0, 8).unwrap();
        let t = grid(60);
        let mu = |x: f64| 0.4 * (3.0 * x).sin();
        let g = |x: f64| 1.0 + 0.5 * (2.0 * x).cos();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let scales: Vec<f64> = (0..25).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let samples: Vec<DiscreteSample> = scales
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let comps = (0..p)
                    .map(|_| ComponentSamples {
                        times: t.clone(),
                        values: t.iter().map(|&x| mu(x) + s * g(x)).collect(),
                    })
                    .collect();
                DiscreteSample::new(format!("r1-{i}"), comps).unwrap()
            })
            .collect();
        let smoothed = smooth_batch(&basis, &samples, 1e-8).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        (basis, smoothed, model, scales)
    }

    #[test]
    fn identical_curves_give_degenerate_model() {
        let basis = make_basis(0.0, 1.0, 8).unwrap();
        let t = grid(40);
        let samples: Vec<DiscreteSample> = (0..5)
            .map(|i| {
                DiscreteSample::new(
                    format!("same-{i}"),
                    vec![ComponentSamples {
                        times: t.clone(),
                        values: t.iter().map(|&x| (4.0 * x).sin()).collect(),
                    }],
                )
                .unwrap()
            })
            .collect();
        let smoothed = smooth_batch(&basis, &samples, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        assert!(model.is_degenerate());
        assert_eq!(model.usable_rank(), 0);
    }

    #[test]
    fn rank_is_bounded_by_sample_size_and_coefficients() {
        let basis = make_basis(0.0, 1.0, 6).unwrap();
        let train = synthetic_train(7, 2, 30, 0.05, 3);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        assert!(model.usable_rank() <= (7 - 1).min(2 * 6));
        assert!(!model.is_degenerate());
    }

    #[test]
    fn rejects_tiny_training_sets() {
        let basis = make_basis(0.0, 1.0, 6).unwrap();
        let train = synthetic_train(2, 1, 20, 0.0, 1);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        assert!(matches!(
            fit_mfpca(&basis, &smoothed),
            Err(Error::TooFewObservations { .. })
        ));
    }

    /// Dense-grid PCA oracle: eigenvalues of the L2 covariance operator of
    /// the standardized curves, computed through the n x n matrix of
    /// trapezoid inner products, must match the coefficient-space
    /// eigenvalues.
    #[test]
    fn eigenvalues_match_dense_grid_pca_oracle() {
        let basis = make_basis(0.0, 1.0, 5).unwrap();
        let train = synthetic_train(20, 1, 50, 0.02, 7);
        let smoothed = smooth_batch(&basis, &train, 1e-5).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();

        let g = 2000;
        let t = grid(g);
        let h = 1.0 / (g - 1) as f64;
        let n = smoothed.len();
        // Standardized curves evaluated densely from the model's projected
        // coefficients.
        let curves: Vec<Vec<f64>> = smoothed
            .iter()
            .map(|obs| {
                let c = model.standardized_coeffs(obs).unwrap();
                eval_expansion(&basis, &c[0], &t).unwrap()
            })
            .collect();
        let means: Vec<f64> = (0..g)
            .map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / n as f64)
            .collect();
        let trapz = |a: &[f64], b: &[f64]| -> f64 {
            let mut acc = 0.0;
            for j in 0..g {
                let w = if j == 0 || j == g - 1 { 0.5 } else { 1.0 };
                acc += w * a[j] * b[j];
            }
            acc * h
        };
        let mut dual = DMatrix::zeros(n, n);
        let centered: Vec<Vec<f64>> = curves
            .iter()
            .map(|c| c.iter().zip(&means).map(|(v, m)| v - m).collect())
            .collect();
        for i in 0..n {
            for j in i..n {
                let v = trapz(&centered[i], &centered[j]) / (n - 1) as f64;
                dual[(i, j)] = v;
                dual[(j, i)] = v;
            }
        }
        let mut oracle: Vec<f64> = SymmetricEigen::new(dual).eigenvalues.iter().cloned().collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());

        assert!(model.usable_rank() >= 3);
        for l in 0..3 {
            let rel = (model.eigenvalues[l] - oracle[l]).abs() / oracle[l];
            assert!(
                rel < 1e-3,
                "eigenvalue {l}: {} vs oracle {}",
                model.eigenvalues[l],
                oracle[l]
            );
        }
    }

    #[test]
    fn eigenfunctions_are_orthonormal() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(15, 3, 40, 0.05, 11);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let m = model.usable_rank();
        for l in 0..m {
            for r in 0..m {
                let mut ip = 0.0;
                for comp in 0..3 {
                    ip += (model.eigen_coeffs[l][comp].transpose()
                        * &basis.gram
                        * &model.eigen_coeffs[r][comp])[(0, 0)];
                }
                let target = if l == r { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(ip, target, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn training_scores_have_zero_mean_and_eigenvalue_variance() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(25, 2, 40, 0.05, 13);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let n = smoothed.len();
        let all_scores: Vec<DVector<f64>> = smoothed
            .iter()
            .map(|o| project_scores(&model, o).unwrap().scores)
            .collect();
        for l in 0..model.usable_rank() {
            let mean: f64 = all_scores.iter().map(|s| s[l]).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 1e-8 * model.eigenvalues[l].sqrt());
            let var: f64 = all_scores.iter().map(|s| (s[l] - mean).powi(2)).sum::<f64>()
                / (n - 1) as f64;
            let rel = (var - model.eigenvalues[l]).abs() / model.eigenvalues[l];
            assert!(rel < 1e-6, "score variance {var} vs eigenvalue {}", model.eigenvalues[l]);
        }
    }

    #[test]
    fn mean_observation_scores_zero() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(12, 2, 40, 0.05, 17);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let mean_obs = SmoothedObservation {
            obs_id: "mean".into(),
            coeffs: model.mean_coeffs.clone(),
            lambda: model.lambda,
            component_lambdas: vec![model.lambda / 2.0; 2],
            curvature_capped: vec![false; 2],
        };
        let scores = project_scores(&model, &mean_obs).unwrap();
        for v in scores.scores.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn first_eigenfunction_scores_as_unit_vector() {
        for p in [1usize, 2] {
            let (_basis, _smoothed, model, _) = rank_one_setup(p);
            assert_eq!(model.usable_rank(), 1);
            // Build the observation whose standardized form is the first
            // eigenfunction, via the reconstruction path.
            let unit = ScoreVector {
                obs_id: "psi1".into(),
                scores: DVector::from_vec(vec![1.0]),
            };
            let obs = reconstruct(&model, &unit, 1).unwrap();
            let scores = project_scores(&model, &obs).unwrap();
            assert_abs_diff_eq!(scores.scores[0], 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn scores_match_dense_quadrature_oracle() {
        let basis = make_basis(0.0, 1.0, 6).unwrap();
        let train = synthetic_train(18, 2, 40, 0.05, 23);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let probe = &smoothed[4];
        let scores = project_scores(&model, probe).unwrap();

        let g = 8001;
        let t = grid(g);
        let h = 1.0 / (g - 1) as f64;
        let z_coeffs = model.standardized_coeffs(probe).unwrap();
        for l in 0..model.usable_rank() {
            let mut ip = 0.0;
            for comp in 0..2 {
                let z = eval_expansion(&basis, &z_coeffs[comp], &t).unwrap();
                let psi = eval_expansion(&basis, &model.eigen_coeffs[l][comp], &t).unwrap();
                for j in 0..g {
                    let w = if j == 0 || j == g - 1 { 0.5 } else { 1.0 };
                    ip += w * z[j] * psi[j];
                }
            }
            ip *= h;
            assert!(
                (scores.scores[l] - ip).abs() <= 1e-6 * ip.abs().max(1.0),
                "score {l}: {} vs quadrature {}",
                scores.scores[l],
                ip
            );
        }
    }

    #[test]
    fn truncation_rank_examples() {
        let eigenvalues = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(rank_for_explained(&eigenvalues, 0.4).unwrap(), 1);
        assert_eq!(rank_for_explained(&eigenvalues, 0.71).unwrap(), 3);
        assert_eq!(rank_for_explained(&eigenvalues, 0.9999999).unwrap(), 4);
        assert!(rank_for_explained(&eigenvalues, 0.0).is_err());
        assert!(rank_for_explained(&[], 0.5).is_err());
    }

    #[test]
    fn truncation_is_monotone_in_delta() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(20, 2, 40, 0.1, 29);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let mut last = 0;
        for delta in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let rank = truncate_rank(&model, delta).unwrap();
            assert!(rank >= last);
            last = rank;
        }
        assert_eq!(
            truncate_rank(&model, 0.999_999_999).unwrap(),
            model.usable_rank()
        );
    }

    #[test]
    fn reconstruct_rank_zero_is_the_mean() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(10, 2, 40, 0.05, 31);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let scores = project_scores(&model, &smoothed[0]).unwrap();
        let rec = reconstruct(&model, &scores, 0).unwrap();
        for comp in 0..2 {
            for j in 0..basis.n_basis {
                assert_abs_diff_eq!(rec.coeffs[comp][j], model.mean_coeffs[comp][j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn full_rank_reconstruction_recovers_rank_one_observations() {
        let (basis, smoothed, model, _) = rank_one_setup(1);
        let t = grid(200);
        for obs in smoothed.iter().take(5) {
            let scores = project_scores(&model, obs).unwrap();
            let rec = reconstruct(&model, &scores, model.usable_rank()).unwrap();
            let orig = eval_expansion(&basis, &obs.coeffs[0], &t).unwrap();
            let back = eval_expansion(&basis, &rec.coeffs[0], &t).unwrap();
            let scale = orig.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
            let rmse = (orig
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / t.len() as f64)
                .sqrt();
            assert!(rmse <= 1e-6 * scale, "rmse {rmse} vs scale {scale}");
        }
    }

    #[test]
    fn full_rank_score_expansion_recovers_standardized_coefficients() {
        // Completeness of the rank decomposition: on general data the score
        // expansion must reproduce the standardized coefficient vector
        // exactly (the eigenvectors span the centered training cloud).
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(15, 2, 40, 0.05, 37);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        for obs in smoothed.iter().take(4) {
            let scores = project_scores(&model, obs).unwrap();
            let z_coeffs = model.standardized_coeffs(obs).unwrap();
            let scale = z_coeffs
                .iter()
                .flat_map(|c| c.iter())
                .fold(0.0_f64, |a, &v| a.max(v.abs()));
            for comp in 0..2 {
                let mut rebuilt = DVector::zeros(basis.n_basis);
                for l in 0..model.usable_rank() {
                    rebuilt += &model.eigen_coeffs[l][comp] * scores.scores[l];
                }
                for j in 0..basis.n_basis {
                    assert_abs_diff_eq!(rebuilt[j], z_coeffs[comp][j], epsilon = 1e-10 * scale);
                }
            }
        }
    }

    #[test]
    fn doubling_first_score_doubles_first_mode_deviation() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(15, 1, 40, 0.05, 41);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let one = ScoreVector {
            obs_id: "a".into(),
            scores: DVector::from_vec(vec![0.7]),
        };
        let two = ScoreVector {
            obs_id: "b".into(),
            scores: DVector::from_vec(vec![1.4]),
        };
        let t = grid(100);
        let r1 = reconstruct(&model, &one, 1).unwrap();
        let r2 = reconstruct(&model, &two, 1).unwrap();
        let mean = reconstruct(
            &model,
            &ScoreVector {
                obs_id: "m".into(),
                scores: DVector::from_vec(vec![0.0]),
            },
            1,
        )
        .unwrap();
        let e1 = eval_expansion(&basis, &r1.coeffs[0], &t).unwrap();
        let e2 = eval_expansion(&basis, &r2.coeffs[0], &t).unwrap();
        let em = eval_expansion(&basis, &mean.coeffs[0], &t).unwrap();
        for j in 0..t.len() {
            assert_abs_diff_eq!(e2[j] - em[j], 2.0 * (e1[j] - em[j]), epsilon = 1e-9);
        }
    }

    #[test]
    fn lambda_mismatch_is_rejected() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(10, 1, 30, 0.05, 43);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let other = smooth_batch(&basis, &synthetic_train(1, 1, 30, 0.05, 44), 1e-2).unwrap();
        assert!(matches!(
            project_scores(&model, &other[0]),
            Err(Error::ModelMismatch { .. })
        ));
    }

    #[test]
    fn rank_overflow_is_rejected() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(10, 1, 30, 0.05, 47);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let scores = project_scores(&model, &smoothed[0]).unwrap();
        assert!(matches!(
            reconstruct(&model, &scores, model.usable_rank() + 1),
            Err(Error::RankExceeded { .. })
        ));
    }

    #[test]
    fn variance_interpolation_matches_grid_nodes() {
        let basis = make_basis(0.0, 1.0, 7).unwrap();
        let train = synthetic_train(12, 1, 40, 0.1, 53);
        let smoothed = smooth_batch(&basis, &train, 1e-4).unwrap();
        let model = fit_mfpca(&basis, &smoothed).unwrap();
        let pts = model.dense_grid_points().to_vec();
        for (j, &t) in pts.iter().enumerate().step_by(57) {
            assert_abs_diff_eq!(model.variance_at(0, t), model.var_grid[0][j], epsilon = 1e-12);
        }
        // Midpoint interpolates linearly.
        let mid = 0.5 * (pts[10] + pts[11]);
        let expect = 0.5 * (model.var_grid[0][10] + model.var_grid[0][11]);
        assert_abs_diff_eq!(model.variance_at(0, mid), expect, epsilon = 1e-12);
    }
}
