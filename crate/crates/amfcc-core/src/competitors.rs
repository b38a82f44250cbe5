//! Competitor charts for the benchmark: a fixed-truncation functional chart
//! (Hotelling T2 plus squared prediction error), a classical chart on the
//! vector of per-component profile means, and a classical chart on the raw
//! stacked discrete values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::basis::{eval_expansion, BasisSystem};
use crate::charting::{partial_t2, type1_quantile};
use crate::error::{Error, Result};
use crate::mfpca::{fit_mfpca, truncate_rank, MfpcaModel, ScoreVector};
use crate::sample::DiscreteSample;
use crate::smoothing::{smooth_batch, SampleContext, SmoothedObservation};

/// Default fixed smoothing parameter for the functional competitor: the
/// geometric midpoint of the adaptive chart's lambda range.
pub const MFCC_DEFAULT_LAMBDA: f64 = 1e-2;

/// Eigenvalues of a singular covariance below this fraction of the largest
/// are dropped in the pseudo-inverse.
const PINV_EPS: f64 = 1e-10;

/// Functional competitor at a fixed explained-variance share.
#[derive(Clone, Debug)]
pub struct MfccModel {
    pub model: MfpcaModel,
    pub delta: f64,
    pub rank: usize,
    pub t2_limit: f64,
    pub spe_limit: f64,
    /// Per-component contribution limits for the two charts.
    pub contrib_t2_limits: Vec<f64>,
    pub contrib_spe_limits: Vec<f64>,
    pub alpha: f64,
}

/// Classical Hotelling chart on a finite feature vector.
#[derive(Clone, Debug)]
pub struct ClassicModel {
    pub mean: DVector<f64>,
    pub inv_cov: DMatrix<f64>,
    pub limit: f64,
    pub alpha: f64,
    /// Per-component measurement grids every scored observation must match.
    reference_grids: Vec<Vec<f64>>,
    /// Stack raw values instead of averaging them per component.
    stacked: bool,
}

/// One fitted competitor.
#[derive(Clone, Debug)]
pub enum CompetitorModel {
    Mfcc(MfccModel),
    Mcc(ClassicModel),
    Dcc(ClassicModel),
}

/// Scoring outcome of a competitor chart.
#[derive(Clone, Debug)]
pub struct CompetitorScore {
    pub obs_id: String,
    pub t2: f64,
    /// Squared prediction error; functional competitor only.
    pub spe: Option<f64>,
    pub signal: bool,
    /// Per-component diagnostic flags; functional competitor only.
    pub flagged_components: Option<Vec<bool>>,
}

/// Squared prediction error of one observation against a rank-`rank`
/// expansion, by trapezoid quadrature of the per-component residuals on the
/// model's dense grid. Also returns the per-component pieces.
fn spe_parts(
    model: &MfpcaModel,
    std_coeffs: &[DVector<f64>],
    scores: &DVector<f64>,
    rank: usize,
) -> (f64, Vec<f64>) {
    let grid = model.dense_grid_points().to_vec();
    let h = grid[1] - grid[0];
    let p = model.n_components();
    let mut parts = Vec::with_capacity(p);
    let mut total = 0.0;
    for k in 0..p {
        let mut resid = std_coeffs[k].clone();
        for l in 0..rank {
            resid -= &model.eigen_coeffs[l][k] * scores[l];
        }
        let values = eval_expansion(&model.basis, &resid, &grid).expect("grid within domain");
        let mut acc = 0.0;
        for (j, v) in values.iter().enumerate() {
            let w = if j == 0 || j == grid.len() - 1 { 0.5 } else { 1.0 };
            acc += w * v * v;
        }
        let part = acc * h;
        total += part;
        parts.push(part);
    }
    (total, parts)
}

/// T2 contributions of one observation at the competitor's single cell.
fn t2_parts(model: &MfpcaModel, pieces: &DMatrix<f64>, scores: &DVector<f64>, rank: usize) -> Vec<f64> {
    let p = model.n_components();
    let mut parts = vec![0.0; p];
    for l in 0..rank {
        let weight = scores[l] / model.eigenvalues[l];
        for (k, part) in parts.iter_mut().enumerate() {
            *part += weight * pieces[(l, k)];
        }
    }
    parts
}

struct MfccObsStats {
    t2: f64,
    spe: f64,
    t2_parts: Vec<f64>,
    spe_parts: Vec<f64>,
}

fn mfcc_stats(model: &MfpcaModel, rank: usize, obs: &SmoothedObservation) -> Result<MfccObsStats> {
    let projection = model.project(obs)?;
    let std_coeffs = model.standardized_coeffs(obs)?;
    let scores = ScoreVector {
        obs_id: obs.obs_id.clone(),
        scores: projection.scores.clone(),
    };
    let t2 = partial_t2(model, &scores, rank)?;
    let (spe, spe_parts) = spe_parts(model, &std_coeffs, &projection.scores, rank);
    let t2_parts = t2_parts(model, &projection.pieces, &projection.scores, rank);
    Ok(MfccObsStats {
        t2,
        spe,
        t2_parts,
        spe_parts,
    })
}

/// Fit the functional competitor with the default fixed lambda.
pub fn fit_mfcc(
    basis: &BasisSystem,
    train: &[DiscreteSample],
    tune: &[DiscreteSample],
    delta: f64,
    alpha: f64,
) -> Result<CompetitorModel> {
    fit_mfcc_with(basis, train, tune, delta, alpha, MFCC_DEFAULT_LAMBDA)
}

/// Fit the functional competitor at an explicit fixed lambda. Both charts
/// and the per-component contribution limits take a Sidak share of the
/// overall type I error so their joint in-control rate stays at `alpha`
/// under independence.
pub fn fit_mfcc_with(
    basis: &BasisSystem,
    train: &[DiscreteSample],
    tune: &[DiscreteSample],
    delta: f64,
    alpha: f64,
    lambda: f64,
) -> Result<CompetitorModel> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!(
            "explained-variance share must lie in (0,1), got {delta}"
        )));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let smoothed_train = smooth_batch(basis, train, lambda)?;
    let model = fit_mfpca(basis, &smoothed_train)?;
    if model.is_degenerate() {
        return Err(Error::DegenerateModel);
    }
    let rank = truncate_rank(&model, delta)?;
    let smoothed_tune = smooth_batch(basis, tune, lambda)?;
    let stats: Vec<MfccObsStats> = smoothed_tune
        .par_iter()
        .map(|obs| mfcc_stats(&model, rank, obs))
        .collect::<Result<_>>()?;

    let chart_level = (1.0 - alpha).sqrt();
    let t2_vals: Vec<f64> = stats.iter().map(|s| s.t2).collect();
    let spe_vals: Vec<f64> = stats.iter().map(|s| s.spe).collect();
    let t2_limit = type1_quantile(&t2_vals, chart_level);
    let spe_limit = type1_quantile(&spe_vals, chart_level);

    let p = model.n_components();
    let mut contrib_t2_limits = Vec::with_capacity(p);
    let mut contrib_spe_limits = Vec::with_capacity(p);
    for k in 0..p {
        let t2_col: Vec<f64> = stats.iter().map(|s| s.t2_parts[k]).collect();
        let spe_col: Vec<f64> = stats.iter().map(|s| s.spe_parts[k]).collect();
        contrib_t2_limits.push(type1_quantile(&t2_col, chart_level));
        contrib_spe_limits.push(type1_quantile(&spe_col, chart_level));
    }

    Ok(CompetitorModel::Mfcc(MfccModel {
        model,
        delta,
        rank,
        t2_limit,
        spe_limit,
        contrib_t2_limits,
        contrib_spe_limits,
        alpha,
    }))
}

fn feature_vector(model: &ClassicModel, obs: &DiscreteSample) -> Result<DVector<f64>> {
    if obs.components.len() != model.reference_grids.len() {
        return Err(Error::GridMismatch(format!(
            "`{}` has {} components, model expects {}",
            obs.obs_id,
            obs.components.len(),
            model.reference_grids.len()
        )));
    }
    for (k, comp) in obs.components.iter().enumerate() {
        if comp.times != model.reference_grids[k] {
            return Err(Error::GridMismatch(format!(
                "`{}` component {} is not on the training grid",
                obs.obs_id,
                k + 1
            )));
        }
    }
    if model.stacked {
        let dim: usize = obs.components.iter().map(|c| c.values.len()).sum();
        let mut x = DVector::zeros(dim);
        let mut offset = 0;
        for comp in &obs.components {
            for (j, &v) in comp.values.iter().enumerate() {
                x[offset + j] = v;
            }
            offset += comp.values.len();
        }
        Ok(x)
    } else {
        Ok(DVector::from_iterator(
            obs.components.len(),
            obs.components
                .iter()
                .map(|c| c.values.iter().sum::<f64>() / c.values.len() as f64),
        ))
    }
}

/// Eigenvalue-thresholded pseudo-inverse of a symmetric matrix.
fn pseudo_inverse(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    let threshold = PINV_EPS * max;
    let dropped = eig.eigenvalues.iter().filter(|&&v| v <= threshold).count();
    if dropped > 0 {
        log::warn!("covariance is singular: pseudo-inverse dropped {dropped} eigenvalue(s)");
    }
    let inv_d = eig
        .eigenvalues
        .map(|v| if v > threshold { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_d) * eig.eigenvectors.transpose()
}

fn hotelling(x: &DVector<f64>, mean: &DVector<f64>, inv_cov: &DMatrix<f64>) -> f64 {
    let d = x - mean;
    (d.transpose() * inv_cov * &d)[(0, 0)]
}

fn fit_classic(
    train: &[DiscreteSample],
    tune: &[DiscreteSample],
    alpha: f64,
    stacked: bool,
) -> Result<ClassicModel> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let first = train.first().ok_or(Error::TooFewObservations { min: 2, got: 0 })?;
    let reference_grids: Vec<Vec<f64>> = first.components.iter().map(|c| c.times.clone()).collect();
    let mut probe = ClassicModel {
        mean: DVector::zeros(0),
        inv_cov: DMatrix::zeros(0, 0),
        limit: 0.0,
        alpha,
        reference_grids,
        stacked,
    };
    let features: Vec<DVector<f64>> = train
        .iter()
        .map(|s| feature_vector(&probe, s))
        .collect::<Result<_>>()?;
    let n = features.len();
    if n < 2 {
        return Err(Error::TooFewObservations { min: 2, got: n });
    }
    let dim = features[0].len();
    let mut mean = DVector::zeros(dim);
    for f in &features {
        mean += f;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in &features {
        let d = f - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    probe.mean = mean;
    probe.inv_cov = pseudo_inverse(&cov);

    let tune_t2: Vec<f64> = tune
        .iter()
        .map(|s| Ok(hotelling(&feature_vector(&probe, s)?, &probe.mean, &probe.inv_cov)))
        .collect::<Result<_>>()?;
    if tune_t2.is_empty() {
        return Err(Error::TooFewObservations { min: 1, got: 0 });
    }
    probe.limit = type1_quantile(&tune_t2, 1.0 - alpha);
    Ok(probe)
}

/// Classical chart on the vector of per-component profile means.
pub fn fit_mcc(
    train: &[DiscreteSample],
    tune: &[DiscreteSample],
    alpha: f64,
) -> Result<CompetitorModel> {
    Ok(CompetitorModel::Mcc(fit_classic(train, tune, alpha, false)?))
}

/// Classical chart directly on the stacked discrete values.
pub fn fit_dcc(
    train: &[DiscreteSample],
    tune: &[DiscreteSample],
    alpha: f64,
) -> Result<CompetitorModel> {
    Ok(CompetitorModel::Dcc(fit_classic(train, tune, alpha, true)?))
}

/// Score one observation with any fitted competitor.
pub fn score_competitor(model: &CompetitorModel, obs: &DiscreteSample) -> Result<CompetitorScore> {
    match model {
        CompetitorModel::Mfcc(mfcc) => {
            let ctx = SampleContext::new(&mfcc.model.basis, obs)?;
            let smoothed = ctx.smooth_adaptive(&mfcc.model.basis, mfcc.model.lambda)?;
            let stats = mfcc_stats(&mfcc.model, mfcc.rank, &smoothed)?;
            let flags: Vec<bool> = (0..mfcc.model.n_components())
                .map(|k| {
                    stats.t2_parts[k] > mfcc.contrib_t2_limits[k]
                        || stats.spe_parts[k] > mfcc.contrib_spe_limits[k]
                })
                .collect();
            Ok(CompetitorScore {
                obs_id: obs.obs_id.clone(),
                t2: stats.t2,
                spe: Some(stats.spe),
                signal: stats.t2 > mfcc.t2_limit || stats.spe > mfcc.spe_limit,
                flagged_components: Some(flags),
            })
        }
        CompetitorModel::Mcc(classic) | CompetitorModel::Dcc(classic) => {
            let x = feature_vector(classic, obs)?;
            let t2 = hotelling(&x, &classic.mean, &classic.inv_cov);
            Ok(CompetitorScore {
                obs_id: obs.obs_id.clone(),
                t2,
                spe: None,
                signal: t2 > classic.limit,
                flagged_components: None,
            })
        }
    }
}

/// Score a batch in input order.
pub fn score_batch(model: &CompetitorModel, observations: &[DiscreteSample]) -> Result<Vec<CompetitorScore>> {
    observations
        .par_iter()
        .map(|obs| score_competitor(model, obs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::make_basis;
    use crate::mfpca::{project_scores, reconstruct};
    use crate::sample::ComponentSamples;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid_points(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    fn noisy_samples(n: usize, p: usize, n_points: usize, seed: u64, prefix: &str) -> Vec<DiscreteSample> {
        let t = grid_points(n_points);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let comps = (0..p)
                    .map(|_| {
                        let a: f64 = rng.gen::<f64>() - 0.5;
                        let b: f64 = rng.gen::<f64>() - 0.5;
                        ComponentSamples {
                            times: t.clone(),
                            values: t
                                .iter()
                                .map(|&x| {
                                    a * (2.0 * std::f64::consts::PI * x).sin()
                                        + b * (3.0 * std::f64::consts::PI * x).cos()
                                        + 0.05 * (rng.gen::<f64>() - 0.5)
                                })
                                .collect(),
                        }
                    })
                    .collect();
                DiscreteSample::new(format!("{prefix}-{i}"), comps).unwrap()
            })
            .collect()
    }

    fn constant_samples(means: &[DVector<f64>], n_points: usize, prefix: &str) -> Vec<DiscreteSample> {
        let t = grid_points(n_points);
        means
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let comps = m
                    .iter()
                    .map(|&v| ComponentSamples {
                        times: t.clone(),
                        values: vec![v; n_points],
                    })
                    .collect();
                DiscreteSample::new(format!("{prefix}-{i}"), comps).unwrap()
            })
            .collect()
    }

    #[test]
    fn mcc_scores_zero_at_the_training_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let means: Vec<DVector<f64>> = (0..40)
            .map(|_| DVector::from_iterator(3, (0..3).map(|_| rng.gen::<f64>())))
            .collect();
        let train = constant_samples(&means, 15, "t");
        let tune = constant_samples(&means[..25], 15, "u");
        let model = fit_mcc(&train, &tune, 0.1).unwrap();
        let CompetitorModel::Mcc(classic) = &model else { panic!() };
        let grand_mean = classic.mean.clone();
        let probe = constant_samples(&[grand_mean], 15, "probe");
        let score = score_competitor(&model, &probe[0]).unwrap();
        assert_abs_diff_eq!(score.t2, 0.0, epsilon = 1e-18);
        assert!(!score.signal);
    }

    #[test]
    fn mcc_unit_mahalanobis_step_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let means: Vec<DVector<f64>> = (0..60)
            .map(|_| DVector::from_iterator(2, (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0)))
            .collect();
        let train = constant_samples(&means, 10, "t");
        let tune = constant_samples(&means[..30], 10, "u");
        let model = fit_mcc(&train, &tune, 0.1).unwrap();
        let CompetitorModel::Mcc(classic) = &model else { panic!() };
        // One covariance-square-root step in the first coordinate is exactly
        // one Mahalanobis unit.
        let cov = pseudo_inverse(&classic.inv_cov.clone());
        let eig = SymmetricEigen::new(cov);
        let sqrt_cov = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        let x = &classic.mean + sqrt_cov.column(0);
        let probe = constant_samples(&[x], 10, "probe");
        let score = score_competitor(&model, &probe[0]).unwrap();
        assert_abs_diff_eq!(score.t2, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn dcc_matches_generic_inverse_route() {
        let train = noisy_samples(60, 2, 10, 75, "t");
        let tune = noisy_samples(30, 2, 10, 76, "u");
        let model = fit_dcc(&train, &tune, 0.1).unwrap();
        let CompetitorModel::Dcc(classic) = &model else { panic!() };

        // Independent route: mean and covariance rebuilt directly, inverted
        // by full-pivot LU.
        let stack = |s: &DiscreteSample| -> DVector<f64> {
            DVector::from_iterator(
                20,
                s.components.iter().flat_map(|c| c.values.iter().cloned()),
            )
        };
        let xs: Vec<DVector<f64>> = train.iter().map(stack).collect();
        let mut mean = DVector::zeros(20);
        for x in &xs {
            mean += x;
        }
        mean /= xs.len() as f64;
        let mut cov = DMatrix::zeros(20, 20);
        for x in &xs {
            let d = x - &mean;
            cov += &d * d.transpose();
        }
        cov /= (xs.len() - 1) as f64;
        let inv = cov.full_piv_lu().try_inverse().unwrap();

        let probe = &noisy_samples(5, 2, 10, 77, "x");
        for obs in probe {
            let score = score_competitor(&model, obs).unwrap();
            let x = stack(obs);
            let d = &x - &mean;
            let oracle = (d.transpose() * &inv * &d)[(0, 0)];
            assert!(
                (score.t2 - oracle).abs() <= 1e-8 * oracle.abs().max(1.0),
                "{} vs {}",
                score.t2,
                oracle
            );
        }
        let _ = classic;
    }

    #[test]
    fn mfcc_spe_vanishes_inside_the_retained_span() {
        // Rank-one law `mu + s_i * g` with g a strictly positive spline: the
        // variance function is a squared spline, standardization is exact,
        // and an observation built from the single eigenfunction leaves no
        // residual.
        let basis = make_basis(0.0, 1.0, 8).unwrap();
        let t = grid_points(50);
        let mu = |x: f64| 0.3 * (3.0 * x).sin();
        let g = |x: f64| 1.0 + 0.4 * (2.0 * x).cos();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let make = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<DiscreteSample> {
            (0..n)
                .map(|i| {
                    let s = rng.gen::<f64>() * 2.0 - 1.0;
                    DiscreteSample::new(
                        format!("{prefix}-{i}"),
                        vec![ComponentSamples {
                            times: t.clone(),
                            values: t.iter().map(|&x| mu(x) + s * g(x)).collect(),
                        }],
                    )
                    .unwrap()
                })
                .collect()
        };
        let train = make(25, "t", &mut rng);
        let tune = make(25, "u", &mut rng);
        let model = fit_mfcc_with(&basis, &train, &tune, 0.7, 0.05, 1e-8).unwrap();
        let CompetitorModel::Mfcc(mfcc) = &model else { panic!() };
        assert_eq!(mfcc.rank, 1);
        let obs = reconstruct(
            &mfcc.model,
            &ScoreVector {
                obs_id: "span".into(),
                scores: DVector::from_vec(vec![0.8]),
            },
            1,
        )
        .unwrap();
        let stats = mfcc_stats(&mfcc.model, mfcc.rank, &obs).unwrap();
        assert!(stats.spe < 1e-16, "SPE {} not negligible", stats.spe);
    }

    #[test]
    fn mfcc_full_rank_spe_is_reconstruction_noise() {
        let basis = make_basis(0.0, 1.0, 6).unwrap();
        let train = noisy_samples(30, 2, 30, 81, "t");
        let tune = noisy_samples(25, 2, 30, 82, "u");
        let model = fit_mfcc(&basis, &train, &tune, 0.999_999, 0.05).unwrap();
        let CompetitorModel::Mfcc(mfcc) = &model else { panic!() };
        assert_eq!(mfcc.rank, mfcc.model.usable_rank());
        let smoothed = smooth_batch(&basis, &train[..5], MFCC_DEFAULT_LAMBDA).unwrap();
        for obs in &smoothed {
            let stats = mfcc_stats(&mfcc.model, mfcc.rank, obs).unwrap();
            assert!(stats.spe < 1e-12, "training SPE {}", stats.spe);
        }
    }

    #[test]
    fn mfcc_contributions_sum_to_t2() {
        let basis = make_basis(0.0, 1.0, 6).unwrap();
        let train = noisy_samples(30, 3, 30, 83, "t");
        let tune = noisy_samples(25, 3, 30, 84, "u");
        let model = fit_mfcc(&basis, &train, &tune, 0.8, 0.05).unwrap();
        let CompetitorModel::Mfcc(mfcc) = &model else { panic!() };
        let probes = smooth_batch(&basis, &noisy_samples(5, 3, 30, 85, "x"), MFCC_DEFAULT_LAMBDA).unwrap();
        for obs in &probes {
            let stats = mfcc_stats(&mfcc.model, mfcc.rank, obs).unwrap();
            let sum: f64 = stats.t2_parts.iter().sum();
            assert_abs_diff_eq!(sum, stats.t2, epsilon = 1e-8 * stats.t2.abs().max(1e-12));
            let spe_sum: f64 = stats.spe_parts.iter().sum();
            assert_abs_diff_eq!(spe_sum, stats.spe, epsilon = 1e-10 * stats.spe.abs().max(1e-12));
        }
    }

    #[test]
    fn mfcc_scoring_matches_projection_path() {
        let basis = make_basis(0.0, 1.0, 6).unwrap();
        let train = noisy_samples(30, 2, 30, 86, "t");
        let tune = noisy_samples(25, 2, 30, 87, "u");
        let model = fit_mfcc(&basis, &train, &tune, 0.8, 0.05).unwrap();
        let CompetitorModel::Mfcc(mfcc) = &model else { panic!() };
        let fresh = noisy_samples(3, 2, 30, 88, "x");
        for obs in &fresh {
            let score = score_competitor(&model, obs).unwrap();
            let smoothed =
                smooth_batch(&basis, std::slice::from_ref(obs), MFCC_DEFAULT_LAMBDA).unwrap();
            let scores = project_scores(&mfcc.model, &smoothed[0]).unwrap();
            let expect = partial_t2(&mfcc.model, &scores, mfcc.rank).unwrap();
            assert_abs_diff_eq!(score.t2, expect, epsilon = 1e-10);
            assert_eq!(
                score.signal,
                score.t2 > mfcc.t2_limit || score.spe.unwrap() > mfcc.spe_limit
            );
        }
    }

    #[test]
    fn classic_charts_reject_grid_mismatch() {
        let train = noisy_samples(20, 2, 12, 89, "t");
        let tune = noisy_samples(20, 2, 12, 90, "u");
        for model in [
            fit_mcc(&train, &tune, 0.1).unwrap(),
            fit_dcc(&train, &tune, 0.1).unwrap(),
        ] {
            let other_grid = noisy_samples(1, 2, 13, 91, "x");
            assert!(matches!(
                score_competitor(&model, &other_grid[0]),
                Err(Error::GridMismatch(_))
            ));
            let other_p = noisy_samples(1, 3, 12, 92, "y");
            assert!(matches!(
                score_competitor(&model, &other_p[0]),
                Err(Error::GridMismatch(_))
            ));
        }
    }

    #[test]
    fn sidak_split_uses_wider_per_chart_level() {
        let basis = make_basis(0.0, 1.0, 6).unwrap();
        let train = noisy_samples(30, 2, 30, 93, "t");
        let tune = noisy_samples(40, 2, 30, 94, "u");
        let alpha = 0.1;
        let model = fit_mfcc(&basis, &train, &tune, 0.8, alpha).unwrap();
        let CompetitorModel::Mfcc(mfcc) = &model else { panic!() };
        // Each chart's limit sits at the sqrt(1 - alpha) tuning quantile,
        // which is above the plain (1 - alpha) quantile.
        let smoothed = smooth_batch(&basis, &tune, MFCC_DEFAULT_LAMBDA).unwrap();
        let t2s: Vec<f64> = smoothed
            .iter()
            .map(|o| {
                let s = project_scores(&mfcc.model, o).unwrap();
                partial_t2(&mfcc.model, &s, mfcc.rank).unwrap()
            })
            .collect();
        assert_eq!(mfcc.t2_limit, type1_quantile(&t2s, (1.0 - alpha).sqrt()));
        assert!(mfcc.t2_limit >= type1_quantile(&t2s, 1.0 - alpha));
    }
}
