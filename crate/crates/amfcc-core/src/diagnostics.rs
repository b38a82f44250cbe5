//! Post-signal diagnostics: additive per-component decomposition of the
//! partial statistics, rank-based combination across grid cells, and
//! per-component contribution limits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::charting::{empirical_pvalue_sorted, ChartModel, Combiner};
use crate::error::{Error, Result};
use crate::mfpca::{MfpcaModel, ScoreVector};
use crate::sample::DiscreteSample;
use crate::smoothing::SmoothedObservation;

/// Full diagnostic record of one observation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContributionTable {
    pub obs_id: String,
    /// Raw contributions, one row per component, one column per cell; each
    /// column sums to the corresponding partial statistic.
    pub raw: DMatrix<f64>,
    /// One-sided upper empirical p-values against the tuning references.
    pub pvalues: DMatrix<f64>,
    /// Combined contribution statistic per component.
    pub combined: Vec<f64>,
    /// `combined[k] > limit[k]`.
    pub flags: Vec<bool>,
}

/// Per-component contributions to one partial statistic: component `k`
/// receives `sum_{l<=rank} (score_l / eigenvalue_l) * <psi_lk, Z_k>`, so the
/// components sum exactly to the partial statistic.
pub fn contributions(
    model: &MfpcaModel,
    obs: &SmoothedObservation,
    scores: &ScoreVector,
    rank: usize,
) -> Result<Vec<f64>> {
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
    let projection = model.project(obs)?;
    let p = model.n_components();
    let mut out = vec![0.0; p];
    for l in 0..rank {
        let weight = scores.scores[l] / model.eigenvalues[l];
        for (k, acc) in out.iter_mut().enumerate() {
            *acc += weight * projection.pieces[(l, k)];
        }
    }
    Ok(out)
}

/// Combine a raw contribution matrix against the chart's tuning references:
/// one-sided p-values per (component, cell), a combined statistic per
/// component, and the flag decision against the per-component limit.
pub fn combine_contributions(
    chart: &ChartModel,
    raw: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let (combined, flags, _) = combine_against(
        chart.sorted_contrib_cols(),
        &chart.diag.limits,
        chart.diag.combiner,
        raw,
    )?;
    Ok((combined, flags))
}

/// Shared rank-based combination against pre-sorted per-component,
/// per-cell references. Returns combined statistics, flags, and the p-value
/// matrix.
pub(crate) fn combine_against(
    sorted_cols: &[Vec<Vec<f64>>],
    limits: &[f64],
    combiner: Combiner,
    raw: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<bool>, DMatrix<f64>)> {
    let p = sorted_cols.len();
    if raw.nrows() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: raw.nrows(),
            context: "contribution rows vs components",
        });
    }
    let t = sorted_cols.first().map(|c| c.len()).unwrap_or(0);
    if raw.ncols() != t {
        return Err(Error::DimensionMismatch {
            expected: t,
            got: raw.ncols(),
            context: "contribution columns vs grid cells",
        });
    }
    let mut pvalues = DMatrix::zeros(p, t);
    let mut combined = Vec::with_capacity(p);
    let mut flags = Vec::with_capacity(p);
    for k in 0..p {
        for c in 0..t {
            pvalues[(k, c)] = empirical_pvalue_sorted(&sorted_cols[k][c], raw[(k, c)]);
        }
        let row: Vec<f64> = (0..t).map(|c| pvalues[(k, c)]).collect();
        let stat = combiner.combine(&row)?;
        flags.push(stat > limits[k]);
        combined.push(stat);
    }
    Ok((combined, flags, pvalues))
}

/// Full diagnostic table for one raw observation.
pub fn diagnose(chart: &ChartModel, obs: &DiscreteSample) -> Result<ContributionTable> {
    let raw = crate::charting::contribution_matrix(chart, obs)?;
    let (combined, flags, pvalues) = combine_against(
        chart.sorted_contrib_cols(),
        &chart.diag.limits,
        chart.diag.combiner,
        &raw,
    )?;
    Ok(ContributionTable {
        obs_id: obs.obs_id.clone(),
        raw,
        pvalues,
        combined,
        flags,
    })
}
