//! The adaptive control chart: partial Hotelling-type statistics over a
//! (smoothing, truncation) grid, empirical p-values against a tuning set,
//! Fisher/Tippett combination, control limits, and Phase II scoring.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::mfpca::{fit_mfpca_with, MfpcaModel, MfpcaOptions, ObsProjection, ScoreVector};
use crate::sample::DiscreteSample;
use crate::smoothing::SampleContext;

/// How partial-test p-values are merged into one monitoring statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combiner {
    /// `-2 * mean(log p)`: sensitive when many partial tests carry evidence.
    Fisher,
    /// `-2 * log(min p)`: sensitive when few partial tests carry evidence.
    Tippett,
}

impl Combiner {
    pub fn combine(self, pvalues: &[f64]) -> Result<f64> {
        match self {
            Combiner::Fisher => combine_fisher(pvalues),
            Combiner::Tippett => combine_tippett(pvalues),
        }
    }
}

impl std::fmt::Display for Combiner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Combiner::Fisher => write!(f, "fisher"),
            Combiner::Tippett => write!(f, "tippett"),
        }
    }
}

/// One partial test: an MFPCA model index and a retained rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda_idx: usize,
    pub rank: usize,
}

/// The (lambda, explained-variance) grid spanning the partial tests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParameterGrid {
    /// Strictly increasing smoothing parameters.
    pub lambdas: Vec<f64>,
    /// Strictly increasing explained-variance shares in (0, 1).
    pub deltas: Vec<f64>,
    /// Resolved (lambda, rank) cells; filled by `fit_chart` after per-lambda
    /// truncation and deduplication.
    pub cells: Vec<GridCell>,
}

impl ParameterGrid {
    pub fn new(lambdas: Vec<f64>, deltas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() || deltas.is_empty() {
            return Err(Error::InvalidGrid("empty lambda or delta list".into()));
        }
        for w in lambdas.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidGrid(format!(
                    "lambdas must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidGrid("lambdas must be positive and finite".into()));
        }
        for w in deltas.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidGrid(format!(
                    "deltas must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if deltas.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            return Err(Error::InvalidGrid("deltas must lie in (0, 1)".into()));
        }
        Ok(Self {
            lambdas,
            deltas,
            cells: Vec::new(),
        })
    }

    /// Ten lambdas log-equally spaced over [1e-6, 1e2] and eight
    /// explained-variance shares from 0.40 to 0.99.
    pub fn with_defaults() -> Self {
        let lambdas = (0..10)
            .map(|i| 10f64.powf(-6.0 + 8.0 * i as f64 / 9.0))
            .collect();
        let deltas = vec![0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95, 0.99];
        Self {
            lambdas,
            deltas,
            cells: Vec::new(),
        }
    }

    /// Number of partial tests.
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }
}

impl Default for ParameterGrid {
    fn default() -> Self {
        Self::with_defaults()
    }
}

/// Tuning-set reference material for the per-component diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagReference {
    /// Per component: tuning contributions, one row per tuning observation,
    /// one column per cell.
    pub raw: Vec<DMatrix<f64>>,
    /// Per component: combined contribution statistics on the tuning set.
    pub combined: Vec<DVector<f64>>,
    /// Per-component contribution control limits.
    pub limits: Vec<f64>,
    pub alpha_k: f64,
    pub combiner: Combiner,
}

/// The full Phase I artifact: per-lambda MFPCA models, resolved grid cells,
/// tuning references and control limits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChartModel {
    pub basis: BasisSystem,
    pub grid: ParameterGrid,
    /// One model per lambda; `None` where the fit was degenerate and the
    /// lambda's cells were dropped.
    pub models: Vec<Option<MfpcaModel>>,
    /// Tuning-set partial statistics, one row per tuning observation.
    pub reference_partials: DMatrix<f64>,
    /// Combined statistic of each tuning observation.
    pub combined_reference: DVector<f64>,
    pub control_limit: f64,
    pub alpha: f64,
    pub combiner: Combiner,
    pub diag: DiagReference,
    pub n_components: usize,
    pub n_train: usize,
    pub n_tune: usize,
    #[serde(skip)]
    sorted: OnceLock<SortedReferences>,
}

#[derive(Clone, Debug)]
struct SortedReferences {
    /// Ascending copies of each reference-partial column.
    partial_cols: Vec<Vec<f64>>,
    /// Per component, ascending copies of each contribution column.
    contrib_cols: Vec<Vec<Vec<f64>>>,
}

/// Outcome of scoring one observation against the chart.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonitorResult {
    pub obs_id: String,
    /// Partial statistic per grid cell.
    pub partials: DVector<f64>,
    /// Empirical p-value per grid cell, each in [1/(n_tune+1), 1].
    pub pvalues: DVector<f64>,
    pub combined: f64,
    /// `combined > control_limit`.
    pub signal: bool,
    /// Combined contribution statistic per component.
    pub contributions: DVector<f64>,
    /// Components whose combined contribution exceeds their limit.
    pub flagged_components: Vec<bool>,
}

/// Optional knobs for `fit_chart_with`.
#[derive(Clone, Debug, Default)]
pub struct ChartOptions {
    /// Type I error for the per-component contribution limits; defaults to
    /// the chart alpha.
    pub alpha_k: Option<f64>,
    /// Combining function for contributions; defaults to the chart combiner.
    pub contribution_combiner: Option<Combiner>,
    pub mfpca: MfpcaOptions,
}

/// Hotelling-type partial statistic: sum of squared scores over the leading
/// `rank` components, each normalized by its eigenvalue.
pub fn partial_t2(model: &MfpcaModel, scores: &ScoreVector, rank: usize) -> Result<f64> {
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
    Ok((0..rank)
        .map(|l| scores.scores[l] * scores.scores[l] / model.eigenvalues[l])
        .sum())
}

/// Rank-based upper-tail p-value estimate: `(1 + #{ref >= x}) / (n + 1)`.
pub fn empirical_pvalue(reference: &[f64], x: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let count = reference.iter().filter(|&&r| r >= x).count();
    Ok((1 + count) as f64 / (reference.len() + 1) as f64)
}

/// Same estimator over a pre-sorted (ascending) reference.
pub(crate) fn empirical_pvalue_sorted(sorted: &[f64], x: f64) -> f64 {
    let below = sorted.partition_point(|&v| v < x);
    (1 + sorted.len() - below) as f64 / (sorted.len() + 1) as f64
}

fn check_pvalues(pvalues: &[f64]) -> Result<()> {
    if pvalues.is_empty() {
        return Err(Error::EmptyReference);
    }
    for &p in pvalues {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidPValue(p));
        }
    }
    Ok(())
}

/// Fisher omnibus statistic `-2 * sum(log p) / T`.
pub fn combine_fisher(pvalues: &[f64]) -> Result<f64> {
    check_pvalues(pvalues)?;
    let sum: f64 = pvalues.iter().map(|p| p.ln()).sum();
    Ok(-2.0 * sum / pvalues.len() as f64)
}

/// Tippett statistic `-2 * log(min p)`.
pub fn combine_tippett(pvalues: &[f64]) -> Result<f64> {
    check_pvalues(pvalues)?;
    let min = pvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(-2.0 * min.ln())
}

/// Right-continuous (inverted-ECDF) empirical quantile: the
/// `ceil(level * n)`-th order statistic. Guarantees the exceedance fraction
/// of the sample itself is at most `1 - level` under a strict comparison.
pub(crate) fn type1_quantile(values: &[f64], level: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let k = ((level * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Per-cell statistics of one observation: the partial statistic vector and
/// the per-component contribution matrix.
struct CellStats {
    partials: DVector<f64>,
    /// `p x T`.
    contributions: DMatrix<f64>,
}

fn project_all(
    basis: &BasisSystem,
    models: &[Option<MfpcaModel>],
    grid: &ParameterGrid,
    ctx: &SampleContext,
) -> Result<Vec<Option<ObsProjection>>> {
    models
        .iter()
        .enumerate()
        .map(|(j, m)| match m {
            Some(model) => {
                let smoothed = ctx.smooth_adaptive(basis, grid.lambdas[j])?;
                Ok(Some(model.project(&smoothed)?))
            }
            None => Ok(None),
        })
        .collect()
}

fn cell_stats(
    cells: &[GridCell],
    models: &[Option<MfpcaModel>],
    projections: &[Option<ObsProjection>],
    n_components: usize,
) -> CellStats {
    let t = cells.len();
    let mut partials = DVector::zeros(t);
    let mut contributions = DMatrix::zeros(n_components, t);
    for (c, cell) in cells.iter().enumerate() {
        let model = models[cell.lambda_idx]
            .as_ref()
            .expect("cells only reference retained lambdas");
        let proj = projections[cell.lambda_idx]
            .as_ref()
            .expect("projection present for retained lambdas");
        let mut total = 0.0;
        for l in 0..cell.rank {
            let weight = proj.scores[l] / model.eigenvalues[l];
            total += weight * proj.scores[l];
            for k in 0..n_components {
                contributions[(k, c)] += weight * proj.pieces[(l, k)];
            }
        }
        partials[c] = total;
    }
    CellStats {
        partials,
        contributions,
    }
}

/// Fit the chart with default options.
pub fn fit_chart(
    basis: &BasisSystem,
    train: &[DiscreteSample],
    tune: &[DiscreteSample],
    grid: ParameterGrid,
    alpha: f64,
    combiner: Combiner,
) -> Result<ChartModel> {
    fit_chart_with(basis, train, tune, grid, alpha, combiner, &ChartOptions::default())
}

/// Fit the chart: per-lambda MFPCA models on the training set, resolved
/// grid cells, tuning-set references, and control limits.
pub fn fit_chart_with(
    basis: &BasisSystem,
    train: &[DiscreteSample],
    tune: &[DiscreteSample],
    mut grid: ParameterGrid,
    alpha: f64,
    combiner: Combiner,
    opts: &ChartOptions,
) -> Result<ChartModel> {
    if train.len() < 10 {
        return Err(Error::TooFewObservations {
            min: 10,
            got: train.len(),
        });
    }
    if tune.len() < 20 {
        return Err(Error::TooFewObservations {
            min: 20,
            got: tune.len(),
        });
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let alpha_k = opts.alpha_k.unwrap_or(alpha);
    if !(alpha_k > 0.0 && alpha_k < 0.5) {
        return Err(Error::InvalidAlpha(alpha_k));
    }
    let contribution_combiner = opts.contribution_combiner.unwrap_or(combiner);
    ParameterGrid::new(grid.lambdas.clone(), grid.deltas.clone())?;

    let n_components = train[0].n_components();
    for s in train.iter().chain(tune.iter()) {
        if s.n_components() != n_components {
            return Err(Error::InvalidSample {
                obs_id: s.obs_id.clone(),
                reason: format!(
                    "has {} components, expected {}",
                    s.n_components(),
                    n_components
                ),
            });
        }
    }

    let train_ctxs: Vec<SampleContext> = train
        .par_iter()
        .map(|s| SampleContext::new(basis, s))
        .collect::<Result<_>>()?;
    let tune_ctxs: Vec<SampleContext> = tune
        .par_iter()
        .map(|s| SampleContext::new(basis, s))
        .collect::<Result<_>>()?;

    // One MFPCA model per lambda; degenerate fits drop that lambda's cells.
    let models: Vec<Option<MfpcaModel>> = grid
        .lambdas
        .par_iter()
        .map(|&lambda| -> Result<Option<MfpcaModel>> {
            let smoothed = train_ctxs
                .par_iter()
                .map(|ctx| ctx.smooth_adaptive(basis, lambda))
                .collect::<Result<Vec<_>>>()?;
            let model = fit_mfpca_with(basis, &smoothed, &opts.mfpca)?;
            if model.is_degenerate() {
                log::warn!("dropping lambda {lambda:.3e}: degenerate MFPCA model");
                Ok(None)
            } else {
                Ok(Some(model))
            }
        })
        .collect::<Result<_>>()?;

    // Resolve cells with per-lambda dedup of equal ranks.
    let mut cells = Vec::new();
    for (j, model) in models.iter().enumerate() {
        let Some(model) = model else { continue };
        let mut ranks: Vec<usize> = grid
            .deltas
            .iter()
            .map(|&d| crate::mfpca::truncate_rank(model, d))
            .collect::<Result<_>>()?;
        ranks.sort_unstable();
        ranks.dedup();
        cells.extend(ranks.into_iter().map(|rank| GridCell {
            lambda_idx: j,
            rank,
        }));
    }
    if cells.is_empty() {
        return Err(Error::AllCellsDegenerate);
    }
    grid.cells = cells;

    // Tuning-set partial statistics and raw contributions.
    let tune_stats: Vec<CellStats> = tune_ctxs
        .par_iter()
        .map(|ctx| {
            let projections = project_all(basis, &models, &grid, ctx)?;
            Ok(cell_stats(&grid.cells, &models, &projections, n_components))
        })
        .collect::<Result<_>>()?;

    let n_tune = tune.len();
    let t_cells = grid.n_cells();
    let mut reference_partials = DMatrix::zeros(n_tune, t_cells);
    for (i, st) in tune_stats.iter().enumerate() {
        reference_partials.row_mut(i).copy_from(&st.partials.transpose());
    }
    let partial_cols = sorted_columns(&reference_partials);

    // Each tuning observation's p-values are computed against the full
    // tuning reference including itself; the +1 in the estimator keeps them
    // in (0, 1].
    let combined_reference = DVector::from_iterator(
        n_tune,
        (0..n_tune).map(|i| {
            let pvals: Vec<f64> = (0..t_cells)
                .map(|c| empirical_pvalue_sorted(&partial_cols[c], reference_partials[(i, c)]))
                .collect();
            combiner.combine(&pvals).expect("estimator p-values are valid")
        }),
    );
    let control_limit = type1_quantile(combined_reference.as_slice(), 1.0 - alpha);

    // Contribution references and per-component limits.
    let mut raw = vec![DMatrix::zeros(n_tune, t_cells); n_components];
    for (i, st) in tune_stats.iter().enumerate() {
        for k in 0..n_components {
            for c in 0..t_cells {
                raw[k][(i, c)] = st.contributions[(k, c)];
            }
        }
    }
    let contrib_cols: Vec<Vec<Vec<f64>>> = raw.iter().map(sorted_columns).collect();
    let mut combined = Vec::with_capacity(n_components);
    let mut limits = Vec::with_capacity(n_components);
    for k in 0..n_components {
        let stats = DVector::from_iterator(
            n_tune,
            (0..n_tune).map(|i| {
                let pvals: Vec<f64> = (0..t_cells)
                    .map(|c| empirical_pvalue_sorted(&contrib_cols[k][c], raw[k][(i, c)]))
                    .collect();
                contribution_combiner
                    .combine(&pvals)
                    .expect("estimator p-values are valid")
            }),
        );
        limits.push(type1_quantile(stats.as_slice(), 1.0 - alpha_k));
        combined.push(stats);
    }

    let chart = ChartModel {
        basis: basis.clone(),
        grid,
        models,
        reference_partials,
        combined_reference,
        control_limit,
        alpha,
        combiner,
        diag: DiagReference {
            raw,
            combined,
            limits,
            alpha_k,
            combiner: contribution_combiner,
        },
        n_components,
        n_train: train.len(),
        n_tune,
        sorted: OnceLock::new(),
    };
    chart.sorted.set(SortedReferences {
        partial_cols,
        contrib_cols,
    })
    .ok();
    Ok(chart)
}

fn sorted_columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.ncols())
        .map(|c| {
            let mut col: Vec<f64> = m.column(c).iter().cloned().collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            col
        })
        .collect()
}

impl ChartModel {
    fn sorted_refs(&self) -> &SortedReferences {
        self.sorted.get_or_init(|| SortedReferences {
            partial_cols: sorted_columns(&self.reference_partials),
            contrib_cols: self.diag.raw.iter().map(sorted_columns).collect(),
        })
    }

    pub(crate) fn sorted_contrib_cols(&self) -> &[Vec<Vec<f64>>] {
        &self.sorted_refs().contrib_cols
    }

    /// Number of partial tests.
    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }
}

/// Score one observation: smooth at every retained lambda, project, compute
/// partial statistics and p-values, combine, and attach the contribution
/// diagnosis.
pub fn monitor(chart: &ChartModel, obs: &DiscreteSample) -> Result<MonitorResult> {
    let ctx = SampleContext::new(&chart.basis, obs)?;
    if obs.n_components() != chart.n_components {
        return Err(Error::InvalidSample {
            obs_id: obs.obs_id.clone(),
            reason: format!(
                "has {} components, chart expects {}",
                obs.n_components(),
                chart.n_components
            ),
        });
    }
    let projections = project_all(&chart.basis, &chart.models, &chart.grid, &ctx)?;
    let stats = cell_stats(&chart.grid.cells, &chart.models, &projections, chart.n_components);
    let refs = chart.sorted_refs();

    let t_cells = chart.n_cells();
    let pvalues = DVector::from_iterator(
        t_cells,
        (0..t_cells).map(|c| empirical_pvalue_sorted(&refs.partial_cols[c], stats.partials[c])),
    );
    let combined = chart.combiner.combine(pvalues.as_slice())?;
    let signal = combined > chart.control_limit;

    let (contributions, flagged_components) =
        crate::diagnostics::combine_contributions(chart, &stats.contributions)?;

    Ok(MonitorResult {
        obs_id: obs.obs_id.clone(),
        partials: stats.partials,
        pvalues,
        combined,
        signal,
        contributions: DVector::from_vec(contributions),
        flagged_components,
    })
}

/// Monitor a batch in input order (parallel execution).
pub fn monitor_batch(chart: &ChartModel, observations: &[DiscreteSample]) -> Result<Vec<MonitorResult>> {
    observations
        .par_iter()
        .map(|obs| monitor(chart, obs))
        .collect()
}

/// Raw per-cell contribution matrix (components x cells) of one observation;
/// the diagnostics module combines it into flags.
pub fn contribution_matrix(chart: &ChartModel, obs: &DiscreteSample) -> Result<DMatrix<f64>> {
    let ctx = SampleContext::new(&chart.basis, obs)?;
    let projections = project_all(&chart.basis, &chart.models, &chart.grid, &ctx)?;
    Ok(cell_stats(&chart.grid.cells, &chart.models, &projections, chart.n_components).contributions)
}
