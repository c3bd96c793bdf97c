//! Penalty selection over a `(λ, ρ)` grid, scored on held-out moments or by
//! BIC, plus one-dimensional path selection for the baselines.

use std::io::Write;
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{
    fit_full_ggm_from, fit_nslasso_cov, neighborhood_loss, FullGgmFit, FullPrecision, LassoConfig, NeighborhoodFit,
};
use crate::covariance::CovarianceView;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::solver::{eval_full_l, eval_lpa, fit, BlockPrecision, FitResult, PenaltyFamily, PenaltySpec, SolverConfig};

/// Penalty used in place of a grid whose anchor is zero.
pub const FALLBACK_PENALTY: f64 = 1e-3;

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Selection {
    /// Score each fit by `L_pa` on these held-out moments.
    Validation(CovarianceView),
    /// `2n·L_pa + ln(n)·df` on the training moments.
    Bic,
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub selection: Selection,
}

fn check_grid(name: &str, g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} grid is empty")));
    }
    if g.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} grid must be positive and finite")));
    }
    if g.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(format!("{name} grid must be strictly descending")));
    }
    Ok(())
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        check_grid("λ", &self.lambdas)?;
        check_grid("ρ", &self.rhos)
    }
}

/// Outcome of one grid cell. `score` is `None` when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub lambda_index: usize,
    pub rho_index: usize,
    pub lambda: f64,
    pub rho: f64,
    pub score: Option<f64>,
    pub df: Option<usize>,
    pub iters: usize,
    pub time: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub best_lambda: f64,
    pub best_rho: f64,
    /// Grid coordinates `(λ index, ρ index)` of the selected cell.
    pub best_index: (usize, usize),
    /// Row-major in `(λ index, ρ index)`.
    pub cells: Vec<CellSummary>,
    pub best_fit: FitResult,
}

/// `(#upper off-diagonal nonzeros of Ωyy) + p + nnz(Ωyx)`.
pub fn bic_df(theta: &BlockPrecision) -> usize {
    let yy = theta.omega_yy().as_array().indexed_iter().filter(|((i, j), &v)| i < j && v != 0.0).count();
    yy + theta.p() + theta.omega_yx().iter().filter(|&&v| v != 0.0).count()
}

pub fn bic_score(cv: &CovarianceView, theta: &BlockPrecision) -> Result<f64> {
    let n = cv.n() as f64;
    Ok(2.0 * n * eval_lpa(cv, theta)? + n.ln() * bic_df(theta) as f64)
}

/// `(λ_max, ρ_max)`: the smallest penalties for which the initializer
/// `(diag(1/Σyy_ii), 0)` already satisfies the optimality conditions. There
/// `∇G = 2Σyx` and the off-diagonals of `∇F` are those of `Σyy`.
pub fn lambda_max_heuristic(cv: &CovarianceView, family: PenaltyFamily) -> (f64, f64) {
    let syy = cv.syy().as_array();
    let lambda = syy.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let syx = cv.syx();
    let rho = match family {
        PenaltyFamily::ElementWise => 2.0 * syx.iter().map(|v| v.abs()).fold(0.0, f64::max),
        PenaltyFamily::ColumnWise => 2.0 * syx.columns().into_iter().map(|c| c.dot(&c).sqrt()).fold(0.0, f64::max),
    };
    (lambda, rho)
}

/// `points` log-spaced values from `max` down to `max·ratio`; a single
/// [`FALLBACK_PENALTY`] when `max` is not positive.
pub fn log_grid(max: f64, points: usize, ratio: f64) -> Vec<f64> {
    if !(max > 0.0) || !max.is_finite() || points == 0 {
        return vec![FALLBACK_PENALTY];
    }
    if points == 1 {
        return vec![max];
    }
    let lo = (max * ratio).ln();
    let hi = max.ln();
    (0..points).map(|k| (hi + (lo - hi) * k as f64 / (points - 1) as f64).exp()).collect()
}

/// Ten points per axis spanning two decades below the heuristic maxima.
pub fn default_grid(cv: &CovarianceView, family: PenaltyFamily, selection: Selection) -> GridSpec {
    let (lmax, rmax) = lambda_max_heuristic(cv, family);
    GridSpec { lambdas: log_grid(lmax, 10, 0.01), rhos: log_grid(rmax, 10, 0.01), selection }
}

/// Fits every cell, warm-starting down the λ path inside each ρ column.
/// Columns run in parallel; results depend only on grid coordinates.
pub fn select(
    cv: &CovarianceView,
    grid: &GridSpec,
    family: PenaltyFamily,
    cfg: &SolverConfig,
) -> Result<SelectionResult> {
    grid.validate()?;
    cfg.validate()?;
    if let Selection::Validation(v) = &grid.selection {
        if v.p() != cv.p() || v.q() != cv.q() {
            return Err(Error::DimensionMismatch("validation moments differ in shape from training".into()));
        }
    }
    let columns: Vec<Vec<(CellSummary, Option<FitResult>)>> = grid
        .rhos
        .par_iter()
        .enumerate()
        .map(|(ri, &rho)| {
            let mut warm: Option<BlockPrecision> = None;
            let mut out = Vec::with_capacity(grid.lambdas.len());
            for (li, &lambda) in grid.lambdas.iter().enumerate() {
                let start = Instant::now();
                let attempt = PenaltySpec::new(family, lambda, rho).and_then(|pen| {
                    let res = fit(cv, &pen, cfg, warm.as_ref())?;
                    let score = match &grid.selection {
                        Selection::Validation(v) => eval_lpa(v, &res.theta)?,
                        Selection::Bic => bic_score(cv, &res.theta)?,
                    };
                    Ok((res, score))
                });
                let time = start.elapsed().as_secs_f64();
                let mut cell = CellSummary {
                    lambda_index: li,
                    rho_index: ri,
                    lambda,
                    rho,
                    score: None,
                    df: None,
                    iters: 0,
                    time,
                    error: None,
                };
                match attempt {
                    Ok((res, score)) => {
                        cell.score = Some(score).filter(|s| s.is_finite());
                        cell.df = Some(bic_df(&res.theta));
                        cell.iters = res.outer_iters;
                        warm = Some(res.theta.clone());
                        out.push((cell, Some(res)));
                    }
                    Err(e) => {
                        cell.error = Some(e.to_string());
                        out.push((cell, None));
                    }
                }
            }
            out
        })
        .collect();

    let mut cells = Vec::with_capacity(grid.lambdas.len() * grid.rhos.len());
    let mut fits: Vec<Vec<Option<FitResult>>> = Vec::with_capacity(grid.rhos.len());
    for col in columns {
        let mut f = Vec::with_capacity(col.len());
        for (c, r) in col {
            cells.push(c);
            f.push(r);
        }
        fits.push(f);
    }
    // Row-major in λ so that the first strict minimum favors larger λ, then ρ.
    cells.sort_by_key(|c| (c.lambda_index, c.rho_index));
    let mut best: Option<&CellSummary> = None;
    for c in &cells {
        if let Some(s) = c.score {
            if best.is_none_or(|b| s < b.score.expect("scored")) {
                best = Some(c);
            }
        }
    }
    let best = best.ok_or_else(|| Error::Infeasible("every grid cell failed".into()))?.clone();
    let best_fit = fits[best.rho_index][best.lambda_index].take().expect("scored cell has a fit");
    Ok(SelectionResult {
        best_lambda: best.lambda,
        best_rho: best.rho,
        best_index: (best.lambda_index, best.rho_index),
        cells,
        best_fit,
    })
}

/// Score table with header `lambda,rho,score,df,iters[,time]`; failed cells
/// leave `score` and `df` empty. Leaving out `time` keeps the table
/// reproducible byte for byte.
pub fn write_score_table<W: Write>(w: W, cells: &[CellSummary], with_time: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["lambda", "rho", "score", "df", "iters"];
    if with_time {
        header.push("time");
    }
    out.write_record(&header)?;
    for c in cells {
        let mut row = vec![
            format!("{}", c.lambda),
            format!("{}", c.rho),
            c.score.map(|s| format!("{s}")).unwrap_or_default(),
            c.df.map(|d| d.to_string()).unwrap_or_default(),
            c.iters.to_string(),
        ];
        if with_time {
            row.push(format!("{}", c.time));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Outcome of a one-parameter path.
#[derive(Debug, Clone)]
pub struct PathResult<T> {
    pub values: Vec<f64>,
    pub scores: Vec<Option<f64>>,
    pub best_index: usize,
    pub best: T,
}

impl<T> PathResult<T> {
    pub fn best_value(&self) -> f64 {
        self.values[self.best_index]
    }
}

/// Runs `fit_one(value, warm)` down a descending path and keeps the first
/// minimizer of `score`.
fn path_select<T: Clone>(
    values: &[f64],
    mut fit_one: impl FnMut(f64, Option<&T>) -> Result<T>,
    score: impl Fn(&T) -> Result<f64>,
) -> Result<PathResult<T>> {
    check_grid("penalty", values)?;
    let mut warm: Option<T> = None;
    let mut scores = Vec::with_capacity(values.len());
    let mut best: Option<(usize, f64, T)> = None;
    for (k, &v) in values.iter().enumerate() {
        let res = fit_one(v, warm.as_ref()).and_then(|t| score(&t).map(|s| (t, s)));
        match res {
            Ok((t, s)) if s.is_finite() => {
                scores.push(Some(s));
                if best.as_ref().is_none_or(|b| s < b.1) {
                    best = Some((k, s, t.clone()));
                }
                warm = Some(t);
            }
            Ok((t, _)) => {
                scores.push(None);
                warm = Some(t);
            }
            Err(_) => scores.push(None),
        }
    }
    let (best_index, _, best) = best.ok_or_else(|| Error::Infeasible("every path point failed".into()))?;
    Ok(PathResult { values: values.to_vec(), scores, best_index, best })
}

/// Largest off-diagonal magnitude of a covariance.
pub fn max_off_diagonal(sigma: &SymMatrix) -> f64 {
    sigma.as_array().indexed_iter().filter(|((i, j), _)| i != j).map(|(_, v)| v.abs()).fold(0.0, f64::max)
}

/// Full GGM over `(Y, X)`, scored by the unpenalized likelihood on the
/// validation joint covariance.
pub fn select_full_ggm(
    train: &CovarianceView,
    validation: &CovarianceView,
    lambdas: &[f64],
    cfg: &SolverConfig,
) -> Result<PathResult<FullGgmFit>> {
    let sigma = train.joint();
    path_select(
        lambdas,
        |l, warm: Option<&FullGgmFit>| fit_full_ggm_from(&sigma, l, cfg, warm.map(|w| &w.precision)),
        |f| eval_full_l(validation, f.precision.omega()),
    )
}

/// Marginal GGM over `Y`, scored by the likelihood on the validation `Σyy`.
pub fn select_marginal_ggm(
    train: &CovarianceView,
    validation: &CovarianceView,
    lambdas: &[f64],
    cfg: &SolverConfig,
) -> Result<PathResult<FullPrecision>> {
    let sigma = train.syy().clone();
    let val = validation.marginal();
    path_select(
        lambdas,
        |l, warm: Option<&FullPrecision>| fit_full_ggm_from(&sigma, l, cfg, warm).map(|f| f.precision),
        |f| eval_lpa(&val, &BlockPrecision::new(f.omega().clone(), ndarray::Array2::zeros((f.dim(), 0)))?),
    )
}

/// Neighborhood selection, scored by the summed per-response regression loss
/// of the training coefficients on the validation covariance.
pub fn select_nslasso(
    train: &SymMatrix,
    validation: &SymMatrix,
    p: usize,
    rhos: &[f64],
    cfg: &LassoConfig,
) -> Result<PathResult<NeighborhoodFit>> {
    if train.dim() != validation.dim() {
        return Err(Error::DimensionMismatch("validation covariance differs in shape".into()));
    }
    path_select(
        rhos,
        |r, warm: Option<&NeighborhoodFit>| fit_nslasso_cov(train, p, r, cfg, warm),
        |f| {
            Ok(f.coefficients
                .iter()
                .enumerate()
                .map(|(i, c): (usize, &Array1<f64>)| neighborhood_loss(validation.view(), i, c.view()))
                .sum())
        },
    )
}
