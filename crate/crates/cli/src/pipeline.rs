//! Per-replication work: model selection for each estimator and scoring of
//! the selected estimate against a known truth or a held-out sample.

use std::time::Instant;

use ndarray::Array2;
use pggm::baselines::{fit_univariate, FullPrecision};
use pggm::metrics::{norm_losses, support_fscore, support_of, test_objective, NormLosses, SupportMask, SupportScore};
use pggm::select::{
    lambda_max_heuristic, log_grid, max_off_diagonal, select, select_full_ggm, select_marginal_ggm, select_nslasso,
    CellSummary, GridSpec, Selection,
};
use pggm::solver::eval_lpa;
use pggm::synthetic::GroundTruth;
use pggm::{BlockPrecision, CovarianceMode, CovarianceView, Dataset, FitResult, SymMatrix, Termination};
use serde::{Deserialize, Serialize};

use crate::config::{Estimator, FitConfig, SelectionRule};
use crate::error::CliError;

/// The samples of one replication (or of one real-style data split).
#[derive(Debug, Clone)]
pub struct RepInputs {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Clone)]
pub enum Estimate {
    Blocks(BlockPrecision),
    /// Neighborhood selection yields supports only; `yy` is symmetric and
    /// false on the diagonal.
    Support {
        yy: Array2<bool>,
        yx: Array2<bool>,
    },
}

/// Deterministic summary of a selected fit; timings are kept apart in
/// [`FitOutcome`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub estimator: Estimator,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub selection: String,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub termination: Option<Termination>,
    /// Univariate noise precision and coefficients.
    pub omega: Option<f64>,
    pub theta: Option<Vec<f64>>,
}

/// One row of a one-parameter selection path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub value: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub record: FitRecord,
    pub estimate: Estimate,
    /// The `(λ, ρ)` grid for pggm.
    pub grid: Option<Vec<CellSummary>>,
    pub path: Option<Vec<PathRow>>,
    /// Wall time of the whole selection, and of the selected fit alone.
    pub select_seconds: f64,
    pub fit_seconds: f64,
}

fn solver_err(e: pggm::Error) -> CliError {
    CliError::Solver(e.to_string())
}

fn cov(d: &Dataset) -> CovarianceView {
    CovarianceView::from_dataset(d, CovarianceMode::Auto)
}

fn grid_or(explicit: &[f64], max: f64, cfg: &FitConfig) -> Vec<f64> {
    if explicit.is_empty() {
        log_grid(max, cfg.grid_points, cfg.grid_ratio)
    } else {
        explicit.to_vec()
    }
}

fn path_rows(values: &[f64], scores: &[Option<f64>]) -> Vec<PathRow> {
    values.iter().zip(scores).map(|(&value, &score)| PathRow { value, score }).collect()
}

fn solver_record(est: Estimator, lambda: Option<f64>, rho: Option<f64>, selection: &str, fit: &FitResult) -> FitRecord {
    FitRecord {
        estimator: est,
        lambda,
        rho,
        selection: selection.to_string(),
        objective_trace: fit.objective_trace.clone(),
        iterations: fit.outer_iters,
        inner_iterations: fit.inner_iters_total,
        termination: Some(fit.termination),
        omega: None,
        theta: None,
    }
}

/// Selects penalties for `est` on `inputs` and returns the selected fit.
/// pggm follows `cfg.selection`; the baselines are always scored on the
/// validation sample.
pub fn run_estimator(est: Estimator, inputs: &RepInputs, cfg: &FitConfig) -> Result<FitOutcome, CliError> {
    let train = cov(&inputs.train);
    let val = cov(&inputs.validation);
    let (p, q) = (train.p(), train.q());
    let start = Instant::now();
    let family = cfg.penalty.family();
    match est {
        Estimator::Pggm => {
            let (lmax, rmax) = lambda_max_heuristic(&train, family);
            let selection = match cfg.selection {
                SelectionRule::Validation => Selection::Validation(val),
                SelectionRule::Bic => Selection::Bic,
            };
            let grid =
                GridSpec { lambdas: grid_or(&cfg.lambdas, lmax, cfg), rhos: grid_or(&cfg.rhos, rmax, cfg), selection };
            let res = select(&train, &grid, family, &cfg.solver).map_err(solver_err)?;
            let label = match cfg.selection {
                SelectionRule::Validation => "validation",
                SelectionRule::Bic => "bic",
            };
            let record = solver_record(est, Some(res.best_lambda), Some(res.best_rho), label, &res.best_fit);
            let select_seconds = start.elapsed().as_secs_f64();
            let pen = pggm::PenaltySpec::new(family, res.best_lambda, res.best_rho).map_err(solver_err)?;
            let cold = pggm::fit(&train, &pen, &cfg.solver, None).map_err(solver_err)?;
            Ok(FitOutcome {
                record,
                fit_seconds: cold.wall_time,
                estimate: Estimate::Blocks(res.best_fit.theta),
                grid: Some(res.cells),
                path: None,
                select_seconds,
            })
        }
        Estimator::FullGgm => {
            let lambdas = grid_or(&cfg.lambdas, max_off_diagonal(&train.joint()), cfg);
            let res = select_full_ggm(&train, &val, &lambdas, &cfg.solver).map_err(solver_err)?;
            let f = &res.best;
            let select_seconds = start.elapsed().as_secs_f64();
            let cold = pggm::baselines::fit_full_ggm_from(&train.joint(), res.best_value(), &cfg.solver, None)
                .map_err(solver_err)?;
            let record = FitRecord {
                estimator: est,
                lambda: Some(res.best_value()),
                rho: None,
                selection: "validation".into(),
                objective_trace: f.objective_trace.clone(),
                iterations: f.iters,
                inner_iterations: f.iters,
                termination: Some(f.termination),
                omega: None,
                theta: None,
            };
            Ok(FitOutcome {
                record,
                fit_seconds: cold.wall_time,
                estimate: Estimate::Blocks(f.precision.blocks(p).map_err(solver_err)?),
                grid: None,
                path: Some(path_rows(&res.values, &res.scores)),
                select_seconds,
            })
        }
        Estimator::MarginalGgm => {
            let lambdas = grid_or(&cfg.lambdas, max_off_diagonal(train.syy()), cfg);
            let res = select_marginal_ggm(&train, &val, &lambdas, &cfg.solver).map_err(solver_err)?;
            let select_seconds = start.elapsed().as_secs_f64();
            let cold = pggm::baselines::fit_full_ggm_from(train.syy(), res.best_value(), &cfg.solver, None)
                .map_err(solver_err)?;
            let record = FitRecord {
                estimator: est,
                lambda: Some(res.best_value()),
                rho: None,
                selection: "validation".into(),
                objective_trace: cold.objective_trace.clone(),
                iterations: cold.iters,
                inner_iterations: cold.iters,
                termination: Some(cold.termination),
                omega: None,
                theta: None,
            };
            let yy: &FullPrecision = &res.best;
            let theta = BlockPrecision::new(yy.omega().clone(), Array2::zeros((p, q))).map_err(solver_err)?;
            Ok(FitOutcome {
                record,
                fit_seconds: cold.wall_time,
                estimate: Estimate::Blocks(theta),
                grid: None,
                path: Some(path_rows(&res.values, &res.scores)),
                select_seconds,
            })
        }
        Estimator::Nslasso => {
            let joint = train.joint();
            let rho_max = 2.0 * nslasso_max(&joint, p);
            let rhos = grid_or(&cfg.rhos, rho_max, cfg);
            let res = select_nslasso(&joint, &val.joint(), p, &rhos, &cfg.lasso).map_err(solver_err)?;
            let select_seconds = start.elapsed().as_secs_f64();
            let t = Instant::now();
            let _ =
                pggm::baselines::fit_nslasso_cov(&joint, p, res.best_value(), &cfg.lasso, None).map_err(solver_err)?;
            let fit_seconds = t.elapsed().as_secs_f64();
            let record = FitRecord {
                estimator: est,
                lambda: None,
                rho: Some(res.best_value()),
                selection: "validation".into(),
                objective_trace: Vec::new(),
                iterations: 0,
                inner_iterations: 0,
                termination: None,
                omega: None,
                theta: None,
            };
            Ok(FitOutcome {
                record,
                fit_seconds,
                estimate: Estimate::Support { yy: res.best.support_yy, yx: res.best.support_yx },
                grid: None,
                path: Some(path_rows(&res.values, &res.scores)),
                select_seconds,
            })
        }
        Estimator::Univariate => {
            if p != 1 {
                return Err(CliError::Config(format!("the univariate estimator needs p = 1, data has p = {p}")));
            }
            let (_, rmax) = lambda_max_heuristic(&train, family);
            let rhos = grid_or(&cfg.rhos, rmax, cfg);
            let mut scores = Vec::with_capacity(rhos.len());
            let mut best: Option<(f64, f64, pggm::baselines::UnivariateFit)> = None;
            for &rho in &rhos {
                let scored = fit_univariate(&train, rho, &cfg.solver, cfg.clamp_omega)
                    .and_then(|u| eval_lpa(&val, &u.fit.theta).map(|s| (u, s)));
                match scored {
                    Ok((u, s)) if s.is_finite() => {
                        scores.push(Some(s));
                        if best.as_ref().is_none_or(|b| s < b.1) {
                            best = Some((rho, s, u));
                        }
                    }
                    _ => scores.push(None),
                }
            }
            let (rho, _, u) = best.ok_or_else(|| CliError::Solver("every univariate fit failed".into()))?;
            let mut record = solver_record(est, None, Some(rho), "validation", &u.fit);
            record.omega = Some(u.omega);
            record.theta = Some(u.theta.to_vec());
            Ok(FitOutcome {
                record,
                fit_seconds: u.fit.wall_time,
                estimate: Estimate::Blocks(u.fit.theta),
                grid: None,
                path: Some(path_rows(&rhos, &scores)),
                select_seconds: start.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Largest `|Σ_ij|` over response rows `i < p` and `j ≠ i`: the penalty at
/// which every neighborhood regression is empty, up to the factor 2.
fn nslasso_max(joint: &SymMatrix, p: usize) -> f64 {
    let a = joint.as_array();
    let mut m: f64 = 0.0;
    for i in 0..p {
        for j in 0..a.ncols() {
            if i != j {
                m = m.max(a[[i, j]].abs());
            }
        }
    }
    m
}

/// Support of an estimate: nonzero entries for blocks, selected edges for
/// neighborhood selection (diagonal always on).
pub fn estimate_support(est: &Estimate) -> Result<SupportMask, CliError> {
    match est {
        Estimate::Blocks(theta) => support_of(theta, 0.0).map_err(solver_err),
        Estimate::Support { yy, yx } => {
            let mut yy = yy.clone();
            for i in 0..yy.nrows() {
                yy[[i, i]] = true;
            }
            Ok(SupportMask { yy, yx: yx.clone() })
        }
    }
}

fn yy_only(m: &SupportMask) -> SupportMask {
    SupportMask { yy: m.yy.clone(), yx: Array2::from_elem((m.yy.nrows(), 0), false) }
}

/// Scores against the truth: norms of `Θ̂ − Θ*` (absent for supports) and
/// F-scores, over both blocks and over `Ωyy` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthScores {
    pub losses: Option<NormLosses>,
    pub support: SupportScore,
    pub support_yy: SupportScore,
}

pub fn score_against_truth(est: &Estimate, truth: &GroundTruth) -> Result<TruthScores, CliError> {
    let losses = match est {
        Estimate::Blocks(theta) => Some(norm_losses(theta, &truth.theta_star).map_err(solver_err)?),
        Estimate::Support { .. } => None,
    };
    let mask = estimate_support(est)?;
    let truth_mask = SupportMask { yy: truth.support_yy.clone(), yx: truth.support_yx.clone() };
    let support = support_fscore(&mask, &truth_mask).map_err(solver_err)?;
    let support_yy = support_fscore(&yy_only(&mask), &yy_only(&truth_mask)).map_err(solver_err)?;
    Ok(TruthScores { losses, support, support_yy })
}

/// `L_pa` of a block estimate on the test sample.
pub fn score_on_test(est: &Estimate, test: &Dataset) -> Result<Option<f64>, CliError> {
    match est {
        Estimate::Blocks(theta) => Ok(Some(test_objective(&cov(test), theta).map_err(solver_err)?)),
        Estimate::Support { .. } => Ok(None),
    }
}
