//! Comparison estimators: the ℓ1-penalized full-precision GGM, the marginal
//! GGM over `Y` alone, neighborhood selection by per-response Lasso, and the
//! univariate specialization of the partial estimator.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceView, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, soft_threshold, SymMatrix};
use crate::prox::{self, Smooth};
use crate::solver::{
    fit, fit_with, full_objective, BlockPrecision, Blocks, FitResult, OffDiagonalL1, PenaltySpec, SolverConfig,
    Termination, YySubproblem,
};

/// A positive definite `(p+q)×(p+q)` precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FullPrecision {
    omega: SymMatrix,
}

impl FullPrecision {
    pub fn new(omega: SymMatrix) -> Result<Self> {
        cholesky(&omega)?;
        Ok(Self { omega })
    }

    pub fn omega(&self) -> &SymMatrix {
        &self.omega
    }

    pub fn dim(&self) -> usize {
        self.omega.dim()
    }

    /// The `(Ωyy, Ωyx)` blocks for a split after the first `p` variables.
    pub fn blocks(&self, p: usize) -> Result<BlockPrecision> {
        BlockPrecision::from_joint(&self.omega, p)
    }
}

#[derive(Debug, Clone)]
pub struct FullGgmFit {
    pub precision: FullPrecision,
    pub objective_trace: Vec<f64>,
    pub iters: usize,
    pub wall_time: f64,
    pub termination: Termination,
}

/// `argmin_{Ω ≻ 0} −log det Ω + ⟨Σ, Ω⟩ + λ|Ω⁻|₁` over the joint covariance of
/// `cv`, by backtracking proximal gradient. Runs at most
/// `max_outer·max_inner` steps with the `inner_tol` stopping rule.
pub fn fit_full_ggm(cv: &CovarianceView, lambda: f64, cfg: &SolverConfig) -> Result<FullGgmFit> {
    fit_full_ggm_from(&cv.joint(), lambda, cfg, None)
}

/// Same as [`fit_full_ggm`] on an explicit covariance, optionally warm-started.
pub fn fit_full_ggm_from(
    sigma: &SymMatrix,
    lambda: f64,
    cfg: &SolverConfig,
    init: Option<&FullPrecision>,
) -> Result<FullGgmFit> {
    cfg.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be >= 0, got {lambda}")));
    }
    let start = Instant::now();
    let x0 = match init {
        Some(f) if f.dim() == sigma.dim() => f.omega.as_array().clone(),
        Some(f) => {
            return Err(Error::DimensionMismatch(format!("warm start is {0}x{0}, Σ is {1}x{1}", f.dim(), sigma.dim())))
        }
        None => Array2::from_diag(&sigma.as_array().diag().mapv(|s| 1.0 / (s + 1e-8))),
    };
    let sub = YySubproblem { syy: sigma.view(), coupling: None };
    let pen = OffDiagonalL1(lambda);
    let pt = sub.eval(x0)?.ok_or(Error::NotPositiveDefinite { pivot: 0, value: f64::NAN })?;
    let mut trace = vec![pt.value + prox::Penalty::value(&pen, &pt.x)];
    let max_iter = cfg.max_outer.saturating_mul(cfg.max_inner);
    let out = prox::minimize(&sub, &pen, pt, cfg.initial_step, cfg.inner_tol, max_iter, cfg, |v| trace.push(v))?;
    let termination = if out.iters >= max_iter { Termination::MaxIters } else { Termination::Converged };
    Ok(FullGgmFit {
        precision: FullPrecision { omega: SymMatrix::new(out.point.x)? },
        objective_trace: trace,
        iters: out.iters,
        wall_time: start.elapsed().as_secs_f64(),
        termination,
    })
}

/// Penalized full-GGM objective, for comparisons and validation scoring.
pub fn full_ggm_objective(sigma: &SymMatrix, omega: &SymMatrix, lambda: f64) -> Result<f64> {
    let l1: f64 = omega.as_array().indexed_iter().filter(|((i, j), _)| i != j).map(|(_, v)| v.abs()).sum();
    Ok(full_objective(sigma, omega)? + lambda * l1)
}

/// Graphical lasso on `Σyy` alone, ignoring `X`: the partial solver with q = 0.
pub fn fit_marginal_ggm(cv: &CovarianceView, lambda: f64, cfg: &SolverConfig) -> Result<FitResult> {
    let pen = PenaltySpec::element_wise(lambda, 0.0)?;
    fit(&cv.marginal(), &pen, cfg, None)
}

/// How the two directed Lasso selections of a `Y`-`Y` pair are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRule {
    /// Edge if either regression selects it.
    #[default]
    Or,
    And,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub tol: f64,
    pub max_sweeps: usize,
    pub rule: EdgeRule,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 10_000, rule: EdgeRule::Or }
    }
}

/// Per-response Lasso fits. `coefficients[i]` is over `(Y_{−i}, X)` in that
/// order (length `p − 1 + q`), in the sign convention of
/// `θᵀ Σ₋ᵢ,₋ᵢ θ + 2θᵀ Σ₋ᵢ,ᵢ + ρ‖θ‖₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodFit {
    pub coefficients: Vec<Array1<f64>>,
    /// `p×p`, symmetric, false on the diagonal.
    pub support_yy: Array2<bool>,
    pub support_yx: Array2<bool>,
}

impl NeighborhoodFit {
    pub fn p(&self) -> usize {
        self.support_yy.nrows()
    }

    pub fn q(&self) -> usize {
        self.support_yx.ncols()
    }
}

/// Cyclic coordinate descent for `argmin θᵀSθ + 2θᵀc + ρ‖θ‖₁`, keeping
/// `Sθ` up to date after every coordinate move. Stops when a full sweep
/// changes no coordinate by more than `tol`.
pub fn lasso_cd(
    gram: ArrayView2<'_, f64>,
    linear: ArrayView1<'_, f64>,
    rho: f64,
    cfg: &LassoConfig,
    warm: Option<ArrayView1<'_, f64>>,
) -> Array1<f64> {
    let k = linear.len();
    assert_eq!(gram.dim(), (k, k));
    let mut theta = warm.map(|w| w.to_owned()).unwrap_or_else(|| Array1::zeros(k));
    let mut s_theta = gram.dot(&theta);
    let half = 0.5 * rho;
    for _ in 0..cfg.max_sweeps {
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            let sjj = gram[[j, j]];
            let old = theta[j];
            let new = if sjj > 0.0 {
                let partial = linear[j] + s_theta[j] - sjj * old;
                soft_threshold(-partial, half) / sjj
            } else {
                0.0
            };
            if new != old {
                let d = new - old;
                s_theta.scaled_add(d, &gram.column(j));
                theta[j] = new;
                max_change = max_change.max(d.abs());
            }
        }
        if max_change <= cfg.tol {
            break;
        }
    }
    theta
}

/// Lasso regressions of every `Yᵢ` on `(Y₋ᵢ, X)` with penalty `ρ`; rows run in
/// parallel and are merged by row index.
pub fn fit_nslasso(d: &Dataset, rho: f64, cfg: &LassoConfig) -> Result<NeighborhoodFit> {
    let sigma = CovarianceView::from_dataset(d, crate::CovarianceMode::ForceExplicit).joint();
    fit_nslasso_cov(&sigma, d.p(), rho, cfg, None)
}

/// [`fit_nslasso`] on a joint covariance, optionally warm-started.
pub fn fit_nslasso_cov(
    sigma: &SymMatrix,
    p: usize,
    rho: f64,
    cfg: &LassoConfig,
    warm: Option<&NeighborhoodFit>,
) -> Result<NeighborhoodFit> {
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("ρ must be >= 0, got {rho}")));
    }
    let d = sigma.dim();
    if p == 0 || p > d {
        return Err(Error::InvalidArgument(format!("p = {p} out of range for dim {d}")));
    }
    let q = d - p;
    let coefficients: Vec<Array1<f64>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let (gram, linear) = neighborhood_system(sigma.view(), i);
            let w = warm.map(|w| w.coefficients[i].view());
            lasso_cd(gram.view(), linear.view(), rho, cfg, w)
        })
        .collect();
    let mut directed = Array2::from_elem((p, p), false);
    let mut support_yx = Array2::from_elem((p, q), false);
    for (i, coef) in coefficients.iter().enumerate() {
        for (k, &c) in coef.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let j = neighbor_index(i, k);
            if j < p {
                directed[[i, j]] = true;
            } else {
                support_yx[[i, j - p]] = true;
            }
        }
    }
    let mut support_yy = Array2::from_elem((p, p), false);
    for i in 0..p {
        for j in 0..p {
            if i != j {
                support_yy[[i, j]] = match cfg.rule {
                    EdgeRule::Or => directed[[i, j]] || directed[[j, i]],
                    EdgeRule::And => directed[[i, j]] && directed[[j, i]],
                };
            }
        }
    }
    Ok(NeighborhoodFit { coefficients, support_yy, support_yx })
}

/// Maps position `k` in row `i`'s coefficient vector to a joint variable index.
fn neighbor_index(i: usize, k: usize) -> usize {
    if k < i {
        k
    } else {
        k + 1
    }
}

/// `(Σ₋ᵢ,₋ᵢ, Σ₋ᵢ,ᵢ)` for the regression of variable `i` on all others.
pub fn neighborhood_system(sigma: ArrayView2<'_, f64>, i: usize) -> (Array2<f64>, Array1<f64>) {
    let d = sigma.nrows();
    let idx: Vec<usize> = (0..d).filter(|&j| j != i).collect();
    let gram = sigma.select(ndarray::Axis(0), &idx).select(ndarray::Axis(1), &idx);
    let linear = idx.iter().map(|&j| sigma[[j, i]]).collect();
    (gram, linear)
}

/// `θᵀ Σ₋ᵢ,₋ᵢ θ + 2θᵀ Σ₋ᵢ,ᵢ + Σᵢᵢ`: the mean squared residual of predicting
/// variable `i` by `−θ` applied to the others.
pub fn neighborhood_loss(sigma: ArrayView2<'_, f64>, i: usize, theta: ArrayView1<'_, f64>) -> f64 {
    let (gram, linear) = neighborhood_system(sigma, i);
    theta.dot(&gram.dot(&theta)) + 2.0 * theta.dot(&linear) + sigma[[i, i]]
}

/// Noise precision `ω > 0` and coefficients `θ` of the single-response model.
#[derive(Debug, Clone)]
pub struct UnivariateFit {
    pub omega: f64,
    pub theta: Array1<f64>,
    pub fit: FitResult,
}

/// `argmin_{ω>0, θ} −log ω + Σyy ω + 2θᵀΣxy + θᵀΣxxθ/ω + ρ‖θ‖₁`. With
/// `clamp_omega`, `ω` is held at 1 and only `θ` is optimized, which is the
/// neighborhood-selection Lasso.
pub fn fit_univariate(cv: &CovarianceView, rho: f64, cfg: &SolverConfig, clamp_omega: bool) -> Result<UnivariateFit> {
    if cv.p() != 1 {
        return Err(Error::InvalidArgument(format!("univariate fit needs p = 1, got {}", cv.p())));
    }
    let pen = PenaltySpec::element_wise(0.0, rho)?;
    let fit = if clamp_omega {
        let init = BlockPrecision::new(SymMatrix::identity(1), Array2::zeros((1, cv.q())))?;
        fit_with(cv, &pen, cfg, Some(&init), Blocks::YxOnly)?
    } else {
        fit(cv, &pen, cfg, None)?
    };
    Ok(UnivariateFit { omega: fit.theta.omega_yy().get(0, 0), theta: fit.theta.omega_yx().row(0).to_owned(), fit })
}

/// `(Γyx, Ω̄yy)` with `Γyx = −Ωyy⁻¹ Ωyx` and noise precision `Ω̄yy = Ωyy`.
pub fn to_regression(theta: &BlockPrecision) -> Result<(Array2<f64>, SymMatrix)> {
    let chol = cholesky(theta.omega_yy())?;
    let gamma = -chol.solve(theta.omega_yx().view());
    Ok((gamma, theta.omega_yy().clone()))
}

/// Inverse of [`to_regression`]: `Ωyy = Ω̄yy`, `Ωyx = −Ω̄yy Γyx`.
pub fn from_regression(gamma: ArrayView2<'_, f64>, noise_precision: &SymMatrix) -> Result<BlockPrecision> {
    if gamma.nrows() != noise_precision.dim() {
        return Err(Error::DimensionMismatch("Γ rows must match the noise precision".into()));
    }
    let yx = -noise_precision.as_array().dot(&gamma);
    BlockPrecision::new(noise_precision.clone(), yx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn full_ggm_identity_covariance() {
        let cv = CovarianceView::from_joint(10, &SymMatrix::identity(4), 2).unwrap();
        let res = fit_full_ggm(&cv, 1e-9, &SolverConfig::tight()).unwrap();
        let d = res.precision.omega().as_array() - &Array2::<f64>::eye(4);
        assert!(d.iter().all(|v| v.abs() < 1e-7), "{d}");
    }

    #[test]
    fn full_ggm_large_lambda_is_diagonal() {
        let sigma = SymMatrix::new(array![[2.0, 0.3, -0.2], [0.3, 1.0, 0.1], [-0.2, 0.1, 0.5]]).unwrap();
        let res = fit_full_ggm_from(&sigma, 0.31, &SolverConfig::tight(), None).unwrap();
        let om = res.precision.omega();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!((om.get(i, i) - 1.0 / sigma.get(i, i)).abs() < 1e-6);
                } else {
                    assert_eq!(om.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn lasso_cd_large_penalty_is_empty() {
        let gram = array![[1.0, 0.2], [0.2, 1.0]];
        let lin = array![0.5, -0.3];
        let th = lasso_cd(gram.view(), lin.view(), 10.0, &LassoConfig::default(), None);
        assert_eq!(th, array![0.0, 0.0]);
        // ρ = 0 solves S θ = −c.
        let th = lasso_cd(gram.view(), lin.view(), 0.0, &LassoConfig { tol: 1e-14, ..Default::default() }, None);
        let r = gram.dot(&th) + &lin;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn nslasso_huge_penalty_and_single_response() {
        let y = array![[1.0, 0.5], [0.2, -1.0], [-0.7, 0.3], [0.4, 0.9]];
        let x = array![[0.3], [1.0], [-0.2], [0.8]];
        let d = Dataset::new(y, x).unwrap();
        let fit = fit_nslasso(&d, 1e6, &LassoConfig::default()).unwrap();
        assert!(fit.support_yy.iter().all(|&b| !b) && fit.support_yx.iter().all(|&b| !b));

        let d1 =
            Dataset::new(array![[1.0], [0.2], [-0.7], [0.4]], array![[0.9, 0.1], [0.3, 1.0], [-0.5, 0.0], [0.4, -0.2]])
                .unwrap();
        let fit = fit_nslasso(&d1, 0.01, &LassoConfig::default()).unwrap();
        assert_eq!(fit.support_yy.dim(), (1, 1));
        assert!(!fit.support_yy[[0, 0]]);
        let sigma = CovarianceView::from_dataset(&d1, crate::CovarianceMode::ForceExplicit).joint();
        let (g, c) = neighborhood_system(sigma.view(), 0);
        let direct = lasso_cd(g.view(), c.view(), 0.01, &LassoConfig::default(), None);
        let mask: Vec<bool> = direct.iter().map(|&v| v != 0.0).collect();
        assert_eq!(fit.support_yx.row(0).to_vec(), mask);
    }

    #[test]
    fn regression_trivial_cases() {
        let yy = SymMatrix::new(array![[2.0, 0.4], [0.4, 1.0]]).unwrap();
        let theta = BlockPrecision::new(yy.clone(), Array2::zeros((2, 3))).unwrap();
        let (gamma, noise) = to_regression(&theta).unwrap();
        assert!(gamma.iter().all(|&v| v == 0.0));
        assert_eq!(noise, yy);

        let yx = array![[0.5, -1.0], [0.0, 2.0]];
        let theta = BlockPrecision::new(SymMatrix::identity(2), yx.clone()).unwrap();
        assert_eq!(to_regression(&theta).unwrap().0, -&yx);
        let back = from_regression((-&yx).view(), &SymMatrix::identity(2)).unwrap();
        assert_eq!(back.omega_yx(), &yx);
    }

    #[test]
    fn univariate_huge_rho_gives_inverse_variance() {
        let cv = CovarianceView::from_blocks(
            20,
            SymMatrix::from_diag(&[2.5]),
            array![[0.3, -0.2]],
            Some(SymMatrix::identity(2)),
        )
        .unwrap();
        let fit = fit_univariate(&cv, 1e3, &SolverConfig::tight(), false).unwrap();
        assert!(fit.theta.iter().all(|&v| v == 0.0));
        assert!((fit.omega - 1.0 / 2.5).abs() < 1e-8);
        assert!(fit_univariate(&cv.marginal(), 0.1, &SolverConfig::default(), false).is_ok());
    }
}
