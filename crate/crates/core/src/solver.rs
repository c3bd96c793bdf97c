//! The partial-likelihood estimator: evaluates
//!
//! ```text
//! L_pa(Ωyy, Ωyx) = −log det Ωyy + tr(Σyy Ωyy) + 2 tr(Σyxᵀ Ωyx) + tr(Σxx Ωyxᵀ Ωyy⁻¹ Ωyx)
//! ```
//!
//! and minimizes `L_pa + R` by alternating between an `Ωyy` subproblem
//! (`F`, constrained to Ωyy ≻ 0) and an `Ωyx` subproblem (`G`, quadratic),
//! each solved by proximal gradient descent.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::covariance::{read_blocks, write_blocks, CovarianceView, XxPartial};
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, cholesky_view, frobenius_dot, group_soft_threshold_inplace, soft_threshold, symmetrize, SymMatrix,
};
use crate::prox::{self, Evaluated, Penalty, Smooth};

/// The estimated blocks `Θ = (Ωyy, Ωyx)`; `Ωyy` is positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPrecision {
    omega_yy: SymMatrix,
    omega_yx: Array2<f64>,
}

impl BlockPrecision {
    pub fn new(omega_yy: SymMatrix, omega_yx: Array2<f64>) -> Result<Self> {
        if omega_yx.nrows() != omega_yy.dim() {
            return Err(Error::DimensionMismatch(format!(
                "Ωyx has {} rows but Ωyy is {}x{}",
                omega_yx.nrows(),
                omega_yy.dim(),
                omega_yy.dim()
            )));
        }
        cholesky(&omega_yy)?;
        Ok(Self { omega_yy, omega_yx })
    }

    /// `Ωyy = diag(1 / (Σyy_ii + 1e-8))`, `Ωyx = 0`.
    pub fn initial(cv: &CovarianceView) -> Self {
        let diag: Vec<f64> = cv.syy().as_array().diag().iter().map(|s| 1.0 / (s + 1e-8)).collect();
        Self { omega_yy: SymMatrix::from_diag(&diag), omega_yx: Array2::zeros((cv.p(), cv.q())) }
    }

    pub fn p(&self) -> usize {
        self.omega_yy.dim()
    }

    pub fn q(&self) -> usize {
        self.omega_yx.ncols()
    }

    pub fn omega_yy(&self) -> &SymMatrix {
        &self.omega_yy
    }

    pub fn omega_yx(&self) -> &Array2<f64> {
        &self.omega_yx
    }

    /// `[Ωyy Ωyx]` as one `p × (p+q)` matrix.
    pub fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.omega_yy.view(), self.omega_yx.view()]).expect("rows match")
    }

    /// Splits the leading `p` rows of a full precision matrix.
    pub fn from_joint(omega: &SymMatrix, p: usize) -> Result<Self> {
        if p == 0 || p > omega.dim() {
            return Err(Error::InvalidArgument(format!("cannot split dim {} at p = {p}", omega.dim())));
        }
        let a = omega.view();
        Self::new(SymMatrix::new(a.slice(ndarray::s![..p, ..p]).to_owned())?, a.slice(ndarray::s![..p, p..]).to_owned())
    }

    /// Stored in the `PGGM` container with `n = p` rows: `Ωyy` then `Ωyx`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        write_blocks(path, self.omega_yy.view(), self.omega_yx.view())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let (yy, yx) = read_blocks(path)?;
        Self::new(SymMatrix::new(yy)?, yx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyFamily {
    /// `λ|Ωyy⁻|₁ + ρ|Ωyx|₁`
    #[default]
    ElementWise,
    /// `λ|Ωyy⁻|₁ + ρ Σⱼ ‖(Ωyx)·ⱼ‖₂`
    ColumnWise,
}

/// Penalty family and strengths; `λ` acts on the off-diagonals of `Ωyy`,
/// `ρ` on `Ωyx`. The diagonal of `Ωyy` is never penalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub family: PenaltyFamily,
    pub lambda: f64,
    pub rho: f64,
}

impl PenaltySpec {
    pub fn new(family: PenaltyFamily, lambda: f64, rho: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !(rho >= 0.0) {
            return Err(Error::InvalidArgument(format!("penalties must be non-negative, got λ = {lambda}, ρ = {rho}")));
        }
        Ok(Self { family, lambda, rho })
    }

    pub fn element_wise(lambda: f64, rho: f64) -> Result<Self> {
        Self::new(PenaltyFamily::ElementWise, lambda, rho)
    }

    pub fn column_wise(lambda: f64, rho: f64) -> Result<Self> {
        Self::new(PenaltyFamily::ColumnWise, lambda, rho)
    }

    pub fn yy_value(&self, omega_yy: ArrayView2<'_, f64>) -> f64 {
        off_diagonal_l1(omega_yy) * self.lambda
    }

    pub fn yx_value(&self, omega_yx: ArrayView2<'_, f64>) -> f64 {
        let raw: f64 = match self.family {
            PenaltyFamily::ElementWise => omega_yx.iter().map(|v| v.abs()).sum(),
            PenaltyFamily::ColumnWise => omega_yx.columns().into_iter().map(|c| c.dot(&c).sqrt()).sum(),
        };
        raw * self.rho
    }

    pub fn value(&self, theta: &BlockPrecision) -> f64 {
        self.yy_value(theta.omega_yy.view()) + self.yx_value(theta.omega_yx.view())
    }
}

fn off_diagonal_l1(a: ArrayView2<'_, f64>) -> f64 {
    let mut s = 0.0;
    for ((i, j), v) in a.indexed_iter() {
        if i != j {
            s += v.abs();
        }
    }
    s
}

/// Tolerances and line-search constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Relative change of the penalized objective over one outer cycle.
    pub outer_tol: f64,
    pub max_outer: usize,
    pub inner_tol: f64,
    /// Setting this to 1 gives single-pass alternation between the blocks.
    pub max_inner: usize,
    pub ls_shrink: f64,
    pub ls_grow: f64,
    pub min_step: f64,
    pub initial_step: f64,
    /// Barzilai–Borwein initial steps; plain backtracking ISTA when false.
    pub barzilai_borwein: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-6,
            max_outer: 100,
            inner_tol: 1e-8,
            max_inner: 200,
            ls_shrink: 0.5,
            ls_grow: 1.1,
            min_step: 1e-12,
            initial_step: 1.0,
            barzilai_borwein: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.outer_tol > 0.0) || !(self.inner_tol > 0.0) || !(self.min_step > 0.0) {
            return bad("tolerances and min_step must be > 0");
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return bad("iteration limits must be >= 1");
        }
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return bad("ls_shrink must lie in (0, 1)");
        }
        if !(self.ls_grow > 1.0) {
            return bad("ls_grow must be > 1");
        }
        if !(self.initial_step > 0.0) {
            return bad("initial_step must be > 0");
        }
        Ok(())
    }

    /// Defaults tightened for certification-grade solutions.
    pub fn tight() -> Self {
        Self { outer_tol: 1e-13, max_outer: 5000, inner_tol: 1e-14, max_inner: 1000, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: BlockPrecision,
    /// Penalized objective at the start and after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    /// Seconds.
    pub wall_time: f64,
    pub termination: Termination,
}

impl FitResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial value")
    }
}

fn check_shapes(cv: &CovarianceView, omega_yy: &SymMatrix, omega_yx: ArrayView2<'_, f64>) -> Result<()> {
    let (p, q) = (cv.p(), cv.q());
    if omega_yy.dim() != p || omega_yx.dim() != (p, q) {
        return Err(Error::DimensionMismatch(format!(
            "parameters are {}x{} / {}x{}, covariance has p = {p}, q = {q}",
            omega_yy.dim(),
            omega_yy.dim(),
            omega_yx.nrows(),
            omega_yx.ncols()
        )));
    }
    Ok(())
}

/// `W = Ωyx·Σxx·Ωyxᵀ` (`p×p`), or `None` when it vanishes.
fn coupling(cv: &CovarianceView, omega_yx: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    if omega_yx.iter().all(|&v| v == 0.0) {
        return None;
    }
    let m = cv.xx_right_multiply(omega_yx);
    Some(symmetrize(m.dot(&omega_yx.t())))
}

/// `L_pa(Ωyy, Ωyx)`.
pub fn eval_lpa(cv: &CovarianceView, theta: &BlockPrecision) -> Result<f64> {
    check_shapes(cv, &theta.omega_yy, theta.omega_yx.view())?;
    let chol = cholesky(&theta.omega_yy)?;
    let b = chol.solve(theta.omega_yx.view());
    Ok(-chol.logdet()
        + frobenius_dot(cv.syy().view(), theta.omega_yy.view())
        + 2.0 * frobenius_dot(cv.syx().view(), theta.omega_yx.view())
        + cv.xx_quadratic_trace(theta.omega_yx.view(), b.view()))
}

/// Full negative log-likelihood `−log det Ω + ⟨Σ, Ω⟩` over all `p+q` variables.
pub fn eval_full_l(cv: &CovarianceView, omega: &SymMatrix) -> Result<f64> {
    let sigma = cv.joint();
    full_objective(&sigma, omega)
}

pub(crate) fn full_objective(sigma: &SymMatrix, omega: &SymMatrix) -> Result<f64> {
    if sigma.dim() != omega.dim() {
        return Err(Error::DimensionMismatch(format!("Ω is {0}x{0}, Σ is {1}x{1}", omega.dim(), sigma.dim())));
    }
    let chol = cholesky(omega)?;
    Ok(-chol.logdet() + frobenius_dot(sigma.view(), omega.view()))
}

/// `|L(Ω) − L_pa(Ωyy, Ωyx) − H(Ω̃xx)|` with `Ω̃xx = Ωxx − Ωyxᵀ Ωyy⁻¹ Ωyx` and
/// `H(Ω̃) = −log det Ω̃ + tr(Σxx Ω̃)`.
pub fn decomposition_residual(cv: &CovarianceView, omega: &SymMatrix) -> Result<f64> {
    let (p, q) = (cv.p(), cv.q());
    if omega.dim() != p + q {
        return Err(Error::DimensionMismatch(format!("Ω must be {0}x{0}", p + q)));
    }
    let full = eval_full_l(cv, omega)?;
    let theta = BlockPrecision::from_joint(omega, p)?;
    let lpa = eval_lpa(cv, &theta)?;
    if q == 0 {
        return Ok((full - lpa).abs());
    }
    let a = omega.view();
    let chol = cholesky(&theta.omega_yy)?;
    let b = chol.solve(theta.omega_yx.view());
    let schur = SymMatrix::new(&a.slice(ndarray::s![p.., p..]) - &theta.omega_yx.t().dot(&b))?;
    let sxx = cv.materialize_xx().expect("q > 0");
    let h = -cholesky(&schur)?.logdet() + frobenius_dot(sxx.view(), schur.view());
    Ok((full - lpa - h).abs())
}

/// `F(Ωyy) = −log det Ωyy + tr(Σyy Ωyy) + tr(Σxx Ωyxᵀ Ωyy⁻¹ Ωyx)` for fixed `Ωyx`.
pub fn eval_f(cv: &CovarianceView, omega_yy: &SymMatrix, omega_yx: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(cv, omega_yy, omega_yx)?;
    let sub = YySubproblem { syy: cv.syy().view(), coupling: coupling(cv, omega_yx) };
    let pt = sub.eval(omega_yy.as_array().clone())?.ok_or(Error::NotPositiveDefinite { pivot: 0, value: f64::NAN })?;
    Ok(pt.value)
}

/// `G(Ωyx) = tr(Σxx Ωyxᵀ Ωyy⁻¹ Ωyx) + 2 tr(Σyxᵀ Ωyx)` for fixed `Ωyy`.
pub fn eval_g(cv: &CovarianceView, omega_yy: &SymMatrix, omega_yx: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(cv, omega_yy, omega_yx)?;
    let inv = cholesky(omega_yy)?.inverse().into_inner();
    let sub = YxSubproblem { cv, inv: &inv };
    Ok(sub.point(omega_yx.to_owned()).value)
}

/// `∇F(Ωyy) = −Ωyy⁻¹ + Σyy − Ωyy⁻¹ Ωyx Σxx Ωyxᵀ Ωyy⁻¹`.
pub fn grad_f(cv: &CovarianceView, omega_yy: &SymMatrix, omega_yx: ArrayView2<'_, f64>) -> Result<SymMatrix> {
    check_shapes(cv, omega_yy, omega_yx)?;
    let sub = YySubproblem { syy: cv.syy().view(), coupling: coupling(cv, omega_yx) };
    let pt = sub.eval(omega_yy.as_array().clone())?.ok_or(Error::NotPositiveDefinite { pivot: 0, value: f64::NAN })?;
    Ok(SymMatrix(sub.grad(&pt)))
}

/// `∇G(Ωyx) = 2 Ωyy⁻¹ Ωyx Σxx + 2 Σyx`.
pub fn grad_g(cv: &CovarianceView, omega_yy: &SymMatrix, omega_yx: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_shapes(cv, omega_yy, omega_yx)?;
    let inv = cholesky(omega_yy)?.inverse().into_inner();
    let sub = YxSubproblem { cv, inv: &inv };
    let pt = sub.point(omega_yx.to_owned());
    Ok(sub.grad(&pt))
}

// ---------------------------------------------------------------------------
// Ωyy block

/// `F` with `W = Ωyx Σxx Ωyxᵀ` precomputed; with `syy` the full covariance and
/// no coupling this is also the full-GGM objective.
pub(crate) struct YySubproblem<'a> {
    pub syy: ArrayView2<'a, f64>,
    pub coupling: Option<Array2<f64>>,
}

pub(crate) struct YyPoint {
    pub x: Array2<f64>,
    pub inv: Array2<f64>,
    pub logdet: f64,
    pub value: f64,
}

impl Evaluated for YyPoint {
    fn x(&self) -> &Array2<f64> {
        &self.x
    }
    fn value(&self) -> f64 {
        self.value
    }
}

impl Smooth for YySubproblem<'_> {
    type Point = YyPoint;

    fn eval(&self, x: Array2<f64>) -> Result<Option<YyPoint>> {
        let chol = match cholesky_view(x.view()) {
            Ok(c) => c,
            Err(Error::NotPositiveDefinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let logdet = chol.logdet();
        let inv = chol.inverse().into_inner();
        let mut value = -logdet + frobenius_dot(self.syy, x.view());
        if let Some(w) = &self.coupling {
            value += frobenius_dot(inv.view(), w.view());
        }
        Ok(Some(YyPoint { x, inv, logdet, value }))
    }

    fn grad(&self, pt: &YyPoint) -> Array2<f64> {
        let mut g = &self.syy - &pt.inv;
        if let Some(w) = &self.coupling {
            g -= &pt.inv.dot(w).dot(&pt.inv);
        }
        symmetrize(g)
    }
}

/// `λ·|off-diag|₁`.
pub(crate) struct OffDiagonalL1(pub f64);

impl Penalty for OffDiagonalL1 {
    fn value(&self, x: &Array2<f64>) -> f64 {
        self.0 * off_diagonal_l1(x.view())
    }

    fn prox(&self, x: &mut Array2<f64>, step: f64) {
        let t = self.0 * step;
        let n = x.nrows();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    x[[i, j]] = soft_threshold(x[[i, j]], t);
                }
            }
        }
        let sym = symmetrize(std::mem::take(x));
        *x = sym;
    }
}

// ---------------------------------------------------------------------------
// Ωyx block

pub(crate) struct YxSubproblem<'a> {
    pub cv: &'a CovarianceView,
    /// `Ωyy⁻¹`, held fixed.
    pub inv: &'a Array2<f64>,
}

/// Trial points carry their value and a partial product; the
/// `Ωyy⁻¹ Ωyx Σxx` product behind the gradient is finished for accepted
/// points alone.
pub(crate) struct YxPoint {
    pub x: Array2<f64>,
    pub value: f64,
    partial: XxPartial,
}

impl Evaluated for YxPoint {
    fn x(&self) -> &Array2<f64> {
        &self.x
    }
    fn value(&self) -> f64 {
        self.value
    }
}

impl YxSubproblem<'_> {
    fn point(&self, x: Array2<f64>) -> YxPoint {
        let (quad, partial) = self.cv.xx_weighted_parts(self.inv.view(), x.view());
        let value = quad + 2.0 * frobenius_dot(self.cv.syx().view(), x.view());
        YxPoint { x, value, partial }
    }
}

impl Smooth for YxSubproblem<'_> {
    type Point = YxPoint;

    fn eval(&self, x: Array2<f64>) -> Result<Option<YxPoint>> {
        Ok(Some(self.point(x)))
    }

    fn grad(&self, pt: &YxPoint) -> Array2<f64> {
        let scaled = self.cv.xx_sandwich_from(&pt.partial);
        2.0 * (scaled + self.cv.syx())
    }
}

pub(crate) struct YxPenalty {
    pub family: PenaltyFamily,
    pub rho: f64,
}

impl Penalty for YxPenalty {
    fn value(&self, x: &Array2<f64>) -> f64 {
        PenaltySpec { family: self.family, lambda: 0.0, rho: self.rho }.yx_value(x.view())
    }

    fn prox(&self, x: &mut Array2<f64>, step: f64) {
        let t = self.rho * step;
        if t == 0.0 {
            return;
        }
        match self.family {
            PenaltyFamily::ElementWise => x.mapv_inplace(|v| soft_threshold(v, t)),
            PenaltyFamily::ColumnWise => {
                for col in x.columns_mut() {
                    group_soft_threshold_inplace(col, t);
                }
            }
        }
    }
}

/// One backtracked proximal step on `Ωyy` with `Ωyx` fixed. Returns the
/// accepted iterate and the step that was accepted.
pub fn prox_step_yy(
    cv: &CovarianceView,
    omega_yy: &SymMatrix,
    omega_yx: ArrayView2<'_, f64>,
    pen: &PenaltySpec,
    step: f64,
    cfg: &SolverConfig,
) -> Result<(SymMatrix, f64)> {
    check_shapes(cv, omega_yy, omega_yx)?;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be > 0".into()));
    }
    let sub = YySubproblem { syy: cv.syy().view(), coupling: coupling(cv, omega_yx) };
    let cur = sub.eval(omega_yy.as_array().clone())?.ok_or(Error::NotPositiveDefinite { pivot: 0, value: f64::NAN })?;
    let g = sub.grad(&cur);
    let (next, used) = prox::backtrack(&sub, &OffDiagonalL1(pen.lambda), &cur, &g, step, cfg)?;
    Ok((SymMatrix(next.x), used))
}

/// One backtracked proximal step on `Ωyx` with `Ωyy` fixed.
pub fn prox_step_yx(
    cv: &CovarianceView,
    omega_yy: &SymMatrix,
    omega_yx: ArrayView2<'_, f64>,
    pen: &PenaltySpec,
    step: f64,
    cfg: &SolverConfig,
) -> Result<(Array2<f64>, f64)> {
    check_shapes(cv, omega_yy, omega_yx)?;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be > 0".into()));
    }
    let inv = cholesky(omega_yy)?.inverse().into_inner();
    let sub = YxSubproblem { cv, inv: &inv };
    let cur = sub.point(omega_yx.to_owned());
    let g = sub.grad(&cur);
    let (next, used) = prox::backtrack(&sub, &YxPenalty { family: pen.family, rho: pen.rho }, &cur, &g, step, cfg)?;
    Ok((next.x, used))
}

/// Which blocks [`fit_with`] updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Blocks {
    Both,
    /// `Ωyy` held at its initial value.
    YxOnly,
}

/// Minimizes `L_pa + R` by block coordinate descent from `init` (or the
/// diagonal default).
pub fn fit(
    cv: &CovarianceView,
    pen: &PenaltySpec,
    cfg: &SolverConfig,
    init: Option<&BlockPrecision>,
) -> Result<FitResult> {
    fit_with(cv, pen, cfg, init, Blocks::Both)
}

pub(crate) fn fit_with(
    cv: &CovarianceView,
    pen: &PenaltySpec,
    cfg: &SolverConfig,
    init: Option<&BlockPrecision>,
    blocks: Blocks,
) -> Result<FitResult> {
    cfg.validate()?;
    PenaltySpec::new(pen.family, pen.lambda, pen.rho)?;
    let start = Instant::now();
    let theta = match init {
        Some(t) => {
            check_shapes(cv, &t.omega_yy, t.omega_yx.view())?;
            t.clone()
        }
        None => BlockPrecision::initial(cv),
    };
    let mut omega_yy = theta.omega_yy.into_inner();
    let mut omega_yx = theta.omega_yx;
    let q = cv.q();

    let yy_pen = OffDiagonalL1(pen.lambda);
    let yx_pen = YxPenalty { family: pen.family, rho: pen.rho };
    let mut yy_step = cfg.initial_step;
    let mut yx_step = cfg.initial_step;

    let initial = BlockPrecision { omega_yy: SymMatrix(omega_yy.clone()), omega_yx: omega_yx.clone() };
    let obj0 = eval_lpa(cv, &initial)? + pen.value(&initial);
    if !obj0.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    let mut trace = vec![obj0];
    let mut inner_total = 0;
    let mut termination = Termination::MaxIters;
    let mut outer = 0;

    // Ωyy⁻¹ and the smooth Ωyy-only part −log det + tr(Σyy Ωyy).
    let mut yy_state: Option<(Array2<f64>, f64)> = None;

    while outer < cfg.max_outer {
        outer += 1;
        if blocks == Blocks::Both {
            let sub = YySubproblem { syy: cv.syy().view(), coupling: coupling(cv, omega_yx.view()) };
            let pt = sub.eval(omega_yy)?.ok_or(Error::NotPositiveDefinite { pivot: 0, value: f64::NAN })?;
            let out = prox::minimize(&sub, &yy_pen, pt, yy_step, cfg.inner_tol, cfg.max_inner, cfg, |_| {})?;
            inner_total += out.iters;
            yy_step = out.next_step;
            let base = -out.point.logdet + frobenius_dot(cv.syy().view(), out.point.x.view());
            omega_yy = out.point.x;
            yy_state = Some((out.point.inv, base));
        } else if yy_state.is_none() {
            let chol = cholesky_view(omega_yy.view())?;
            let base = -chol.logdet() + frobenius_dot(cv.syy().view(), omega_yy.view());
            yy_state = Some((chol.inverse().into_inner(), base));
        }
        let (inv, base) = yy_state.as_ref().expect("set above");

        let g_value = if q > 0 {
            let sub = YxSubproblem { cv, inv };
            let pt = sub.point(omega_yx);
            let out = prox::minimize(&sub, &yx_pen, pt, yx_step, cfg.inner_tol, cfg.max_inner, cfg, |_| {})?;
            inner_total += out.iters;
            yx_step = out.next_step;
            omega_yx = out.point.x;
            out.point.value
        } else {
            0.0
        };

        let obj = base + g_value + yy_pen.value(&omega_yy) + yx_pen.value(&omega_yx);
        if !obj.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        let prev = *trace.last().expect("non-empty");
        trace.push(obj);
        if (prev - obj).abs() <= cfg.outer_tol * prev.abs().max(1.0) {
            termination = Termination::Converged;
            break;
        }
    }

    let theta = BlockPrecision { omega_yy: SymMatrix(omega_yy), omega_yx };
    // The inner loops only ever accept Cholesky-certified iterates.
    debug_assert!(cholesky(&theta.omega_yy).is_ok());
    Ok(FitResult {
        theta,
        objective_trace: trace,
        outer_iters: outer,
        inner_iters_total: inner_total,
        wall_time: start.elapsed().as_secs_f64(),
        termination,
    })
}

/// Largest subgradient-optimality violation per block at `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    /// Over all entries of `Ωyy` (the diagonal must have zero gradient).
    pub yy: f64,
    pub yx: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.yy.max(self.yx)
    }
}

pub fn kkt_residual(cv: &CovarianceView, theta: &BlockPrecision, pen: &PenaltySpec) -> Result<KktResidual> {
    let gf = grad_f(cv, &theta.omega_yy, theta.omega_yx.view())?;
    let mut yy: f64 = 0.0;
    for ((i, j), &g) in gf.as_array().indexed_iter() {
        let w = theta.omega_yy.get(i, j);
        let r = if i == j { g.abs() } else { scalar_violation(g, w, pen.lambda) };
        yy = yy.max(r);
    }
    let mut yx: f64 = 0.0;
    if theta.q() > 0 {
        let gg = grad_g(cv, &theta.omega_yy, theta.omega_yx.view())?;
        match pen.family {
            PenaltyFamily::ElementWise => {
                for (&g, &w) in gg.iter().zip(theta.omega_yx.iter()) {
                    yx = yx.max(scalar_violation(g, w, pen.rho));
                }
            }
            PenaltyFamily::ColumnWise => {
                for (gc, wc) in gg.columns().into_iter().zip(theta.omega_yx.columns()) {
                    let norm = wc.dot(&wc).sqrt();
                    let r = if norm > 0.0 {
                        let d = &gc + &(&wc * (pen.rho / norm));
                        d.dot(&d).sqrt()
                    } else {
                        (gc.dot(&gc).sqrt() - pen.rho).max(0.0)
                    };
                    yx = yx.max(r);
                }
            }
        }
    }
    Ok(KktResidual { yy, yx })
}

fn scalar_violation(g: f64, w: f64, t: f64) -> f64 {
    if w != 0.0 {
        (g + t * w.signum()).abs()
    } else {
        (g.abs() - t).max(0.0)
    }
}
