//! Estimation and support-recovery metrics, link extraction, and the
//! noise-level diagnostics that drive the error bound of the estimator.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceView;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, extreme_eigenvalues_view, max_abs, spectral_norm, symmetrize, SymMatrix};
use crate::solver::{eval_lpa, BlockPrecision, PenaltySpec};
use crate::synthetic::GroundTruth;

/// Norms of one difference matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub frob: f64,
    pub spectral: f64,
    /// Largest column absolute sum.
    pub mat_l1: f64,
}

impl Norms {
    pub fn of(a: ArrayView2<'_, f64>) -> Self {
        let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mat_l1 = a.columns().into_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        Self { frob, spectral: spectral_norm(a), mat_l1 }
    }
}

/// Norms of `Θ̂ − Θ*` as one `p×(p+q)` matrix, and of each block separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormLosses {
    pub total: Norms,
    pub yy: Norms,
    pub yx: Norms,
}

pub fn norm_losses(est: &BlockPrecision, truth: &BlockPrecision) -> Result<NormLosses> {
    if est.p() != truth.p() || est.q() != truth.q() {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {}x{}, truth is {}x{}",
            est.p(),
            est.q(),
            truth.p(),
            truth.q()
        )));
    }
    let diff = est.stacked() - truth.stacked();
    let p = est.p();
    Ok(NormLosses {
        total: Norms::of(diff.view()),
        yy: Norms::of(diff.slice(s![.., ..p])),
        yx: Norms::of(diff.slice(s![.., p..])),
    })
}

/// Nonzero patterns of `(Ωyy, Ωyx)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    pub yy: Array2<bool>,
    pub yx: Array2<bool>,
}

impl SupportMask {
    /// Off-diagonal `yy` pairs counted once (`i < j`) plus all `yx` entries.
    pub fn edge_count(&self) -> usize {
        let yy = self.yy.indexed_iter().filter(|((i, j), &b)| i < j && b).count();
        yy + self.yx.iter().filter(|&&b| b).count()
    }
}

/// Entries with `|value| > tol`.
pub fn support_of(theta: &BlockPrecision, tol: f64) -> Result<SupportMask> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be >= 0, got {tol}")));
    }
    Ok(SupportMask {
        yy: theta.omega_yy().as_array().mapv(|v| v.abs() > tol),
        yx: theta.omega_yx().mapv(|v| v.abs() > tol),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Precision, recall and F-score over the upper-triangle off-diagonal `yy`
/// entries and all `yx` entries. Every ratio with a zero denominator, and the
/// F-score whenever `TP = 0`, is reported as 0.
pub fn support_fscore(est: &SupportMask, truth: &SupportMask) -> Result<SupportScore> {
    if est.yy.dim() != truth.yy.dim() || est.yx.dim() != truth.yx.dim() {
        return Err(Error::DimensionMismatch("support masks differ in shape".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut count = |e: bool, t: bool| match (e, t) {
        (true, true) => tp += 1,
        (true, false) => fp += 1,
        (false, true) => fn_ += 1,
        (false, false) => {}
    };
    for ((i, j), &e) in est.yy.indexed_iter() {
        if i < j {
            count(e, truth.yy[[i, j]]);
        }
    }
    for (&e, &t) in est.yx.iter().zip(truth.yx.iter()) {
        count(e, t);
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fn_);
    let fscore = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(SupportScore { precision, recall, fscore, tp, fp, fn_ })
}

/// An off-diagonal entry of `Ω̂yy` with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// All pairs `i < j` with `|Ωyy_ij| ≥ μ`, by decreasing magnitude and then
/// by `(i, j)`. Only the upper triangle is read.
pub fn links_above(omega_yy: &SymMatrix, mu: f64) -> Result<Vec<Link>> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("μ must be > 0, got {mu}")));
    }
    let a = omega_yy.as_array();
    let d = a.nrows();
    let mut links = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            let w = a[[i, j]];
            if w.abs() >= mu {
                links.push(Link { i, j, weight: w });
            }
        }
    }
    links.sort_by(|x, y| y.weight.abs().total_cmp(&x.weight.abs()).then((x.i, x.j).cmp(&(y.i, y.j))));
    Ok(links)
}

/// Fraction of the first `min(k, links.len())` links joining two nodes of the
/// same category; 0 when there are no links.
pub fn topk_link_precision(links: &[Link], labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let head = &links[..k.min(links.len())];
    if head.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for l in head {
        let (a, b) = match (labels.get(l.i), labels.get(l.j)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::DimensionMismatch(format!(
                    "link ({}, {}) outside {} labels",
                    l.i,
                    l.j,
                    labels.len()
                )))
            }
        };
        hits += usize::from(a == b);
    }
    Ok(hits as f64 / head.len() as f64)
}

/// `L_pa` of `theta` on held-out moments.
pub fn test_objective(cv_test: &CovarianceView, theta: &BlockPrecision) -> Result<f64> {
    eval_lpa(cv_test, theta)
}

/// One row of an evaluation table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frob: f64,
    pub spectral: f64,
    pub mat_l1: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub runtime: f64,
}

impl MetricsReport {
    pub fn new(losses: &NormLosses, score: &SupportScore, runtime: f64) -> Self {
        Self {
            frob: losses.total.frob,
            spectral: losses.total.spectral,
            mat_l1: losses.total.mat_l1,
            fscore: score.fscore,
            precision: score.precision,
            recall: score.recall,
            runtime,
        }
    }
}

/// Mean and standard error of the mean (0 for fewer than two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Self { mean, se, count: n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryDiagnostics {
    pub a_n: Array2<f64>,
    pub b_n: Array2<f64>,
    pub gamma_n: f64,
    /// `|S_yy ∪ S_yx|` with the `yy` diagonal included.
    pub support_size: usize,
    pub alpha: f64,
    /// `c₀ = max(λ, ρ)/γ_n`, raised to at least 2.
    pub c0: f64,
    pub delta_n: f64,
    pub rho_minus: f64,
    pub rho_plus: f64,
    pub beta0: f64,
    pub r0: f64,
    pub gamma0: f64,
}

/// Scalar part of [`TheoryDiagnostics`], for tabular output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub gamma_n: f64,
    pub a_inf: f64,
    pub b_inf: f64,
    pub support_size: usize,
    pub alpha: f64,
    pub c0: f64,
    pub delta_n: f64,
    pub rho_minus: f64,
    pub rho_plus: f64,
    pub beta0: f64,
    pub r0: f64,
    pub gamma0: f64,
}

impl TheoryDiagnostics {
    pub fn row(&self) -> DiagnosticsRow {
        DiagnosticsRow {
            gamma_n: self.gamma_n,
            a_inf: max_abs(self.a_n.view()),
            b_inf: max_abs(self.b_n.view()),
            support_size: self.support_size,
            alpha: self.alpha,
            c0: self.c0,
            delta_n: self.delta_n,
            rho_minus: self.rho_minus,
            rho_plus: self.rho_plus,
            beta0: self.beta0,
            r0: self.r0,
            gamma0: self.gamma0,
        }
    }
}

fn sym_extremes(a: Array2<f64>) -> (f64, f64) {
    if a.is_empty() {
        return (f64::INFINITY, 0.0);
    }
    extreme_eigenvalues_view(symmetrize(a).view())
}

/// Effective noise `A_n`, `B_n` of the sample moments around the truth, and
/// the closed-form curvature and radius constants of the error bound at the
/// penalties `pen`. `cv` must share the truth's dimensions.
pub fn theory_diagnostics(gt: &GroundTruth, cv: &CovarianceView, pen: &PenaltySpec) -> Result<TheoryDiagnostics> {
    let (p, q) = (gt.p(), gt.q());
    if cv.p() != p || cv.q() != q {
        return Err(Error::DimensionMismatch(format!("moments are {}+{}, truth is {p}+{q}", cv.p(), cv.q())));
    }
    let star = gt.sigma_star.view();
    let s_yy = star.slice(s![..p, ..p]);
    let s_yx = star.slice(s![..p, p..]);
    let s_xx = star.slice(s![p.., p..]);
    let sn_xx = if q == 0 { Array2::zeros((0, 0)) } else { cv.materialize_xx().expect("q > 0").into_inner() };
    let omega_yy = gt.theta_star.omega_yy();
    let omega_yx = gt.theta_star.omega_yx();
    let chol = cholesky(omega_yy)?;
    // Ξ = Ω*yy⁻¹ Ω*yx
    let xi = chol.solve(omega_yx.view());
    let dxx = &sn_xx - &s_xx;
    let xi_dxx = xi.dot(&dxx);
    let a_n = cv.syy().as_array() - &s_yy - xi_dxx.dot(&xi.t());
    let b_n = (cv.syx() - &s_yx + &xi_dxx) * 2.0;
    let gamma_n = max_abs(a_n.view()).max(max_abs(b_n.view()));

    let support_size = gt.support_yy.iter().filter(|&&b| b).count() + gt.support_yx.iter().filter(|&&b| b).count();
    let (lam, rho) = (pen.lambda, pen.rho);
    let alpha = 3.0 * lam.max(rho) / lam.min(rho);
    let c0 = if gamma_n > 0.0 { (lam.max(rho) / gamma_n).max(2.0) } else { 2.0 };
    // c₀·γ_n evaluated without dividing by γ_n.
    let c0_gamma = (2.0 * gamma_n).max(lam.max(rho));

    let (oyy_min, oyy_max) = extreme_eigenvalues_view(omega_yy.view());
    let (sxx_min, sxx_max) = sym_extremes(s_xx.to_owned());
    let coupling = omega_yx.dot(&s_xx).dot(&omega_yx.t());
    let (_, coupling_max) = sym_extremes(coupling);
    let coupling_max = coupling_max.max(0.0);
    let rho_minus = 0.5 * (1.0 / oyy_max).min(sxx_min);
    let rho_plus = 1.5 * sxx_max;
    let beta0 = rho_minus / (40.0 * oyy_max) * 2.0f64.min(3.0 * oyy_min / (8.0 * coupling_max));
    let r0 = (0.5 * oyy_min).min(0.13 * (coupling_max / rho_plus).sqrt());
    let inner = xi.dot(&s_xx).dot(&xi.t());
    let max_sigma = star.diag().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_inner = inner.diag().iter().cloned().fold(0.0, f64::max);
    let gamma0 = 16.0 * (max_sigma + max_inner);
    let delta_n = 1.5 * c0_gamma * (support_size as f64).sqrt() / beta0;

    Ok(TheoryDiagnostics {
        a_n,
        b_n,
        gamma_n,
        support_size,
        alpha,
        c0,
        delta_n,
        rho_minus,
        rho_plus,
        beta0,
        r0,
        gamma0,
    })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of an empty slice");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
