//! Synthetic ground truth with sparse `Ω*yy`, `Ω*yx` and dense `Ω*xx`, and
//! Gaussian sampling from it.
//!
//! `Ω̃* = M + σI` where `M` is a symmetric 0/1 matrix with Bernoulli
//! off-diagonals, `σ` fixes `cond(Ω̃*)`, and `Ω* = Ω̃* + [0 0; 0 11ᵀ]`.
//! By default `Ω̃*` is divided by `σ` first, giving it a unit diagonal; this
//! keeps the condition number and brings losses to the usual unit scale.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::FullPrecision;
use crate::covariance::{read_blocks, write_blocks, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, extreme_eigenvalues, SymMatrix};
use crate::solver::BlockPrecision;

/// Redraws allowed when `Ω*` fails the positive-definiteness check.
pub const MAX_REDRAWS: u32 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub edge_prob: f64,
    /// Condition number of `Ω̃*`, before the all-ones block is added.
    pub target_condition: f64,
    pub seed: u64,
    /// Rescale `Ω̃*` to unit diagonal before adding the all-ones block.
    #[serde(default = "default_unit_diagonal")]
    pub unit_diagonal: bool,
}

fn default_unit_diagonal() -> bool {
    true
}

impl SyntheticSpec {
    /// `edge_prob = 0.1`, `target_condition = p + q`, unit-diagonal `Ω̃*`.
    pub fn new(n: usize, p: usize, q: usize, seed: u64) -> Self {
        Self { n, p, q, edge_prob: 0.1, target_condition: (p + q) as f64, seed, unit_diagonal: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidArgument("p must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::InvalidArgument(format!("edge_prob must be in [0, 1], got {}", self.edge_prob)));
        }
        if !(self.target_condition > 1.0) || !self.target_condition.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "target_condition must be a finite value > 1, got {}",
                self.target_condition
            )));
        }
        if self.edge_prob == 0.0 {
            // M = 0 makes every eigenvalue of M + σI equal.
            return Err(Error::Infeasible(format!(
                "edge_prob = 0 gives condition number 1, cannot reach {}",
                self.target_condition
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub omega_star: FullPrecision,
    pub theta_star: BlockPrecision,
    pub sigma_star: SymMatrix,
    /// Nonzero pattern of `Ω*yy`, diagonal included.
    pub support_yy: Array2<bool>,
    pub support_yx: Array2<bool>,
}

/// Summary numbers describing how a [`GroundTruth`] was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthInfo {
    pub spec: SyntheticSpec,
    pub sigma_shift: f64,
    pub condition_before: f64,
    pub condition_after: f64,
    /// 0 when the first draw was accepted.
    pub redraws: u32,
    pub density_yy: f64,
    pub density_yx: f64,
}

impl GroundTruth {
    /// Reconstructs all derived quantities from `Ω*` split after `p`.
    pub fn from_omega(omega: SymMatrix, p: usize) -> Result<Self> {
        let theta_star = BlockPrecision::from_joint(&omega, p)?;
        let sigma_star = cholesky(&omega)?.inverse();
        let support_yy = theta_star.omega_yy().as_array().mapv(|v| v != 0.0);
        let support_yx = theta_star.omega_yx().mapv(|v| v != 0.0);
        Ok(Self { omega_star: FullPrecision::new(omega)?, theta_star, sigma_star, support_yy, support_yx })
    }

    pub fn p(&self) -> usize {
        self.theta_star.p()
    }

    pub fn q(&self) -> usize {
        self.theta_star.q()
    }

    /// Stores `Ω*` as a `PGGM` container with its columns split after `p`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let om = self.omega_star.omega().view();
        let p = self.p();
        write_blocks(path, om.slice(s![.., ..p]), om.slice(s![.., p..]))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let (a, b) = read_blocks(path)?;
        let p = a.ncols();
        let omega = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("rows match");
        if omega.nrows() != omega.ncols() {
            return Err(Error::Format(format!("ground truth is {}x{}, expected square", omega.nrows(), omega.ncols())));
        }
        Self::from_omega(SymMatrix::new(omega)?, p)
    }
}

/// Mixes a base seed with an index into an independent 64-bit seed
/// (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shift `σ` with `(λmax + σ)/(λmin + σ) = κ`.
fn shift_for_condition(lmin: f64, lmax: f64, kappa: f64) -> f64 {
    (lmax - kappa * lmin) / (kappa - 1.0)
}

fn adjacency(d: usize, prob: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::zeros((d, d));
    for i in 0..d {
        for j in i + 1..d {
            if rng.random_bool(prob) {
                m[[i, j]] = 1.0;
                m[[j, i]] = 1.0;
            }
        }
    }
    m
}

fn fraction(mask: ndarray::ArrayView2<'_, bool>, skip_diag: bool) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((i, j), &b) in mask.indexed_iter() {
        if skip_diag && i == j {
            continue;
        }
        total += 1;
        hits += usize::from(b);
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn generate_truth(spec: &SyntheticSpec) -> Result<(GroundTruth, TruthInfo)> {
    spec.validate()?;
    let (p, q) = (spec.p, spec.q);
    let d = p + q;
    for attempt in 0..MAX_REDRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::from(attempt)));
        let mut m = adjacency(d, spec.edge_prob, &mut rng);
        let (lmin, lmax) = extreme_eigenvalues(&SymMatrix(m.clone()));
        if !(lmax - lmin > 1e-12 * lmax.abs().max(1.0)) {
            // Empty graph: no shift reaches the target.
            continue;
        }
        let sigma = shift_for_condition(lmin, lmax, spec.target_condition);
        m.diag_mut().fill(sigma);
        if spec.unit_diagonal {
            m /= sigma;
        }
        let tilde = SymMatrix(m);
        let (tmin, tmax) = extreme_eigenvalues(&tilde);
        let condition_before = tmax / tmin;
        let mut omega = tilde.into_inner();
        omega.slice_mut(s![p.., p..]).mapv_inplace(|v| v + 1.0);
        let omega = SymMatrix(omega);
        if cholesky(&omega).is_err() {
            continue;
        }
        let (amin, amax) = extreme_eigenvalues(&omega);
        let gt = GroundTruth::from_omega(omega, p)?;
        let info = TruthInfo {
            spec: spec.clone(),
            sigma_shift: sigma,
            condition_before,
            condition_after: amax / amin,
            redraws: attempt,
            density_yy: fraction(gt.support_yy.view(), true),
            density_yx: fraction(gt.support_yx.view(), false),
        };
        return Ok((gt, info));
    }
    Err(Error::RetryExhausted { attempts: MAX_REDRAWS as usize })
}

/// `n` draws `z = L g`, `LLᵀ = Σ*`, with `g` standard normal from a ChaCha8
/// stream keyed by `seed`. The first `p` coordinates form `Y`.
pub fn sample_dataset(gt: &GroundTruth, n: usize, seed: u64) -> Result<Dataset> {
    let chol = cholesky(&gt.sigma_star)?;
    let d = gt.sigma_star.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    let z = g.dot(&chol.lower().t());
    let p = gt.p();
    Dataset::new(z.slice(s![.., ..p]).to_owned(), z.slice(s![.., p..]).to_owned())
}

/// Train, validation and test samples for one replication.
#[derive(Debug, Clone)]
pub struct Replication {
    pub truth: GroundTruth,
    pub info: TruthInfo,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Seeds for each part of replication `index` under base seed `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationSeeds {
    pub truth: u64,
    pub train: u64,
    pub validation: u64,
    pub test: u64,
}

impl ReplicationSeeds {
    pub fn derive(base: u64, index: u64) -> Self {
        let root = derive_seed(base, index);
        Self {
            truth: derive_seed(root, 0),
            train: derive_seed(root, 1),
            validation: derive_seed(root, 2),
            test: derive_seed(root, 3),
        }
    }
}

/// A fresh truth plus three independent samples of `spec.n` rows each.
pub fn replicate(spec: &SyntheticSpec, seeds: ReplicationSeeds) -> Result<Replication> {
    let truth_spec = SyntheticSpec { seed: seeds.truth, ..spec.clone() };
    let (truth, info) = generate_truth(&truth_spec)?;
    let train = sample_dataset(&truth, spec.n, seeds.train)?;
    let validation = sample_dataset(&truth, spec.n, seeds.validation)?;
    let test = sample_dataset(&truth, spec.n, seeds.test)?;
    Ok(Replication { truth, info, train, validation, test })
}
