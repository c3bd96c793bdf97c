#![allow(dead_code)]

use ndarray::Array2;
use pggm::{BlockPrecision, CovarianceMode, CovarianceView, Dataset, SymMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// `AAᵀ/d + shift·I`.
pub fn random_pd(rng: &mut ChaCha8Rng, d: usize, shift: f64) -> SymMatrix {
    let a = gaussian(rng, d, d);
    let mut m = a.dot(&a.t()) / d as f64;
    for i in 0..d {
        m[[i, i]] += shift;
    }
    SymMatrix::new(m).unwrap()
}

pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize, q: usize) -> Dataset {
    // Mildly correlated columns so the blocks interact.
    let d = p + q;
    let z = gaussian(rng, n, d);
    let mix = gaussian(rng, d, d) * 0.4 + Array2::<f64>::eye(d);
    let joint = z.dot(&mix);
    let y = joint.slice(ndarray::s![.., ..p]).to_owned();
    let x = joint.slice(ndarray::s![.., p..]).to_owned();
    Dataset::new(y, x).unwrap()
}

pub fn random_cv(rng: &mut ChaCha8Rng, n: usize, p: usize, q: usize, mode: CovarianceMode) -> CovarianceView {
    CovarianceView::from_dataset(&random_dataset(rng, n, p, q), mode)
}

/// A feasible point: `Ωyy` PD, `Ωyx` dense.
pub fn random_theta(rng: &mut ChaCha8Rng, p: usize, q: usize) -> BlockPrecision {
    let yy = random_pd(rng, p, 0.5);
    let yx = gaussian(rng, p, q) * 0.3;
    BlockPrecision::new(yy, yx).unwrap()
}

pub fn to_na(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
