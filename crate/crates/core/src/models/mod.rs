//! Bundled Bayesian models working in unconstrained parameter space.

mod data;
mod gaussian;
mod metropolis;
mod poisson;

pub use data::{
    gaussian_outlier_data, poisson_outlier_data, read_draws_csv, write_draws_csv, Dataset,
    PoissonDataConfig,
};
pub use gaussian::{gaussian_analytic_loo_lpd, GaussianModel, KnownVarianceGaussian};
pub use metropolis::{rw_metropolis, MetropolisConfig};
pub use poisson::{poisson_glm_logjoint, PoissonGlm};

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::Result;
use crate::estimators::DrawMatrix;

/// A model with a factorized likelihood.
///
/// All densities are in unconstrained coordinates; `log_prior` includes the
/// log Jacobian of the constraining map.
pub trait Model: Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn log_prior(&self, theta: &[f64]) -> f64;
    fn log_lik(&self, theta: &[f64], i: usize) -> f64;

    fn log_joint(&self, theta: &[f64]) -> f64 {
        self.log_prior(theta) + (0..self.n_obs()).map(|i| self.log_lik(theta, i)).sum::<f64>()
    }

    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }

    fn unconstrain(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }

    /// Draws from the posterior given all data, or all data but observation
    /// `exclude`.
    fn sample_posterior(&self, s: usize, seed: u64, exclude: Option<usize>) -> Result<DrawMatrix>;
}

/// Log joint density at every draw.
pub fn log_joint_at<M: Model + ?Sized>(model: &M, draws: &DrawMatrix) -> Vec<f64> {
    draws.rows().map(|r| model.log_joint(r.as_slice().expect("standard layout"))).collect()
}

/// Pointwise log likelihood, draws by observations.
pub fn log_lik_matrix<M: Model + ?Sized>(model: &M, draws: &DrawMatrix) -> Array2<f64> {
    let n = model.n_obs();
    let rows: Vec<Vec<f64>> = (0..draws.n_draws())
        .into_par_iter()
        .map(|s| {
            let theta = draws.row(s).to_vec();
            (0..n).map(|i| model.log_lik(&theta, i)).collect()
        })
        .collect();
    Array2::from_shape_fn((draws.n_draws(), n), |(s, i)| rows[s][i])
}

/// Log likelihood of one observation at every draw.
pub fn log_lik_column<M: Model + ?Sized>(model: &M, draws: &DrawMatrix, i: usize) -> Vec<f64> {
    draws.rows().map(|r| model.log_lik(r.as_slice().expect("standard layout"), i)).collect()
}
