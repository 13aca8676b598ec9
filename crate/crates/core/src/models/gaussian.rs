use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use super::Model;
use crate::error::{Error, Result};
use crate::estimators::DrawMatrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn mean_and_ss(y: impl Iterator<Item = f64> + Clone) -> (usize, f64, f64) {
    let (n, sum) = y.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let ss = y.map(|v| (v - mean).powi(2)).sum();
    (n, mean, ss)
}

/// Normal observations with unknown mean and scale, flat prior on
/// `(mu, log sigma)`. Parameters are `(mu, log sigma)`.
#[derive(Clone, Debug)]
pub struct GaussianModel {
    y: Vec<f64>,
    mean: f64,
    ss: f64,
}

impl GaussianModel {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::Data("need at least two observations".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite observation".into()));
        }
        let (_, mean, ss) = mean_and_ss(y.iter().copied());
        Ok(Self { y, mean, ss })
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    fn stats(&self, exclude: Option<usize>) -> (usize, f64, f64) {
        match exclude {
            None => (self.y.len(), self.mean, self.ss),
            Some(i) => mean_and_ss(self.y.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v)),
        }
    }
}

impl Model for GaussianModel {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn dim(&self) -> usize {
        2
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu".into(), "log_sigma".into()]
    }

    fn log_prior(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn log_lik(&self, theta: &[f64], i: usize) -> f64 {
        let (mu, ls) = (theta[0], theta[1]);
        let z = (self.y[i] - mu) * (-ls).exp();
        -0.5 * LN_2PI - ls - 0.5 * z * z
    }

    fn log_joint(&self, theta: &[f64]) -> f64 {
        let (mu, ls) = (theta[0], theta[1]);
        let n = self.y.len() as f64;
        let sq = self.ss + n * (self.mean - mu).powi(2);
        -0.5 * n * LN_2PI - n * ls - 0.5 * sq * (-2.0 * ls).exp()
    }

    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        vec![theta[0], theta[1].exp()]
    }

    fn unconstrain(&self, theta: &[f64]) -> Vec<f64> {
        vec![theta[0], theta[1].ln()]
    }

    /// `sigma^2 = SS / chi2(n-1)`, `mu | sigma ~ N(ybar, sigma^2 / n)`.
    fn sample_posterior(&self, s: usize, seed: u64, exclude: Option<usize>) -> Result<DrawMatrix> {
        let (n, mean, ss) = self.stats(exclude);
        if n < 3 {
            return Err(Error::Data("posterior is improper with fewer than three observations".into()));
        }
        if !(ss > 0.0) {
            return Err(Error::Data("observations have zero variance".into()));
        }
        let chi = ChiSquared::new((n - 1) as f64).map_err(|e| Error::Sampler(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(2 * s);
        for _ in 0..s {
            let sigma2 = ss / chi.sample(&mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(mean + z * (sigma2 / n as f64).sqrt());
            out.push(0.5 * sigma2.ln());
        }
        DrawMatrix::new(ndarray::Array2::from_shape_vec((s, 2), out).expect("shape"))
    }
}

/// Log predictive density of `y[i]` given the other observations under the
/// flat prior: Student-t with `m - 1` degrees of freedom, location
/// `mean(y_-i)` and scale `sqrt(1 + 1/m) sd(y_-i)`.
pub fn gaussian_analytic_loo_lpd(y: &[f64], i: usize) -> Result<f64> {
    if i >= y.len() {
        return Err(Error::InvalidArgument(format!("observation {i} out of range")));
    }
    let (m, mean, ss) = mean_and_ss(y.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v));
    if m < 3 || !(ss > 0.0) {
        return Err(Error::Data("degenerate leave-one-out set".into()));
    }
    let mf = m as f64;
    let nu = mf - 1.0;
    let scale = (1.0 + 1.0 / mf).sqrt() * (ss / (mf - 1.0)).sqrt();
    let z = (y[i] - mean) / scale;
    Ok(ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - scale.ln()
        - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p())
}

/// Normal observations with known scale and flat prior on the mean.
#[derive(Clone, Debug)]
pub struct KnownVarianceGaussian {
    y: Vec<f64>,
    sigma: f64,
}

impl KnownVarianceGaussian {
    pub fn new(y: Vec<f64>, sigma: f64) -> Result<Self> {
        if y.is_empty() || !(sigma > 0.0) {
            return Err(Error::Data("need observations and a positive scale".into()));
        }
        Ok(Self { y, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Posterior mean and standard deviation, optionally leaving one out.
    pub fn posterior(&self, exclude: Option<usize>) -> (f64, f64) {
        let (n, sum) = self
            .y
            .iter()
            .enumerate()
            .filter(|&(j, _)| Some(j) != exclude)
            .fold((0usize, 0.0), |(n, s), (_, v)| (n + 1, s + v));
        (sum / n as f64, self.sigma / (n as f64).sqrt())
    }

    /// Exact log predictive density of `y[i]` given the rest.
    pub fn analytic_loo_lpd(&self, i: usize) -> f64 {
        let (m, sd) = self.posterior(Some(i));
        let scale = (self.sigma * self.sigma + sd * sd).sqrt();
        let z = (self.y[i] - m) / scale;
        -0.5 * LN_2PI - scale.ln() - 0.5 * z * z
    }
}

impl Model for KnownVarianceGaussian {
    fn name(&self) -> &'static str {
        "gaussian_known_variance"
    }

    fn dim(&self) -> usize {
        1
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu".into()]
    }

    fn log_prior(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn log_lik(&self, theta: &[f64], i: usize) -> f64 {
        let z = (self.y[i] - theta[0]) / self.sigma;
        -0.5 * LN_2PI - self.sigma.ln() - 0.5 * z * z
    }

    fn sample_posterior(&self, s: usize, seed: u64, exclude: Option<usize>) -> Result<DrawMatrix> {
        let (m, sd) = self.posterior(exclude);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..s)
            .map(|_| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        DrawMatrix::new(ndarray::Array2::from_shape_vec((s, 1), v).expect("shape"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn data() -> Vec<f64> {
        vec![0.3, -1.2, 0.8, 2.1, -0.4, 0.0, 1.1, -0.9]
    }

    #[test]
    fn sufficient_statistics_match_pointwise_sum() {
        let m = GaussianModel::new(data()).unwrap();
        for theta in [[0.1, 0.2], [-1.0, -0.5], [2.0, 1.3]] {
            let direct: f64 = (0..m.n_obs()).map(|i| m.log_lik(&theta, i)).sum();
            assert_relative_eq!(m.log_joint(&theta), direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn analytic_loo_centered_and_symmetric() {
        // y_i at the mean of the others: t density at its mode
        let mut y = vec![-1.0, 1.0, -2.0, 2.0, 0.5, -0.5];
        y.push(0.0);
        let i = y.len() - 1;
        let lpd = gaussian_analytic_loo_lpd(&y, i).unwrap();
        let (m, _, ss) = mean_and_ss(y[..i].iter().copied());
        let mf = m as f64;
        let nu = mf - 1.0;
        let scale = (1.0 + 1.0 / mf).sqrt() * (ss / nu).sqrt();
        let mode = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln() - scale.ln();
        assert_relative_eq!(lpd, mode, max_relative = 1e-12);

        let mut z = y.clone();
        z[i] = 3.0;
        let a = gaussian_analytic_loo_lpd(&z, i).unwrap();
        z[i] = -3.0;
        let b = gaussian_analytic_loo_lpd(&z, i).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn exact_sampler_is_deterministic_and_centered() {
        let y: Vec<f64> = (0..200).map(|i| ((i * 7919) % 113) as f64 / 30.0).collect();
        let m = GaussianModel::new(y.clone()).unwrap();
        let a = m.sample_posterior(20_000, 4, None).unwrap();
        assert_eq!(a, m.sample_posterior(20_000, 4, None).unwrap());
        let mean_mu = a.column_means()[0];
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean_mu - ybar).abs() < 0.02);
        assert!(GaussianModel::new(vec![1.0; 5]).unwrap().sample_posterior(10, 0, None).is_err());
        assert!(GaussianModel::new(vec![1.0, 2.0]).unwrap().sample_posterior(10, 0, None).is_err());
    }

    #[test]
    fn constrain_round_trip() {
        let m = GaussianModel::new(data()).unwrap();
        let t = [0.7, -1.3];
        let back = m.unconstrain(&m.constrain(&t));
        assert!((back[0] - t[0]).abs() < 1e-12 && (back[1] - t[1]).abs() < 1e-12);
    }

    #[test]
    fn known_variance_predictive() {
        let m = KnownVarianceGaussian::new(data(), 1.5).unwrap();
        let (mu, sd) = m.posterior(Some(2));
        let y = data();
        let others: Vec<f64> = y.iter().enumerate().filter(|&(j, _)| j != 2).map(|(_, &v)| v).collect();
        assert_relative_eq!(mu, others.iter().sum::<f64>() / 7.0, max_relative = 1e-14);
        assert_relative_eq!(sd, 1.5 / 7f64.sqrt(), max_relative = 1e-14);
        let s2 = 1.5f64.powi(2) * (1.0 + 1.0 / 7.0);
        let expect = -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (y[2] - mu).powi(2) / (2.0 * s2);
        assert_relative_eq!(m.analytic_loo_lpd(2), expect, max_relative = 1e-12);
    }
}
