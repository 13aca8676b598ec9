use ndarray::Array2;
use statrs::function::factorial::ln_factorial;

use super::{Dataset, MetropolisConfig, Model, rw_metropolis};
use crate::error::{Error, Result};
use crate::estimators::DrawMatrix;
use crate::linalg::{cholesky, lower_inverse};

const ETA_CLAMP: f64 = 500.0;

/// Poisson regression with log link, offset and flat prior on the coefficients.
#[derive(Clone, Debug)]
pub struct PoissonGlm {
    y: Vec<f64>,
    x: Array2<f64>,
    offset: Vec<f64>,
    log_fact: Vec<f64>,
}

impl PoissonGlm {
    pub fn new(data: &Dataset) -> Result<Self> {
        let x = data.x.clone().ok_or_else(|| Error::Data("Poisson model needs a design matrix".into()))?;
        let n = data.y.len();
        if x.nrows() != n {
            return Err(Error::LengthMismatch { expected: n, got: x.nrows() });
        }
        if data.y.iter().any(|&v| !(v >= 0.0) || v.fract() != 0.0) {
            return Err(Error::Data("counts must be nonnegative integers".into()));
        }
        let offset = data.offset.clone().unwrap_or_else(|| vec![0.0; n]);
        if offset.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: offset.len() });
        }
        let log_fact = data.y.iter().map(|&v| ln_factorial(v as u64)).collect();
        Ok(Self { y: data.y.clone(), x, offset, log_fact })
    }

    fn eta(&self, beta: &[f64], i: usize) -> f64 {
        self.offset[i] + self.x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
    }

    fn clamped_eta(&self, beta: &[f64], i: usize) -> f64 {
        self.eta(beta, i).clamp(-ETA_CLAMP, ETA_CLAMP)
    }

    /// Gradient of the log joint, optionally leaving one observation out.
    pub fn gradient(&self, beta: &[f64], exclude: Option<usize>) -> Vec<f64> {
        let mut g = vec![0.0; beta.len()];
        for i in (0..self.y.len()).filter(|&i| Some(i) != exclude) {
            let r = self.y[i] - self.clamped_eta(beta, i).exp();
            for (gj, xj) in g.iter_mut().zip(self.x.row(i)) {
                *gj += r * xj;
            }
        }
        g
    }

    /// Negative Hessian `X' diag(mu) X`.
    fn neg_hessian(&self, beta: &[f64], exclude: Option<usize>) -> Array2<f64> {
        let p = beta.len();
        let mut h = Array2::<f64>::zeros((p, p));
        for i in (0..self.y.len()).filter(|&i| Some(i) != exclude) {
            let mu = self.clamped_eta(beta, i).exp();
            let row = self.x.row(i);
            for a in 0..p {
                for b in 0..p {
                    h[[a, b]] += mu * row[a] * row[b];
                }
            }
        }
        h
    }

    fn log_joint_excluding(&self, beta: &[f64], exclude: Option<usize>) -> f64 {
        (0..self.y.len()).filter(|&i| Some(i) != exclude).map(|i| self.log_lik(beta, i)).sum()
    }

    /// Posterior mode by damped Newton iterations, with the inverse negative
    /// Hessian there.
    pub fn map_estimate(&self, exclude: Option<usize>) -> Result<(Vec<f64>, Array2<f64>)> {
        let p = self.x.ncols();
        let mut beta = vec![0.0; p];
        let n = (self.y.len() - usize::from(exclude.is_some())) as f64;
        let ybar = (0..self.y.len()).filter(|&i| Some(i) != exclude).map(|i| self.y[i]).sum::<f64>() / n;
        if self.x.column(0).iter().all(|&v| v == 1.0) {
            let off = (0..self.y.len()).filter(|&i| Some(i) != exclude).map(|i| self.offset[i]).sum::<f64>() / n;
            beta[0] = (ybar.max(0.5)).ln() - off;
        }
        let mut lp = self.log_joint_excluding(&beta, exclude);
        for _ in 0..200 {
            let g = self.gradient(&beta, exclude);
            let h = self.neg_hessian(&beta, exclude);
            let l = cholesky(&h).ok_or_else(|| Error::Model("design matrix is rank deficient".into()))?;
            let li = lower_inverse(&l);
            let step = li.t().dot(&li.dot(&ndarray::Array1::from(g.clone())));
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..50 {
                let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
                let lc = self.log_joint_excluding(&cand, exclude);
                if lc >= lp {
                    beta = cand;
                    lp = lc;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !improved || gnorm < 1e-9 * (1.0 + lp.abs()) {
                break;
            }
        }
        let h = self.neg_hessian(&beta, exclude);
        let l = cholesky(&h).ok_or_else(|| Error::Model("Hessian not positive definite at the mode".into()))?;
        let li = lower_inverse(&l);
        Ok((beta, li.t().dot(&li)))
    }
}

impl Model for PoissonGlm {
    fn name(&self) -> &'static str {
        "poisson_glm"
    }

    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn param_names(&self) -> Vec<String> {
        (1..=self.x.ncols()).map(|j| format!("beta{j}")).collect()
    }

    fn log_prior(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn log_lik(&self, theta: &[f64], i: usize) -> f64 {
        let eta = self.clamped_eta(theta, i);
        self.y[i] * eta - eta.exp() - self.log_fact[i]
    }

    fn sample_posterior(&self, s: usize, seed: u64, exclude: Option<usize>) -> Result<DrawMatrix> {
        let (mode, cov) = self.map_estimate(exclude)?;
        let mut cfg = MetropolisConfig::new(mode);
        cfg.init_cov = Some(cov);
        rw_metropolis(|b| self.log_joint_excluding(b, exclude), s, seed, &cfg)
    }
}

/// Log joint of the Poisson regression; fails when a linear predictor leaves
/// `[-500, 500]`.
pub fn poisson_glm_logjoint(beta: &[f64], data: &Dataset) -> Result<f64> {
    let model = PoissonGlm::new(data)?;
    if beta.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: beta.len() });
    }
    if (0..model.n_obs()).any(|i| model.eta(beta, i).abs() > ETA_CLAMP) {
        return Err(Error::Model("linear predictor outside the safe range".into()));
    }
    Ok(model.log_joint(beta))
}
