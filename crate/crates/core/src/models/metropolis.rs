use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimators::DrawMatrix;
use crate::linalg::{cholesky_jittered, lower_mul};

#[derive(Clone, Debug)]
pub struct MetropolisConfig {
    pub init: Vec<f64>,
    /// Initial proposal covariance; identity when absent.
    pub init_cov: Option<Array2<f64>>,
    pub target_accept: f64,
    /// Warmup iterations; defaults to the number of requested draws.
    pub warmup: Option<usize>,
}

impl MetropolisConfig {
    pub fn new(init: Vec<f64>) -> Self {
        Self { init, init_cov: None, target_accept: 0.234, warmup: None }
    }
}

/// Random-walk Metropolis with a Gaussian proposal.
///
/// During warmup the step size follows a Robbins-Monro recursion towards
/// the target acceptance rate, and halfway through the proposal covariance
/// is replaced by the empirical covariance of the second quarter of warmup.
/// Warmup draws are discarded.
pub fn rw_metropolis<F>(log_density: F, s: usize, seed: u64, cfg: &MetropolisConfig) -> Result<DrawMatrix>
where
    F: Fn(&[f64]) -> f64,
{
    let d = cfg.init.len();
    if d == 0 || s < 2 {
        return Err(Error::InvalidArgument("need a nonempty initial point and at least two draws".into()));
    }
    let mut x = cfg.init.clone();
    let mut lp = log_density(&x);
    if !lp.is_finite() {
        return Err(Error::Sampler("log density not finite at the initial point".into()));
    }
    let mut chol = match &cfg.init_cov {
        Some(c) => cholesky_jittered(c).ok_or_else(|| Error::Sampler("initial covariance not positive definite".into()))?,
        None => Array2::eye(d),
    };
    let warmup = cfg.warmup.unwrap_or(s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_step = (2.38 / (d as f64).sqrt()).ln();
    let mut z = vec![0.0; d];
    let mut window: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::with_capacity(s * d);
    let mut accepted_after = 0usize;

    for t in 0..warmup + s {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let step = log_step.exp();
        let prop: Vec<f64> = x.iter().zip(lower_mul(&chol, &z)).map(|(a, b)| a + step * b).collect();
        let lp_prop = log_density(&prop);
        let log_alpha = if lp_prop.is_nan() { f64::NEG_INFINITY } else { (lp_prop - lp).min(0.0) };
        let u: f64 = rng.random();
        let accept = u.ln() < log_alpha;
        if accept {
            x = prop;
            lp = lp_prop;
        }
        if t < warmup {
            let rate = (t as f64 + 1.0).powf(-0.6);
            log_step += rate * (log_alpha.exp() - cfg.target_accept);
            if t >= warmup / 4 && t < warmup / 2 {
                window.push(x.clone());
            }
            if t + 1 == warmup / 2 && window.len() > 2 * d {
                if let Some(l) = cholesky_jittered(&empirical_cov(&window)) {
                    chol = l;
                    log_step = (2.38 / (d as f64).sqrt()).ln();
                }
            }
        } else {
            accepted_after += usize::from(accept);
            out.extend_from_slice(&x);
        }
    }
    if accepted_after == 0 {
        return Err(Error::Sampler("no proposal accepted after warmup".into()));
    }
    DrawMatrix::new(Array2::from_shape_vec((s, d), out).expect("shape"))
}

fn empirical_cov(xs: &[Vec<f64>]) -> Array2<f64> {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut cov = Array2::<f64>::zeros((d, d));
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_moments() {
        let cfg = MetropolisConfig::new(vec![0.5]);
        let d = rw_metropolis(|x| -0.5 * x[0] * x[0], 100_000, 3, &cfg).unwrap();
        let v: Vec<f64> = d.rows().map(|r| r[0]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(m.abs() < 0.02, "{m}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
        assert_eq!(d, rw_metropolis(|x| -0.5 * x[0] * x[0], 100_000, 3, &cfg).unwrap());
    }

    #[test]
    fn correlated_target_adapts_covariance() {
        // rho = 0.9, unit variances
        let lp = |x: &[f64]| -(x[0] * x[0] - 1.8 * x[0] * x[1] + x[1] * x[1]) / (2.0 * 0.19);
        let d = rw_metropolis(lp, 40_000, 5, &MetropolisConfig::new(vec![0.0, 0.0])).unwrap();
        let c = empirical_cov(&d.rows().map(|r| r.to_vec()).collect::<Vec<_>>());
        assert!((c[[0, 1]] - 0.9).abs() < 0.1, "{c}");
    }

    #[test]
    fn rejects_bad_start() {
        let cfg = MetropolisConfig::new(vec![1.0]);
        assert!(rw_metropolis(|_| f64::NEG_INFINITY, 10, 0, &cfg).is_err());
    }
}
