//! Generalized Pareto tail fits of importance weights.
//!
//! The shape estimate `khat` of a generalized Pareto distribution fitted to
//! the largest weights tells how many moments of the weight distribution are
//! practically finite; above `0.7` importance sampling estimates are not
//! trustworthy for any achievable sample size. The same fit is reused to
//! replace the largest weights by expected order statistics (Pareto smoothing).

use serde::Serialize;

use crate::estimators::LogWeights;
use crate::serde_util::nonfinite_f64;

/// Upper limit of `khat` for practically useful convergence.
pub const DEFAULT_K_THRESHOLD: f64 = 0.7;

/// Below this many draws no tail fit is attempted.
pub const MIN_DRAWS_FOR_FIT: usize = 25;

/// Smallest tail for which a fit is reported.
pub const MIN_TAIL_LEN: usize = 5;

// weakly informative prior pulling the shape toward 0.5
const PRIOR_K_STRENGTH: f64 = 10.0;
const PRIOR_K_CENTER: f64 = 0.5;
const PRIOR_B_SCALE: f64 = 3.0;
const MIN_QUADRATURE_NODES: usize = 30;

/// Result of a tail fit.
///
/// Two sentinels exist: `khat = +inf` with `tail_len = 0` when there are too
/// few draws (or too few distinct tail values) to fit, and `khat = -inf` when
/// the largest weights are all equal, i.e. there is no tail risk at all.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParetoDiagnostic {
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat: f64,
    pub sigma: f64,
    pub tail_len: usize,
}

impl ParetoDiagnostic {
    pub fn insufficient() -> Self {
        Self { khat: f64::INFINITY, sigma: 0.0, tail_len: 0 }
    }

    pub fn no_tail() -> Self {
        Self { khat: f64::NEG_INFINITY, sigma: 0.0, tail_len: 0 }
    }

    /// Whether this is an actual fit rather than a sentinel.
    pub fn is_fit(&self) -> bool {
        self.tail_len >= MIN_TAIL_LEN && self.khat.is_finite()
    }

    pub fn threshold_exceeded(&self, threshold: f64) -> bool {
        !is_reliable(self, threshold)
    }
}

/// `true` iff `khat <= threshold`.
pub fn is_reliable(diag: &ParetoDiagnostic, threshold: f64) -> bool {
    diag.khat <= threshold
}

/// Number of largest weights used for the fit: `ceil(min(0.2 S, 3 sqrt(S)))`.
pub fn tail_length(s: usize) -> usize {
    let s = s as f64;
    (0.2 * s).min(3.0 * s.sqrt()).ceil() as usize
}

/// Fits a generalized Pareto distribution to positive exceedances sorted in
/// ascending order, using the profile-posterior quadrature estimator of
/// Zhang and Stephens with a weak prior on the shape. Returns `(k, sigma)`.
pub fn gpd_fit(sorted_exceedances: &[f64]) -> Option<(f64, f64)> {
    let x = sorted_exceedances;
    let n = x.len();
    if n < MIN_TAIL_LEN {
        return None;
    }
    let x_max = x[n - 1];
    let x_star = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    if !(x_max > 0.0) || !(x_star > 0.0) {
        return None;
    }
    let m = MIN_QUADRATURE_NODES + (n as f64).sqrt().floor() as usize;
    let mut b: Vec<f64> = (1..=m)
        .map(|j| {
            1.0 / x_max + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / (PRIOR_B_SCALE * x_star)
        })
        .collect();
    let nf = n as f64;
    let profile: Vec<f64> = b
        .iter()
        .map(|&bj| {
            let k = x.iter().map(|&xi| (-bj * xi).ln_1p()).sum::<f64>() / nf;
            nf * ((-bj / k).ln() - k - 1.0)
        })
        .collect();
    if profile.iter().all(|l| !l.is_finite()) {
        return None;
    }
    // posterior weights of the quadrature nodes
    let mut weights: Vec<f64> = profile
        .iter()
        .map(|&li| {
            let denom: f64 = profile
                .iter()
                .map(|&lj| if lj.is_nan() { 0.0 } else { (lj - li).exp() })
                .sum();
            if li.is_finite() {
                1.0 / denom
            } else {
                0.0
            }
        })
        .collect();
    let keep: Vec<bool> = weights.iter().map(|&w| w >= 10.0 * f64::EPSILON).collect();
    let mut idx = 0;
    b.retain(|_| {
        idx += 1;
        keep[idx - 1]
    });
    weights.retain(|&w| w >= 10.0 * f64::EPSILON);
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let b_post: f64 = b.iter().zip(&weights).map(|(bj, w)| bj * w / total).sum();
    let k_raw = x.iter().map(|&xi| (-b_post * xi).ln_1p()).sum::<f64>() / nf;
    let sigma = -k_raw / b_post;
    let k = (nf * k_raw + PRIOR_K_STRENGTH * PRIOR_K_CENTER) / (nf + PRIOR_K_STRENGTH);
    if k.is_finite() && sigma.is_finite() && sigma > 0.0 {
        Some((k, sigma))
    } else {
        None
    }
}

/// Quantile function of the generalized Pareto distribution with location 0.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < f64::EPSILON {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

struct Tail {
    /// Tail indices sorted by ascending weight.
    indices: Vec<usize>,
    log_cutoff: f64,
    log_max: f64,
}

enum TailSelection {
    TooShort,
    Flat,
    Tail(Tail),
}

fn select_tail(w: &LogWeights) -> TailSelection {
    let s = w.len();
    if s < MIN_DRAWS_FOR_FIT {
        return TailSelection::TooShort;
    }
    let lw: Vec<f64> = w
        .log_mag()
        .iter()
        .zip(w.sign())
        .map(|(&l, &sg)| if sg == 0 { f64::NEG_INFINITY } else { l })
        .collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let m = tail_length(s).min(s - 1);
    let log_cutoff = lw[order[s - m - 1]];
    let log_max = lw[order[s - 1]];
    if log_max == log_cutoff {
        return TailSelection::Flat;
    }
    let indices: Vec<usize> = order[s - m..].iter().copied().filter(|&i| lw[i] > log_cutoff).collect();
    if indices.len() < MIN_TAIL_LEN {
        return TailSelection::TooShort;
    }
    TailSelection::Tail(Tail { indices, log_cutoff, log_max })
}

fn fit_tail(w: &LogWeights, tail: &Tail) -> ParetoDiagnostic {
    let base = (tail.log_cutoff - tail.log_max).exp();
    let exceed: Vec<f64> = tail
        .indices
        .iter()
        .map(|&i| (w.log_mag()[i] - tail.log_max).exp() - base)
        .collect();
    match gpd_fit(&exceed) {
        Some((khat, sigma)) => ParetoDiagnostic { khat, sigma, tail_len: tail.indices.len() },
        None => ParetoDiagnostic::insufficient(),
    }
}

/// Fits the generalized Pareto distribution to the upper tail of the absolute weights.
pub fn fit_gpd_tail(w: &LogWeights) -> ParetoDiagnostic {
    match select_tail(w) {
        TailSelection::TooShort => ParetoDiagnostic::insufficient(),
        TailSelection::Flat => ParetoDiagnostic::no_tail(),
        TailSelection::Tail(tail) => fit_tail(w, &tail),
    }
}

/// Replaces the largest weights by expected order statistics of the fitted
/// tail, capped at the largest raw weight. The diagnostic refers to the raw weights.
pub fn pareto_smooth(w: &LogWeights) -> (LogWeights, ParetoDiagnostic) {
    let tail = match select_tail(w) {
        TailSelection::TooShort => return (w.clone(), ParetoDiagnostic::insufficient()),
        TailSelection::Flat => return (w.clone(), ParetoDiagnostic::no_tail()),
        TailSelection::Tail(tail) => tail,
    };
    let diag = fit_tail(w, &tail);
    if !diag.is_fit() {
        return (w.clone(), diag);
    }
    let m = tail.indices.len() as f64;
    let base = (tail.log_cutoff - tail.log_max).exp();
    let mut log_mag = w.log_mag().to_vec();
    for (z, &i) in tail.indices.iter().enumerate() {
        let q = gpd_quantile((z as f64 + 0.5) / m, diag.khat, diag.sigma);
        let smoothed = (q + base).ln() + tail.log_max;
        log_mag[i] = if smoothed.is_nan() { tail.log_max } else { smoothed.min(tail.log_max) };
    }
    (LogWeights::from_parts(log_mag, w.sign().to_vec(), w.normalized()), diag)
}

/// Smooths when `enabled`, otherwise returns the raw weights with their diagnostic.
pub fn maybe_smooth(w: &LogWeights, enabled: bool) -> (LogWeights, ParetoDiagnostic) {
    if enabled {
        pareto_smooth(w)
    } else {
        (w.clone(), fit_gpd_tail(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gpd_sample(rng: &mut ChaCha8Rng, n: usize, k: f64, sigma: f64) -> Vec<f64> {
        (0..n).map(|_| gpd_quantile(rng.random::<f64>(), k, sigma)).collect()
    }

    #[test]
    fn tail_length_rule() {
        assert_eq!(tail_length(25), 5);
        assert_eq!(tail_length(100), 20);
        assert_eq!(tail_length(4000), 190);
    }

    #[test]
    fn reliability_threshold() {
        let d = |k| ParetoDiagnostic { khat: k, sigma: 1.0, tail_len: 10 };
        assert!(is_reliable(&d(0.69), 0.7));
        assert!(!is_reliable(&d(0.71), 0.7));
        assert!(is_reliable(&ParetoDiagnostic::no_tail(), 0.7));
        assert!(!is_reliable(&ParetoDiagnostic::insufficient(), 0.7));
    }

    #[test]
    fn sentinels() {
        let flat = LogWeights::from_log(vec![0.3; 100], false).unwrap();
        assert_eq!(fit_gpd_tail(&flat).khat, f64::NEG_INFINITY);
        let (sm, _) = pareto_smooth(&flat);
        assert_eq!(sm, flat);

        let short = LogWeights::from_log((0..10).map(|i| i as f64).collect(), false).unwrap();
        let d = fit_gpd_tail(&short);
        assert_eq!(d.khat, f64::INFINITY);
        assert_eq!(d.tail_len, 0);
    }

    #[test]
    fn gpd_fit_recovers_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0;
        for _ in 0..100 {
            let mut x = gpd_sample(&mut rng, 1000, 0.5, 1.0);
            x.sort_by(f64::total_cmp);
            let (k, _) = gpd_fit(&x).unwrap();
            if (k - 0.5).abs() <= 0.15 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "hits = {hits}");
    }

    #[test]
    fn fit_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lw: Vec<f64> = gpd_sample(&mut rng, 500, 0.8, 1.0).iter().map(|x| (1.0 + x).ln()).collect();
        let a = fit_gpd_tail(&LogWeights::from_log(lw.clone(), false).unwrap());
        lw.shuffle(&mut rng);
        let b = fit_gpd_tail(&LogWeights::from_log(lw, false).unwrap());
        assert_eq!(a, b);
        assert!(a.is_fit());
    }

    #[test]
    fn smoothing_preserves_body_and_caps_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lw: Vec<f64> = gpd_sample(&mut rng, 2000, 1.2, 1.0).iter().map(|x| x.ln_1p()).collect();
        let w = LogWeights::from_log(lw.clone(), false).unwrap();
        let (sm, diag) = pareto_smooth(&w);
        assert!(diag.is_fit());
        assert_eq!(sm.len(), w.len());
        let raw_max = w.max_log_mag();
        assert!(sm.max_log_mag() <= raw_max);
        let mut sorted = lw.clone();
        sorted.sort_by(f64::total_cmp);
        let cutoff = sorted[lw.len() - tail_length(lw.len()) - 1];
        for (a, b) in w.log_mag().iter().zip(sm.log_mag()) {
            if *a <= cutoff {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_weights_count_as_smallest() {
        // an indicator-type integrand: 40 nonzero of 1000
        let lw: Vec<f64> = (0..1000)
            .map(|i| if i % 25 == 0 { (i as f64 / 100.0).sin() } else { f64::NEG_INFINITY })
            .collect();
        let w = LogWeights::from_log(lw, true).unwrap();
        let d = fit_gpd_tail(&w);
        assert!(d.khat.is_finite() || d.khat == f64::INFINITY);
    }
}
