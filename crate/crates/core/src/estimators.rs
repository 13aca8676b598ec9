//! Monte Carlo estimators and importance weight constructions.
//!
//! All weight arithmetic happens on log magnitudes with a separate sign, and
//! values are only exponentiated after subtracting the relevant maximum.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// An `S x D` matrix of draws in unconstrained parameter space, one draw per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawMatrix {
    draws: Array2<f64>,
}

impl DrawMatrix {
    /// Wraps a matrix of draws. Requires `S >= 2`, `D >= 1` and finite entries.
    pub fn new(draws: Array2<f64>) -> Result<Self> {
        let (s, d) = draws.dim();
        if s < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 draws, got {s}")));
        }
        if d == 0 {
            return Err(Error::InvalidArgument("draws must have at least one column".into()));
        }
        if let Some(pos) = draws.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite draw entry at row {}",
                pos / d
            )));
        }
        Ok(Self { draws })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(Error::Empty)?;
        let mut flat = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: row.len() });
            }
            flat.extend_from_slice(row);
        }
        let draws = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(draws)
    }

    /// Internal constructor for matrices produced by affine maps of valid draws.
    pub(crate) fn from_array_unchecked(draws: Array2<f64>) -> Self {
        Self { draws }
    }

    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn dim(&self) -> usize {
        self.draws.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.draws.view()
    }

    pub fn row(&self, s: usize) -> ArrayView1<'_, f64> {
        self.draws.row(s)
    }

    pub fn rows(&self) -> impl Iterator<Item = ArrayView1<'_, f64>> {
        self.draws.axis_iter(Axis(0))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.draws
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.draws
    }

    /// Unweighted column means.
    pub fn column_means(&self) -> Vec<f64> {
        let s = self.n_draws() as f64;
        self.draws.sum_axis(Axis(0)).iter().map(|x| x / s).collect()
    }

    /// Draws at the given row indices, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> DrawMatrix {
        DrawMatrix::from_array_unchecked(self.draws.select(Axis(0), idx))
    }
}

/// Values of the integrand `h` at each draw, stored as log magnitude and sign
/// so that likelihood-type integrands do not underflow.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionValues {
    log_abs: Vec<f64>,
    sign: Vec<i8>,
}

impl FunctionValues {
    pub fn from_values(h: &[f64]) -> Result<Self> {
        if let Some(pos) = h.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite h value at draw {pos}")));
        }
        Ok(Self {
            log_abs: h.iter().map(|x| x.abs().ln()).collect(),
            sign: h.iter().map(|&x| sign_of(x)).collect(),
        })
    }

    /// Strictly positive values given by their logarithm, e.g. a likelihood term.
    pub fn from_log_positive(log_h: &[f64]) -> Result<Self> {
        if let Some(pos) = log_h.iter().position(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::InvalidArgument(format!("invalid log h value at draw {pos}")));
        }
        Ok(Self {
            log_abs: log_h.to_vec(),
            sign: log_h
                .iter()
                .map(|&l| if l == f64::NEG_INFINITY { 0 } else { 1 })
                .collect(),
        })
    }

    /// The constant function `h = 1`.
    pub fn ones(s: usize) -> Self {
        Self { log_abs: vec![0.0; s], sign: vec![1; s] }
    }

    pub fn len(&self) -> usize {
        self.sign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sign.is_empty()
    }

    pub fn log_abs(&self) -> &[f64] {
        &self.log_abs
    }

    pub fn sign(&self) -> &[i8] {
        &self.sign
    }

    pub fn values(&self) -> Vec<f64> {
        self.log_abs
            .iter()
            .zip(&self.sign)
            .map(|(l, &s)| if s == 0 { 0.0 } else { f64::from(s) * l.exp() })
            .collect()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.sign.iter().all(|&s| s >= 0)
    }
}

/// Importance weights in log-magnitude plus sign form.
///
/// Common weights `w = p/g` always carry sign `+1`; expectation-specific
/// weights `v = (p/g) h` inherit the sign of `h`, with sign `0` and log
/// magnitude `-inf` where `h` vanishes.
#[derive(Clone, Debug, PartialEq)]
pub struct LogWeights {
    log_mag: Vec<f64>,
    sign: Vec<i8>,
    normalized: bool,
}

impl LogWeights {
    /// Positive weights given by their logarithms.
    pub fn from_log(log_mag: Vec<f64>, normalized: bool) -> Result<Self> {
        if let Some(pos) = log_mag.iter().position(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::InvalidArgument(format!("invalid log weight at draw {pos}")));
        }
        let sign = log_mag
            .iter()
            .map(|&l| if l == f64::NEG_INFINITY { 0 } else { 1 })
            .collect();
        Ok(Self { log_mag, sign, normalized })
    }

    /// Nonnegative raw weights.
    pub fn from_weights(w: &[f64], normalized: bool) -> Result<Self> {
        if let Some(pos) = w.iter().position(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid weight at draw {pos}")));
        }
        Self::from_log(w.iter().map(|x| x.ln()).collect(), normalized)
    }

    pub(crate) fn from_parts(log_mag: Vec<f64>, sign: Vec<i8>, normalized: bool) -> Self {
        debug_assert_eq!(log_mag.len(), sign.len());
        Self { log_mag, sign, normalized }
    }

    pub fn len(&self) -> usize {
        self.log_mag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_mag.is_empty()
    }

    pub fn log_mag(&self) -> &[f64] {
        &self.log_mag
    }

    pub fn sign(&self) -> &[i8] {
        &self.sign
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// Largest log magnitude among nonzero entries, `-inf` if all are zero.
    pub fn max_log_mag(&self) -> f64 {
        self.log_mag
            .iter()
            .zip(&self.sign)
            .filter(|(_, &s)| s != 0)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The absolute weights as positive log weights, dropping signs.
    pub fn abs(&self) -> LogWeights {
        LogWeights {
            log_mag: self.log_mag.clone(),
            sign: self.sign.iter().map(|s| s.abs()).collect(),
            normalized: self.normalized,
        }
    }

    /// Absolute weights divided by their sum. Signs are ignored.
    pub fn self_normalized_abs(&self) -> Result<Vec<f64>> {
        let m = self.max_log_mag();
        if m == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights);
        }
        let scaled: Vec<f64> = self
            .log_mag
            .iter()
            .zip(&self.sign)
            .map(|(l, &s)| if s == 0 { 0.0 } else { (l - m).exp() })
            .collect();
        let total: f64 = scaled.iter().sum();
        Ok(scaled.into_iter().map(|x| x / total).collect())
    }

    /// Adds a constant to every log magnitude.
    pub fn shifted(&self, c: f64) -> LogWeights {
        LogWeights {
            log_mag: self.log_mag.iter().map(|l| l + c).collect(),
            sign: self.sign.clone(),
            normalized: self.normalized,
        }
    }

    /// Normalized log weights: `log(|w_s| / sum |w|)`.
    pub fn log_normalized(&self) -> Result<Vec<f64>> {
        let masked: Vec<f64> = self
            .log_mag
            .iter()
            .zip(&self.sign)
            .map(|(&l, &s)| if s == 0 { f64::NEG_INFINITY } else { l })
            .collect();
        let lse = log_sum_exp(&masked);
        if lse == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights);
        }
        Ok(masked.iter().map(|l| l - lse).collect())
    }
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// `log(sum(exp(x)))` with max subtraction; `-inf` for empty or all `-inf` input.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { expected, got });
    }
    Ok(())
}

fn check_densities(log_p: &[f64], log_g: &[f64]) -> Result<()> {
    if log_p.is_empty() {
        return Err(Error::Empty);
    }
    check_len(log_p.len(), log_g.len())?;
    for (s, (&lp, &lg)) in log_p.iter().zip(log_g).enumerate() {
        if lg == f64::NEG_INFINITY {
            return Err(Error::ProposalNotDominating(s));
        }
        if !lg.is_finite() || lp.is_nan() || lp == f64::INFINITY {
            return Err(Error::InvalidArgument(format!("invalid log density at draw {s}")));
        }
    }
    Ok(())
}

/// Simple Monte Carlo estimate: the sample mean of `h`.
pub fn simple_mc_estimate(h: &FunctionValues) -> Result<f64> {
    if h.is_empty() {
        return Err(Error::Empty);
    }
    let vals = h.values();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Common importance weights `w = p/g`.
pub fn common_log_weights(log_p: &[f64], log_g: &[f64], normalized: bool) -> Result<LogWeights> {
    check_densities(log_p, log_g)?;
    let log_mag: Vec<f64> = log_p.iter().zip(log_g).map(|(p, g)| p - g).collect();
    let sign = log_mag
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0 } else { 1 })
        .collect();
    Ok(LogWeights { log_mag, sign, normalized })
}

/// Expectation-specific weights `v = (p/g) h`.
pub fn expectation_log_weights(
    log_p: &[f64],
    log_g: &[f64],
    h: &FunctionValues,
    normalized: bool,
) -> Result<LogWeights> {
    check_densities(log_p, log_g)?;
    check_len(log_p.len(), h.len())?;
    let mut log_mag = Vec::with_capacity(log_p.len());
    let mut sign = Vec::with_capacity(log_p.len());
    for s in 0..log_p.len() {
        let lw = log_p[s] - log_g[s];
        if h.sign[s] == 0 || lw == f64::NEG_INFINITY {
            log_mag.push(f64::NEG_INFINITY);
            sign.push(0);
        } else {
            log_mag.push(lw + h.log_abs[s]);
            sign.push(h.sign[s]);
        }
    }
    Ok(LogWeights { log_mag, sign, normalized })
}

/// Scaled signed sum `sum_s sign_s exp(l_s - m)` and its scale `m`.
fn signed_scaled_sum(log_terms: &[f64], signs: &[i8]) -> (f64, f64) {
    let m = log_terms
        .iter()
        .zip(signs)
        .filter(|(_, &s)| s != 0)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return (0.0, m);
    }
    let total = log_terms
        .iter()
        .zip(signs)
        .filter(|(_, &s)| s != 0)
        .map(|(l, &s)| f64::from(s) * (l - m).exp())
        .sum();
    (total, m)
}

fn product_terms(w: &LogWeights, h: &FunctionValues) -> (Vec<f64>, Vec<i8>) {
    w.log_mag
        .iter()
        .zip(&w.sign)
        .zip(h.log_abs.iter().zip(&h.sign))
        .map(|((lw, &sw), (lh, &sh))| {
            let s = sw * sh;
            if s == 0 {
                (f64::NEG_INFINITY, 0)
            } else {
                (lw + lh, s)
            }
        })
        .unzip()
}

/// Standard importance sampling estimate `(1/S) sum w h`. Needs normalized weights.
pub fn is_estimate(w: &LogWeights, h: &FunctionValues) -> Result<f64> {
    if !w.normalized {
        return Err(Error::UnnormalizedWeights);
    }
    if w.is_empty() {
        return Err(Error::Empty);
    }
    check_len(w.len(), h.len())?;
    let (terms, signs) = product_terms(w, h);
    let (sum, m) = signed_scaled_sum(&terms, &signs);
    if m == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok(sum / w.len() as f64 * m.exp())
}

/// Self-normalized importance sampling estimate `sum w h / sum w`.
pub fn snis_estimate(w: &LogWeights, h: &FunctionValues) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Empty);
    }
    check_len(w.len(), h.len())?;
    let (den, m_den) = signed_scaled_sum(&w.log_mag, &w.sign);
    if m_den == f64::NEG_INFINITY || den == 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let (terms, signs) = product_terms(&w.shifted(-m_den), h);
    let (num, m_num) = signed_scaled_sum(&terms, &signs);
    if m_num == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok(num / den * m_num.exp())
}

/// Logarithm of the self-normalized estimate for positive weights and positive `h`.
pub fn log_snis_estimate(w: &LogWeights, h: &FunctionValues) -> Result<f64> {
    check_len(w.len(), h.len())?;
    if w.sign.iter().any(|&s| s < 0) || h.sign.iter().any(|&s| s < 0) {
        return Err(Error::InvalidArgument("log estimate needs nonnegative weights and h".into()));
    }
    let mask = |l: f64, s: i8| if s == 0 { f64::NEG_INFINITY } else { l };
    let den: Vec<f64> = w.log_mag.iter().zip(&w.sign).map(|(&l, &s)| mask(l, s)).collect();
    let log_den = log_sum_exp(&den);
    if log_den == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let (terms, signs) = product_terms(w, h);
    let num: Vec<f64> = terms.iter().zip(&signs).map(|(&l, &s)| mask(l, s)).collect();
    Ok(log_sum_exp(&num) - log_den)
}

/// Deterministic-mixture (balance heuristic) weights `p / sum_j alpha_j g_j`.
pub fn balance_heuristic_log_weights(
    log_p: &[f64],
    component_log_gs: &[Vec<f64>],
    alphas: &[f64],
    normalized: bool,
) -> Result<LogWeights> {
    if component_log_gs.is_empty() {
        return Err(Error::Empty);
    }
    check_len(component_log_gs.len(), alphas.len())?;
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0)
        || (alphas.iter().sum::<f64>() - 1.0).abs() > 1e-12
    {
        return Err(Error::InvalidArgument("mixture proportions must form a simplex".into()));
    }
    for g in component_log_gs {
        check_len(log_p.len(), g.len())?;
    }
    let log_alpha: Vec<f64> = alphas.iter().map(|a| a.ln()).collect();
    let mut mix = Vec::with_capacity(log_p.len());
    let mut buf = vec![0.0; alphas.len()];
    for s in 0..log_p.len() {
        for (j, g) in component_log_gs.iter().enumerate() {
            if g[s].is_nan() || g[s] == f64::INFINITY {
                return Err(Error::InvalidArgument(format!("invalid component density at draw {s}")));
            }
            buf[j] = log_alpha[j] + g[s];
        }
        mix.push(log_sum_exp(&buf));
    }
    common_log_weights(log_p, &mix, normalized)
}
