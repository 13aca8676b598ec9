//! Parametric adaptive importance sampling with a Gaussian or Student-t3
//! proposal, optionally with separate proposals for the numerator and
//! denominator of the self-normalized estimate.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::affine::{weighted_covariance, weighted_mean};
use crate::error::{Error, Result};
use crate::estimators::{
    balance_heuristic_log_weights, expectation_log_weights, DrawMatrix, FunctionValues, LogWeights,
};
use crate::iwmm::{signed_log_sum, EvalCounters};
use crate::linalg::{cholesky_jittered, log_diag_sum, lower_mul, solve_lower};
use crate::pareto::{maybe_smooth, DEFAULT_K_THRESHOLD};
use crate::serde_util::nonfinite_f64;

const T_DOF: f64 = 3.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalFamily {
    Gaussian,
    StudentT3,
}

impl ProposalFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::StudentT3 => "student_t3",
        }
    }
}

/// Location-scale proposal; `scale` is a lower-triangular factor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricProposal {
    pub family: ProposalFamily,
    pub location: Vec<f64>,
    pub scale: Array2<f64>,
    pub adapt_scale: bool,
}

impl ParametricProposal {
    pub fn new(family: ProposalFamily, location: Vec<f64>, scale: Array2<f64>) -> Result<Self> {
        let d = location.len();
        if d == 0 {
            return Err(Error::Empty);
        }
        if scale.dim() != (d, d) {
            return Err(Error::DimensionMismatch { expected: d, got: scale.nrows() });
        }
        if location.iter().chain(scale.iter()).any(|v| !v.is_finite())
            || (0..d).any(|i| !(scale[[i, i]] > 0.0) || (i + 1..d).any(|j| scale[[i, j]] != 0.0))
        {
            return Err(Error::InvalidArgument("scale must be lower triangular with positive diagonal".into()));
        }
        Ok(Self { family, location, scale, adapt_scale: true })
    }

    /// Proposal whose covariance equals `cov`. For the t3 family the scale
    /// matrix is `cov / 3`.
    pub fn from_moments(family: ProposalFamily, location: Vec<f64>, cov: &Array2<f64>) -> Result<Self> {
        let shape = match family {
            ProposalFamily::Gaussian => cov.clone(),
            ProposalFamily::StudentT3 => cov * ((T_DOF - 2.0) / T_DOF),
        };
        let l = cholesky_jittered(&shape).ok_or(Error::RankDeficient)?;
        Self::new(family, location, l)
    }

    /// Mean and covariance of a sample, as used to initialize from
    /// posterior draws.
    pub fn from_draws(family: ProposalFamily, draws: &DrawMatrix) -> Result<Self> {
        let ones = LogWeights::from_log(vec![0.0; draws.n_draws()], false)?;
        let cov = weighted_covariance(draws, &ones)?;
        Self::from_moments(family, draws.column_means(), &cov)
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Result<DrawMatrix> {
        let d = self.dim();
        let chi = ChiSquared::new(T_DOF).map_err(|e| Error::Sampler(e.to_string()))?;
        let mut out = Vec::with_capacity(s * d);
        let mut z = vec![0.0; d];
        for _ in 0..s {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let mix = match self.family {
                ProposalFamily::Gaussian => 1.0,
                ProposalFamily::StudentT3 => (chi.sample(rng) / T_DOF).sqrt().recip(),
            };
            out.extend(lower_mul(&self.scale, &z).iter().zip(&self.location).map(|(a, m)| m + mix * a));
        }
        DrawMatrix::new(Array2::from_shape_vec((s, d), out).expect("shape"))
    }
}

/// Exact normalized log density of the proposal at each draw.
pub fn proposal_log_density(prop: &ParametricProposal, draws: &DrawMatrix) -> Result<Vec<f64>> {
    let d = prop.dim();
    if draws.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: draws.dim() });
    }
    let df = d as f64;
    let log_det = log_diag_sum(&prop.scale);
    if !log_det.is_finite() {
        return Err(Error::InvalidArgument("scale is not invertible".into()));
    }
    let norm = match prop.family {
        ProposalFamily::Gaussian => -0.5 * df * LN_2PI - log_det,
        ProposalFamily::StudentT3 => {
            ln_gamma(0.5 * (T_DOF + df)) - ln_gamma(0.5 * T_DOF)
                - 0.5 * df * (T_DOF * std::f64::consts::PI).ln()
                - log_det
        }
    };
    let mut dev = vec![0.0; d];
    Ok(draws
        .rows()
        .map(|row| {
            for ((dv, x), m) in dev.iter_mut().zip(row.iter()).zip(&prop.location) {
                *dv = x - m;
            }
            let q: f64 = solve_lower(&prop.scale, &dev).iter().map(|v| v * v).sum();
            match prop.family {
                ProposalFamily::Gaussian => norm - 0.5 * q,
                ProposalFamily::StudentT3 => norm - 0.5 * (T_DOF + df) * (q / T_DOF).ln_1p(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AisOptions {
    pub s_per_iter: usize,
    pub max_iter: usize,
    pub k_threshold: f64,
    /// Adapt one proposal to the numerator weights and one to the
    /// denominator weights, and pool them as a two-component mixture.
    pub double_adapt: bool,
    pub smoothing: bool,
    pub seed: u64,
}

impl Default for AisOptions {
    fn default() -> Self {
        Self {
            s_per_iter: 4000,
            max_iter: 10,
            k_threshold: DEFAULT_K_THRESHOLD,
            double_adapt: false,
            smoothing: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AisIteration {
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_common: f64,
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_specific: f64,
    pub scale_adapted: bool,
}

impl AisIteration {
    pub fn khat(&self) -> f64 {
        self.khat_common.max(self.khat_specific)
    }
}

#[derive(Clone, Debug)]
pub struct AisResult {
    /// Self-normalized estimate from the last iteration's draws.
    pub estimate: f64,
    /// `log |estimate|`.
    pub log_abs_estimate: f64,
    pub khat: f64,
    pub converged: bool,
    pub iterations: Vec<AisIteration>,
    /// Final proposals: one, or numerator then denominator proposal.
    pub proposals: Vec<ParametricProposal>,
    pub counters: EvalCounters,
}

/// Moves location (and scale, while allowed) to the weighted moments.
/// Returns whether the scale was updated.
fn update_proposal(prop: &mut ParametricProposal, draws: &DrawMatrix, w: &LogWeights, location_only: bool) -> Result<bool> {
    prop.location = weighted_mean(draws, w)?;
    if !prop.adapt_scale || location_only {
        return Ok(false);
    }
    let updated = weighted_covariance(draws, w).and_then(|cov| {
        ParametricProposal::from_moments(prop.family, prop.location.clone(), &cov)
    });
    match updated {
        Ok(p) => {
            prop.scale = p.scale;
            Ok(true)
        }
        Err(e) => {
            log::debug!("freezing proposal scale: {e}");
            prop.adapt_scale = false;
            Ok(false)
        }
    }
}

/// Adaptive importance sampling estimate of `E_p[h]` for an unnormalized
/// target `p`.
///
/// Every iteration draws a fresh sample, evaluates the weights, and stops
/// once the larger of the two Pareto diagnostics (common and
/// expectation-specific weights) is at most the threshold; otherwise the
/// proposals move to the weighted moments of the current sample only. The
/// returned proposals hold the moments of the last sample.
pub fn ais_run<P, H>(
    log_target: P,
    h: H,
    init: &ParametricProposal,
    opts: &AisOptions,
) -> Result<AisResult>
where
    P: Fn(&DrawMatrix) -> Result<Vec<f64>>,
    H: Fn(&DrawMatrix) -> Result<FunctionValues>,
{
    if opts.s_per_iter < 2 || opts.max_iter == 0 {
        return Err(Error::InvalidArgument("need at least two draws and one iteration".into()));
    }
    let s = opts.s_per_iter;
    let location_only = init.dim() * 10 > s;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut proposals = if opts.double_adapt { vec![init.clone(), init.clone()] } else { vec![init.clone()] };
    let alphas = vec![1.0 / proposals.len() as f64; proposals.len()];
    let mut iterations = Vec::new();
    let mut counters = EvalCounters::default();

    for it in 0..opts.max_iter {
        let draws = if opts.double_adapt {
            let a = proposals[0].sample(s.div_ceil(2), &mut rng)?;
            let b = proposals[1].sample(s / 2, &mut rng)?;
            let mut all = a.into_inner();
            all.append(ndarray::Axis(0), b.as_array().view()).expect("same width");
            DrawMatrix::new(all)?
        } else {
            proposals[0].sample(s, &mut rng)?
        };
        let log_p = log_target(&draws)?;
        let hv = h(&draws)?;
        let log_gs = proposals.iter().map(|p| proposal_log_density(p, &draws)).collect::<Result<Vec<_>>>()?;
        counters.add(EvalCounters { target_evals: s as u64, proposal_evals: (s * proposals.len()) as u64 });

        let w = balance_heuristic_log_weights(&log_p, &log_gs, &alphas, false)?;
        let mix: Vec<f64> = log_p.iter().zip(w.log_mag()).map(|(p, l)| p - l).collect();
        let v = expectation_log_weights(&log_p, &mix, &hv, false)?;
        let (ws, dw) = maybe_smooth(&w, opts.smoothing);
        let (vs, dv) = maybe_smooth(&v, opts.smoothing);
        let mut record = AisIteration { khat_common: dw.khat, khat_specific: dv.khat, scale_adapted: false };
        let khat = record.khat();

        if khat <= opts.k_threshold || it + 1 == opts.max_iter {
            iterations.push(record);
            let den = signed_log_sum(&ws);
            let num = signed_log_sum(&vs);
            if den.0 == 0 {
                return Err(Error::DegenerateWeights);
            }
            let log_abs_estimate = if num.0 == 0 { f64::NEG_INFINITY } else { num.1 - den.1 };
            // the returned proposals carry the final weighted moments
            let targets = if opts.double_adapt { vec![&vs, &ws] } else { vec![&ws] };
            for (prop, wt) in proposals.iter_mut().zip(targets) {
                update_proposal(prop, &draws, &wt.abs(), location_only)?;
            }
            return Ok(AisResult {
                estimate: f64::from(num.0) * log_abs_estimate.exp(),
                log_abs_estimate,
                khat,
                converged: khat <= opts.k_threshold,
                iterations,
                proposals,
                counters,
            });
        }

        // with one proposal and h = 1 the two weight vectors agree
        let targets = if opts.double_adapt { vec![&vs, &ws] } else { vec![&ws] };
        for (prop, wt) in proposals.iter_mut().zip(targets) {
            record.scale_adapted |= update_proposal(prop, &draws, &wt.abs(), location_only)?;
        }
        iterations.push(record);
    }
    unreachable!("loop returns on its last iteration")
}
