//! Adaptation loops of importance weighted moment matching.
//!
//! The sample drawn once from the proposal is moved by a growing chain of
//! affine maps. After every candidate map the target is re-evaluated at the
//! moved draws while the proposal density follows from its value at the
//! original draws and the chain's Jacobian, so the proposal is evaluated only
//! once per draw.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::affine::{build_transform, MapKind, MomentOptions, TransformChain};
use crate::error::{Error, Result};
use crate::estimators::{
    common_log_weights, expectation_log_weights, log_add_exp, DrawMatrix, FunctionValues,
    LogWeights,
};
use crate::pareto::{fit_gpd_tail, maybe_smooth, DEFAULT_K_THRESHOLD};
use crate::serde_util::nonfinite_f64;

/// Densities and integrand of an importance sampling problem.
pub trait Integrand: Sync {
    /// Log target density, possibly unnormalized.
    fn log_target(&self, draws: &DrawMatrix) -> Result<Vec<f64>>;
    /// Log proposal density, possibly unnormalized.
    fn log_proposal(&self, draws: &DrawMatrix) -> Result<Vec<f64>>;
    fn h(&self, draws: &DrawMatrix) -> Result<FunctionValues>;
    /// Whether both densities are normalized, so that standard IS applies.
    fn normalized(&self) -> bool {
        false
    }
}

/// [`Integrand`] built from closures.
pub struct FnIntegrand<P, G, H> {
    pub log_p: P,
    pub log_g: G,
    pub h: H,
    pub normalized: bool,
}

impl<P, G, H> Integrand for FnIntegrand<P, G, H>
where
    P: Fn(&DrawMatrix) -> Result<Vec<f64>> + Sync,
    G: Fn(&DrawMatrix) -> Result<Vec<f64>> + Sync,
    H: Fn(&DrawMatrix) -> Result<FunctionValues> + Sync,
{
    fn log_target(&self, draws: &DrawMatrix) -> Result<Vec<f64>> {
        (self.log_p)(draws)
    }

    fn log_proposal(&self, draws: &DrawMatrix) -> Result<Vec<f64>> {
        (self.log_g)(draws)
    }

    fn h(&self, draws: &DrawMatrix) -> Result<FunctionValues> {
        (self.h)(draws)
    }

    fn normalized(&self) -> bool {
        self.normalized
    }
}

/// Treats the target as its own proposal.
struct SelfProposal<'a, I: ?Sized>(&'a I);

impl<I: Integrand + ?Sized> Integrand for SelfProposal<'_, I> {
    fn log_target(&self, draws: &DrawMatrix) -> Result<Vec<f64>> {
        self.0.log_target(draws)
    }

    fn log_proposal(&self, draws: &DrawMatrix) -> Result<Vec<f64>> {
        self.0.log_target(draws)
    }

    fn h(&self, draws: &DrawMatrix) -> Result<FunctionValues> {
        self.0.h(draws)
    }

    fn normalized(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptOptions {
    pub k_threshold: f64,
    /// Pareto smooth the weights used for the moments.
    pub smoothing: bool,
    pub moments: MomentOptions,
    pub max_transforms: usize,
    /// Seeds the shuffle deciding which half of the sample each split
    /// component receives.
    pub seed: u64,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            k_threshold: DEFAULT_K_THRESHOLD,
            smoothing: true,
            moments: MomentOptions::default(),
            max_transforms: 30,
            seed: 0,
        }
    }
}

/// One attempted map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Attempt {
    pub kind: MapKind,
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_before: f64,
    /// `+inf` when the map could not be built.
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_after: f64,
    pub accepted: bool,
    /// Whether the target was evaluated at the moved draws.
    pub evaluated: bool,
}

/// Why a loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BelowThreshold,
    AllRejected,
    TransformCap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EvalCounters {
    pub target_evals: u64,
    pub proposal_evals: u64,
}

impl EvalCounters {
    pub fn add(&mut self, other: EvalCounters) {
        self.target_evals += other.target_evals;
        self.proposal_evals += other.proposal_evals;
    }
}

#[derive(Clone, Debug)]
pub struct AdaptationResult {
    pub chain: TransformChain,
    pub final_draws: DrawMatrix,
    /// Raw (unsmoothed) weights at `final_draws`.
    pub final_weights: LogWeights,
    /// Log proposal density of the implicitly adapted proposal at `final_draws`.
    pub final_log_g: Vec<f64>,
    pub khat: f64,
    pub history: Vec<Attempt>,
    pub converged: bool,
    pub stop: StopReason,
    pub counters: EvalCounters,
}

impl AdaptationResult {
    pub fn n_accepted(&self) -> usize {
        self.history.iter().filter(|a| a.accepted).count()
    }

    pub fn n_evaluated(&self) -> usize {
        self.history.iter().filter(|a| a.evaluated).count()
    }
}

/// Generic accept/reject loop.
///
/// `weights_at(draws, log_g)` evaluates the weights at moved draws given the
/// implicit proposal density there; each call costs one target evaluation
/// per draw. Weights at the starting draws are computed the same way unless
/// `initial` supplies them.
pub fn adapt_loop<F>(
    draws: &DrawMatrix,
    base_log_g: &[f64],
    initial: Option<LogWeights>,
    mut weights_at: F,
    opts: &AdaptOptions,
) -> Result<AdaptationResult>
where
    F: FnMut(&DrawMatrix, &[f64]) -> Result<LogWeights>,
{
    if base_log_g.len() != draws.n_draws() {
        return Err(Error::LengthMismatch { expected: draws.n_draws(), got: base_log_g.len() });
    }
    let s = draws.n_draws() as u64;
    let mut counters = EvalCounters::default();
    let mut chain = TransformChain::identity();
    let mut current = draws.clone();
    let mut log_g = base_log_g.to_vec();
    let mut weights = match initial {
        Some(w) if w.len() == draws.n_draws() => w,
        Some(w) => return Err(Error::LengthMismatch { expected: draws.n_draws(), got: w.len() }),
        None => {
            counters.target_evals += s;
            weights_at(&current, &log_g)?
        }
    };
    let mut khat = fit_gpd_tail(&weights).khat;
    let mut history = Vec::new();

    let stop = loop {
        if khat <= opts.k_threshold {
            break StopReason::BelowThreshold;
        }
        if chain.len() >= opts.max_transforms {
            break StopReason::TransformCap;
        }
        let (moment_w, _) = maybe_smooth(&weights, opts.smoothing);
        let mut accepted = false;
        for kind in [MapKind::Translation, MapKind::DiagonalScale, MapKind::FullLinear] {
            let map = match build_transform(kind, &current, &moment_w, opts.moments) {
                Ok(m) => m,
                Err(e) => {
                    log::debug!("{kind:?} unavailable: {e}");
                    history.push(Attempt { kind, khat_before: khat, khat_after: f64::INFINITY, accepted: false, evaluated: false });
                    continue;
                }
            };
            let moved = map.apply(&current)?;
            let ld = map.log_det_jacobian();
            let moved_log_g: Vec<f64> = log_g.iter().map(|g| g - ld).collect();
            let cand = weights_at(&moved, &moved_log_g)?;
            counters.target_evals += s;
            let cand_khat = fit_gpd_tail(&cand).khat;
            let ok = cand_khat < khat;
            history.push(Attempt { kind, khat_before: khat, khat_after: cand_khat, accepted: ok, evaluated: true });
            if ok {
                chain.push(map)?;
                current = moved;
                log_g = moved_log_g;
                weights = cand;
                khat = cand_khat;
                accepted = true;
                break;
            }
        }
        if !accepted {
            break StopReason::AllRejected;
        }
    };
    if stop != StopReason::BelowThreshold {
        log::warn!("moment matching stopped with khat {khat:.3} ({stop:?})");
    }
    Ok(AdaptationResult {
        chain,
        final_draws: current,
        final_weights: weights,
        final_log_g: log_g,
        khat,
        history,
        converged: stop == StopReason::BelowThreshold,
        stop,
        counters,
    })
}

/// Adaptation for the standard IS estimator, driven by expectation-specific weights.
pub fn adapt_standard_is<I: Integrand + ?Sized>(
    cb: &I,
    draws: &DrawMatrix,
    opts: &AdaptOptions,
) -> Result<AdaptationResult> {
    let log_g0 = cb.log_proposal(draws)?;
    let normalized = cb.normalized();
    let mut res = adapt_loop(
        draws,
        &log_g0,
        None,
        |x, lg| expectation_log_weights(&cb.log_target(x)?, lg, &cb.h(x)?, normalized),
        opts,
    )?;
    res.counters.proposal_evals += draws.n_draws() as u64;
    Ok(res)
}

/// Adaptation for simple Monte Carlo draws from the target itself.
pub fn adapt_simple_mc<I: Integrand + ?Sized>(
    cb: &I,
    draws: &DrawMatrix,
    opts: &AdaptOptions,
) -> Result<AdaptationResult> {
    adapt_standard_is(&SelfProposal(cb), draws, opts)
}

/// Standard IS estimate from the final weights of an adaptation.
pub fn standard_is_estimate<I: Integrand + ?Sized>(
    cb: &I,
    res: &AdaptationResult,
    smoothing: bool,
) -> Result<f64> {
    let (w, _) = maybe_smooth(&res.final_weights, smoothing);
    let s = w.len() as f64;
    let total: f64 = w
        .log_mag()
        .iter()
        .zip(w.sign())
        .map(|(l, &sg)| f64::from(sg) * l.exp())
        .sum();
    if !cb.normalized() {
        return Err(Error::UnnormalizedWeights);
    }
    Ok(total / s)
}

/// A two-component proposal `g_a + g_b` where each component is the base
/// proposal pushed through its own chain, half of the sample going through each.
#[derive(Clone, Debug)]
pub struct SplitProposal {
    pub draws: DrawMatrix,
    /// Log of the summed component densities at `draws`.
    pub log_density: Vec<f64>,
    /// `true` for draws moved by the first chain.
    pub first_half: Vec<bool>,
    pub counters: EvalCounters,
}

/// Indices of draws assigned to the first component: `ceil(S/2)` of them
/// after a seeded shuffle.
pub fn split_assignment(s: usize, seed: u64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..s).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut first = vec![false; s];
    for &i in &idx[..s.div_ceil(2)] {
        first[i] = true;
    }
    first
}

/// Builds the split proposal from the original draws and their base log
/// proposal density. `log_g` evaluates the base proposal at the pseudo-draws,
/// the preimages of each moved draw under the other component's chain.
pub fn build_split_proposal<G>(
    draws: &DrawMatrix,
    base_log_g: &[f64],
    first: &TransformChain,
    second: &TransformChain,
    log_g: G,
    seed: u64,
) -> Result<SplitProposal>
where
    G: Fn(&DrawMatrix) -> Result<Vec<f64>>,
{
    let s = draws.n_draws();
    if base_log_g.len() != s {
        return Err(Error::LengthMismatch { expected: s, got: base_log_g.len() });
    }
    let first_half = split_assignment(s, seed);
    let first_inv = first.invert();
    let second_inv = second.invert();
    let (ld_a, ld_b) = (first.total_log_det(), second.total_log_det());

    let mut moved = draws.as_array().clone();
    let mut pseudo = draws.as_array().clone();
    for (i, (mut row, mut prow)) in moved.rows_mut().into_iter().zip(pseudo.rows_mut()).enumerate() {
        let x0 = row.to_vec();
        let (x, back) = if first_half[i] {
            let x = first.apply_point(&x0);
            let b = second_inv.apply_point(&x);
            (x, b)
        } else {
            let x = second.apply_point(&x0);
            let b = first_inv.apply_point(&x);
            (x, b)
        };
        row.iter_mut().zip(x).for_each(|(r, v)| *r = v);
        prow.iter_mut().zip(back).for_each(|(r, v)| *r = v);
    }
    let pseudo = DrawMatrix::new(pseudo)?;
    let pseudo_log_g = log_g(&pseudo)?;
    let log_density = (0..s)
        .map(|i| {
            if first_half[i] {
                log_add_exp(base_log_g[i] - ld_a, pseudo_log_g[i] - ld_b)
            } else {
                log_add_exp(pseudo_log_g[i] - ld_a, base_log_g[i] - ld_b)
            }
        })
        .collect();
    Ok(SplitProposal {
        draws: DrawMatrix::new(moved)?,
        log_density,
        first_half,
        counters: EvalCounters { target_evals: 0, proposal_evals: s as u64 },
    })
}

/// Result of the double adaptation for self-normalized estimation.
#[derive(Clone, Debug)]
pub struct SnisAdaptation {
    /// Loop driven by expectation-specific weights.
    pub numerator: AdaptationResult,
    /// Loop driven by common weights, started from the numerator's sample.
    pub denominator: AdaptationResult,
    pub split: SplitProposal,
    pub counters: EvalCounters,
}

/// Double adaptation: first the expectation-specific weights, then the
/// common weights on the moved sample, combined by a split proposal.
pub fn adapt_snis<I: Integrand + ?Sized>(
    cb: &I,
    draws: &DrawMatrix,
    opts: &AdaptOptions,
) -> Result<SnisAdaptation> {
    let log_g0 = cb.log_proposal(draws)?;
    let mut numerator = adapt_loop(
        draws,
        &log_g0,
        None,
        |x, lg| expectation_log_weights(&cb.log_target(x)?, lg, &cb.h(x)?, false),
        opts,
    )?;
    numerator.counters.proposal_evals += draws.n_draws() as u64;
    let denominator = adapt_loop(
        &numerator.final_draws,
        &numerator.final_log_g,
        None,
        |x, lg| common_log_weights(&cb.log_target(x)?, lg, false),
        opts,
    )?;
    let both = numerator.chain.then(&denominator.chain)?;
    let split =
        build_split_proposal(draws, &log_g0, &numerator.chain, &both, |x| cb.log_proposal(x), opts.seed)?;
    let mut counters = numerator.counters;
    counters.add(denominator.counters);
    counters.add(split.counters);
    Ok(SnisAdaptation { numerator, denominator, split, counters })
}

/// Self-normalized estimate from the split proposal with diagnostics for
/// both weight vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SplitEstimate {
    pub estimate: f64,
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_common: f64,
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_specific: f64,
}

impl SplitEstimate {
    /// The larger of the two diagnostics.
    pub fn khat(&self) -> f64 {
        self.khat_common.max(self.khat_specific)
    }
}

/// Evaluates the target at the split draws and forms the self-normalized
/// estimate, smoothing numerator and denominator weights separately.
pub fn split_snis_estimate<I: Integrand + ?Sized>(
    cb: &I,
    split: &SplitProposal,
    smoothing: bool,
) -> Result<(SplitEstimate, EvalCounters)> {
    let log_p = cb.log_target(&split.draws)?;
    let h = cb.h(&split.draws)?;
    let w = common_log_weights(&log_p, &split.log_density, false)?;
    let v = expectation_log_weights(&log_p, &split.log_density, &h, false)?;
    let (ws, dw) = maybe_smooth(&w, smoothing);
    let (vs, dv) = maybe_smooth(&v, smoothing);
    let den = signed_log_sum(&ws);
    let num = signed_log_sum(&vs);
    if den.0 == 0 {
        return Err(Error::DegenerateWeights);
    }
    let estimate = f64::from(num.0) * (num.1 - den.1).exp();
    let counters = EvalCounters { target_evals: split.draws.n_draws() as u64, proposal_evals: 0 };
    Ok((SplitEstimate { estimate, khat_common: dw.khat, khat_specific: dv.khat }, counters))
}

/// `(sign, log|sum|)` of a signed weight sum.
pub(crate) fn signed_log_sum(w: &LogWeights) -> (i8, f64) {
    let m = w
        .log_mag()
        .iter()
        .zip(w.sign())
        .filter(|(_, &s)| s != 0)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return (0, m);
    }
    let t: f64 = w
        .log_mag()
        .iter()
        .zip(w.sign())
        .map(|(l, &s)| f64::from(s) * (l - m).exp())
        .sum();
    if t == 0.0 {
        (0, f64::NEG_INFINITY)
    } else {
        (if t > 0.0 { 1 } else { -1 }, t.abs().ln() + m)
    }
}
