//! Leave-one-out cross-validation by importance sampling from the full-data
//! posterior, with moment matching for folds whose weights are unreliable.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{log_sum_exp, DrawMatrix, LogWeights};
use crate::iwmm::{adapt_loop, build_split_proposal, AdaptOptions, EvalCounters};
use crate::models::{log_joint_at, log_lik_column, log_lik_matrix, Model};
use crate::pareto::{fit_gpd_tail, maybe_smooth};
use crate::serde_util::nonfinite_f64;
use crate::task_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LooMethod {
    Psis,
    PsisMm,
    RefitMc,
    RefitMm,
    Failed,
}

impl LooMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Psis => "psis",
            Self::PsisMm => "psis_mm",
            Self::RefitMc => "refit_mc",
            Self::RefitMm => "refit_mm",
            Self::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LooFoldReport {
    pub fold: usize,
    #[serde(serialize_with = "nonfinite_f64")]
    pub elpd: f64,
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_initial: f64,
    /// Diagnostic at the end of adaptation; equals `khat_initial` when none ran.
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_final: f64,
    /// Larger of the common and expectation-specific diagnostics of the
    /// weights actually used for the estimate.
    #[serde(serialize_with = "nonfinite_f64")]
    pub khat_reported: f64,
    pub method: LooMethod,
    pub n_transforms: usize,
    pub target_evals: u64,
    pub proposal_evals: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LooResult {
    #[serde(serialize_with = "nonfinite_f64")]
    pub elpd_loo: f64,
    pub n_bad: usize,
    pub k_threshold: f64,
    pub folds: Vec<LooFoldReport>,
}

impl LooResult {
    fn from_folds(mut folds: Vec<LooFoldReport>, k_threshold: f64) -> Self {
        folds.sort_by_key(|f| f.fold);
        let elpd_loo = folds.iter().map(|f| f.elpd).sum();
        let n_bad = folds.iter().filter(|f| !(f.khat_final <= k_threshold)).count();
        Self { elpd_loo, n_bad, k_threshold, folds }
    }

    pub fn fold(&self, i: usize) -> Option<&LooFoldReport> {
        self.folds.iter().find(|f| f.fold == i)
    }

    pub fn total_counters(&self) -> EvalCounters {
        let mut c = EvalCounters::default();
        for f in &self.folds {
            c.add(EvalCounters { target_evals: f.target_evals, proposal_evals: f.proposal_evals });
        }
        c
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// One row per fold: `i,elpd_i,khat_initial,khat_final,method`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["i", "elpd_i", "khat_initial", "khat_final", "method"])?;
        for f in &self.folds {
            wtr.write_record([
                f.fold.to_string(),
                fmt_f64(f.elpd),
                fmt_f64(f.khat_initial),
                fmt_f64(f.khat_final),
                f.method.as_str().to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Formats floats for CSV output, writing non-finite values as `inf`, `-inf`, `nan`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        x.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LooOptions {
    pub adapt: AdaptOptions,
    /// Maximum number of folds that may be refitted.
    pub refit_budget: usize,
    /// Restricts the computation to these folds.
    pub folds: Option<Vec<usize>>,
}

impl Default for LooOptions {
    fn default() -> Self {
        Self { adapt: AdaptOptions::default(), refit_budget: 0, folds: None }
    }
}

impl LooOptions {
    fn fold_list(&self, n: usize) -> Result<Vec<usize>> {
        match &self.folds {
            None => Ok((0..n).collect()),
            Some(f) => {
                if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                    return Err(Error::InvalidArgument(format!("fold {bad} out of range")));
                }
                Ok(f.clone())
            }
        }
    }
}

/// Raw LOO importance weights `1 / p(y_i | theta)`.
pub fn loo_log_weights(loglik_i: &[f64]) -> Result<LogWeights> {
    if let Some(s) = loglik_i.iter().position(|l| !l.is_finite()) {
        return Err(Error::Data(format!("non-finite log likelihood at draw {s}")));
    }
    LogWeights::from_log(loglik_i.iter().map(|l| -l).collect(), false)
}

/// Self-normalized estimate of `log p(y_i | y_-i)` from LOO weights.
fn snis_elpd(lw: &LogWeights, loglik: &[f64]) -> f64 {
    let num: Vec<f64> = lw.log_mag().iter().zip(loglik).map(|(w, l)| w + l).collect();
    log_sum_exp(&num) - log_sum_exp(lw.log_mag())
}

fn psis_fold(loglik: &[f64], fold: usize, opts: &AdaptOptions) -> Result<LooFoldReport> {
    let lw = loo_log_weights(loglik)?;
    let (smoothed, diag) = maybe_smooth(&lw, opts.smoothing);
    let s = loglik.len() as u64;
    Ok(LooFoldReport {
        fold,
        elpd: snis_elpd(&smoothed, loglik),
        khat_initial: diag.khat,
        khat_final: diag.khat,
        khat_reported: diag.khat,
        method: LooMethod::Psis,
        n_transforms: 0,
        target_evals: 0,
        proposal_evals: s,
    })
}

fn column(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.column(i).to_vec()
}

fn check_inputs<M: Model + ?Sized>(model: &M, draws: &DrawMatrix, log_post: &[f64]) -> Result<()> {
    if draws.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: draws.dim() });
    }
    if log_post.len() != draws.n_draws() {
        return Err(Error::LengthMismatch { expected: draws.n_draws(), got: log_post.len() });
    }
    Ok(())
}

/// Pareto smoothed importance sampling LOO.
pub fn psis_loo<M: Model + ?Sized>(
    model: &M,
    draws: &DrawMatrix,
    log_post: &[f64],
    opts: &LooOptions,
) -> Result<LooResult> {
    check_inputs(model, draws, log_post)?;
    let ll = log_lik_matrix(model, draws);
    psis_loo_from_loglik(&ll, opts)
}

/// PSIS-LOO from a draws-by-observations log likelihood matrix.
pub fn psis_loo_from_loglik(loglik: &Array2<f64>, opts: &LooOptions) -> Result<LooResult> {
    let folds = opts.fold_list(loglik.ncols())?;
    let reports = folds
        .par_iter()
        .map(|&i| psis_fold(&column(loglik, i), i, &opts.adapt))
        .collect::<Result<Vec<_>>>()?;
    Ok(LooResult::from_folds(reports, opts.adapt.k_threshold))
}

struct MmOutcome {
    report: LooFoldReport,
    needs_refit: bool,
}

fn mm_fold<M: Model + ?Sized>(
    model: &M,
    draws: &DrawMatrix,
    log_post: &[f64],
    loglik: &[f64],
    fold: usize,
    opts: &AdaptOptions,
) -> Result<MmOutcome> {
    let psis = psis_fold(loglik, fold, opts)?;
    if psis.khat_initial <= opts.k_threshold {
        return Ok(MmOutcome { report: psis, needs_refit: false });
    }
    let s = draws.n_draws() as u64;
    let fold_opts = AdaptOptions { seed: task_seed(opts.seed, fold as u64), ..*opts };
    let res = adapt_loop(
        draws,
        log_post,
        Some(loo_log_weights(loglik)?),
        |x, lg| {
            let lw: Vec<f64> = x
                .rows()
                .zip(lg)
                .map(|(r, g)| {
                    let t = r.as_slice().expect("standard layout");
                    model.log_joint(t) - model.log_lik(t, fold) - g
                })
                .collect();
            LogWeights::from_log(lw, false)
        },
        &fold_opts,
    )?;
    let mut counters = res.counters;
    counters.proposal_evals += s;

    let mut report = LooFoldReport {
        khat_final: res.khat,
        n_transforms: res.chain.len(),
        method: if res.converged { LooMethod::PsisMm } else { LooMethod::Failed },
        ..psis
    };
    if !res.chain.is_empty() {
        // pseudo-draws are scored by the model, so put them on the scale of `log_post`
        let offset = log_post[0] - model.log_joint(draws.row(0).as_slice().expect("standard layout"));
        let split = build_split_proposal(
            draws,
            log_post,
            &res.chain,
            &crate::affine::TransformChain::identity(),
            |x| Ok(log_joint_at(model, x).iter().map(|v| v + offset).collect()),
            fold_opts.seed,
        )?;
        counters.target_evals += s + 1;
        let ll_split = log_lik_column(model, &split.draws, fold);
        let lp_split = log_joint_at(model, &split.draws);
        counters.target_evals += s;
        let lw: Vec<f64> = lp_split
            .iter()
            .zip(&ll_split)
            .zip(&split.log_density)
            .map(|((p, l), g)| p - l - g)
            .collect();
        let lw = LogWeights::from_log(lw, false)?;
        let (smoothed, dw) = maybe_smooth(&lw, opts.smoothing);
        let lv = LogWeights::from_log(lw.log_mag().iter().zip(&ll_split).map(|(w, l)| w + l).collect(), false)?;
        let dv = fit_gpd_tail(&lv);
        report.elpd = snis_elpd(&smoothed, &ll_split);
        report.khat_reported = dw.khat.max(dv.khat);
    }
    report.target_evals = counters.target_evals;
    report.proposal_evals = counters.proposal_evals;
    Ok(MmOutcome { report, needs_refit: !res.converged })
}

/// Refits the fold by sampling its LOO posterior and estimating
/// `p(y_i | y_-i)` by simple Monte Carlo, moment matching if needed.
fn refit_fold<M: Model + ?Sized>(
    model: &M,
    n_draws: usize,
    fold: usize,
    prior: &LooFoldReport,
    opts: &AdaptOptions,
) -> Result<LooFoldReport> {
    let seed = task_seed(task_seed(opts.seed, fold as u64), 1);
    let draws = model.sample_posterior(n_draws, seed, Some(fold))?;
    let ll = log_lik_column(model, &draws, fold);
    let s = n_draws as u64;
    let log_target: Vec<f64> = log_joint_at(model, &draws).iter().zip(&ll).map(|(p, l)| p - l).collect();
    // weights are p / g_T * h with p = g initially
    let initial = LogWeights::from_log(ll.clone(), true)?;
    let res = adapt_loop(
        &draws,
        &log_target,
        Some(initial),
        |x, lg| {
            let lv: Vec<f64> = x
                .rows()
                .zip(lg)
                .map(|(r, g)| {
                    let t = r.as_slice().expect("standard layout");
                    // p(theta | y_-i) p(y_i | theta) / g_T is the full joint over g_T
                    model.log_joint(t) - g
                })
                .collect();
            LogWeights::from_log(lv, true)
        },
        opts,
    )?;
    let (smoothed, _) = maybe_smooth(&res.final_weights, opts.smoothing);
    let elpd = log_sum_exp(smoothed.log_mag()) - (n_draws as f64).ln();
    let method = match (res.chain.is_empty(), res.converged) {
        (true, true) => LooMethod::RefitMc,
        (false, true) => LooMethod::RefitMm,
        _ => LooMethod::Failed,
    };
    let khat_initial_refit = fit_gpd_tail(&LogWeights::from_log(ll, true)?).khat;
    log::info!("fold {fold}: refit k-hat {khat_initial_refit:.3} -> {:.3}", res.khat);
    Ok(LooFoldReport {
        fold,
        elpd,
        khat_initial: prior.khat_initial,
        khat_final: res.khat,
        khat_reported: res.khat,
        method,
        n_transforms: res.chain.len(),
        target_evals: prior.target_evals + res.counters.target_evals + s,
        proposal_evals: prior.proposal_evals + s,
    })
}

/// Moment matching LOO: PSIS where reliable, otherwise implicit adaptation of
/// the full-data posterior draws, then refits within the budget.
pub fn mm_loo<M: Model + ?Sized>(
    model: &M,
    draws: &DrawMatrix,
    log_post: &[f64],
    opts: &LooOptions,
) -> Result<LooResult> {
    check_inputs(model, draws, log_post)?;
    let folds = opts.fold_list(model.n_obs())?;
    let outcomes = folds
        .par_iter()
        .map(|&i| {
            let ll = log_lik_column(model, draws, i);
            mm_fold(model, draws, log_post, &ll, i, &opts.adapt)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut refit: Vec<usize> = outcomes.iter().filter(|o| o.needs_refit).map(|o| o.report.fold).collect();
    refit.sort_unstable();
    refit.truncate(opts.refit_budget);
    let reports = outcomes
        .into_par_iter()
        .map(|o| {
            if refit.binary_search(&o.report.fold).is_ok() {
                refit_fold(model, draws.n_draws(), o.report.fold, &o.report, &opts.adapt)
            } else {
                if o.needs_refit {
                    log::warn!("fold {}: k-hat {:.3} above threshold after moment matching", o.report.fold, o.report.khat_final);
                }
                Ok(o.report)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LooResult::from_folds(reports, opts.adapt.k_threshold))
}

/// Brute-force LOO: samples every fold's posterior and averages the
/// predictive density over those draws.
pub fn naive_loo<M: Model + ?Sized>(model: &M, n_draws: usize, opts: &LooOptions) -> Result<LooResult> {
    let folds = opts.fold_list(model.n_obs())?;
    let reports = folds
        .par_iter()
        .map(|&i| {
            let draws = model.sample_posterior(n_draws, task_seed(opts.adapt.seed, i as u64), Some(i))?;
            let ll = log_lik_column(model, &draws, i);
            let khat = fit_gpd_tail(&LogWeights::from_log(ll.clone(), true)?).khat;
            let s = n_draws as u64;
            Ok(LooFoldReport {
                fold: i,
                elpd: log_sum_exp(&ll) - (n_draws as f64).ln(),
                khat_initial: khat,
                khat_final: khat,
                khat_reported: khat,
                method: LooMethod::RefitMc,
                n_transforms: 0,
                target_evals: s,
                proposal_evals: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LooResult::from_folds(reports, opts.adapt.k_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{snis_estimate, FunctionValues};
    use crate::models::{gaussian_analytic_loo_lpd, GaussianModel};

    #[test]
    fn raw_weights() {
        let w = loo_log_weights(&[0.0, 0.0]).unwrap();
        assert_eq!(w.log_mag(), &[0.0, 0.0]);
        let w = loo_log_weights(&[-1.0, -2.0]).unwrap();
        assert_eq!(w.log_mag(), &[1.0, 2.0]);
        assert!(!w.normalized());
    }

    #[test]
    fn numerator_is_one() {
        let ll = vec![-0.3, -2.5, -1.1, -0.05, -4.0];
        let w = loo_log_weights(&ll).unwrap();
        let h = FunctionValues::from_values(&ll.iter().map(|l| l.exp()).collect::<Vec<_>>()).unwrap();
        let est = snis_estimate(&w, &h).unwrap();
        let sum_w: f64 = ll.iter().map(|l| (-l).exp()).sum();
        assert!((est - 5.0 / sum_w).abs() < 1e-14);
    }

    #[test]
    fn constant_loglik_fold() {
        let ll = Array2::from_elem((100, 1), -1.7);
        let r = psis_loo_from_loglik(&ll, &LooOptions::default()).unwrap();
        assert!((r.folds[0].elpd + 1.7).abs() < 1e-12);
        assert_eq!(r.folds[0].khat_initial, f64::NEG_INFINITY);
    }

    #[test]
    fn csv_schema() {
        let ll = Array2::from_elem((100, 2), -1.0);
        let r = psis_loo_from_loglik(&ll, &LooOptions::default()).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "i,elpd_i,khat_initial,khat_final,method");
        assert_eq!(text.lines().nth(1).unwrap(), "0,-1,-inf,-inf,psis");
    }

    #[test]
    fn easy_gaussian_short_circuits() {
        let y: Vec<f64> = vec![0.1, -0.6, 1.2, 0.4, -1.4, 0.9, -0.2, 0.0, 0.7, -0.9];
        let m = GaussianModel::new(y.clone()).unwrap();
        let draws = m.sample_posterior(4000, 1, None).unwrap();
        let lp = log_joint_at(&m, &draws);
        let opts = LooOptions::default();
        let psis = psis_loo(&m, &draws, &lp, &opts).unwrap();
        let mm = mm_loo(&m, &draws, &lp, &opts).unwrap();
        assert_eq!(psis, mm);
        assert_eq!(mm.n_bad, 0);
        for f in &mm.folds {
            assert_eq!(f.method, LooMethod::Psis);
            let exact = gaussian_analytic_loo_lpd(&y, f.fold).unwrap();
            assert!((f.elpd - exact).abs() < 0.1, "{} {}", f.elpd, exact);
        }
    }

    #[test]
    fn outlier_fold_is_repaired() {
        let y = crate::models::gaussian_outlier_data(3, 29, 12.0);
        let m = GaussianModel::new(y.clone()).unwrap();
        let draws = m.sample_posterior(4000, 5, None).unwrap();
        let lp = log_joint_at(&m, &draws);
        let opts = LooOptions { folds: Some(vec![29]), ..Default::default() };
        let r = mm_loo(&m, &draws, &lp, &opts).unwrap();
        let f = r.fold(29).unwrap();
        let exact = gaussian_analytic_loo_lpd(&y, 29).unwrap();
        assert_eq!(f.method, LooMethod::PsisMm);
        assert!(f.khat_initial > 0.7);
        assert!(f.khat_final < 0.7 && f.khat_final <= f.khat_initial);
        assert!((f.elpd - exact).abs() < 0.5, "{} {}", f.elpd, exact);
        assert_eq!(f.proposal_evals, 4000);
    }
}
