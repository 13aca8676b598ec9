//! Gaussian outlier study: LOO predictive density of the last observation as
//! it moves away from the rest, estimated by every method in the crate and
//! compared against the closed form.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{ais_run, AisOptions, ParametricProposal, ProposalFamily};
use crate::error::Result;
use crate::estimators::{DrawMatrix, FunctionValues};
use crate::iwmm::AdaptOptions;
use crate::loo::{fmt_f64, mm_loo, naive_loo, psis_loo, LooOptions};
use crate::models::{gaussian_analytic_loo_lpd, gaussian_outlier_data, log_joint_at, log_lik_column, GaussianModel, Model};
use crate::task_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    Analytic,
    Naive,
    Psis,
    PsisMm,
    AisGaussian,
    AisStudentT3,
    AisGaussianDouble,
    AisStudentT3Double,
}

impl SweepMethod {
    pub const ALL: [SweepMethod; 8] = [
        Self::Analytic,
        Self::Naive,
        Self::Psis,
        Self::PsisMm,
        Self::AisGaussian,
        Self::AisStudentT3,
        Self::AisGaussianDouble,
        Self::AisStudentT3Double,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Analytic => "analytic",
            Self::Naive => "naive",
            Self::Psis => "psis",
            Self::PsisMm => "psis_mm",
            Self::AisGaussian => "ais_gaussian",
            Self::AisStudentT3 => "ais_t3",
            Self::AisGaussianDouble => "ais_gaussian_double",
            Self::AisStudentT3Double => "ais_t3_double",
        }
    }

    fn ais_setup(self) -> Option<(ProposalFamily, bool)> {
        match self {
            Self::AisGaussian => Some((ProposalFamily::Gaussian, false)),
            Self::AisStudentT3 => Some((ProposalFamily::StudentT3, false)),
            Self::AisGaussianDouble => Some((ProposalFamily::Gaussian, true)),
            Self::AisStudentT3Double => Some((ProposalFamily::StudentT3, true)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub y_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub draws: usize,
    /// Seed of the fixed base observations.
    pub data_seed: u64,
    pub n_base: usize,
    pub k_threshold: f64,
    pub smoothing: bool,
    pub methods: Vec<SweepMethod>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            y_grid: vec![0.0, 4.0, 8.0, 12.0, 16.0, 20.0],
            seeds: (0..50).collect(),
            draws: 4000,
            data_seed: 3,
            n_base: 29,
            k_threshold: crate::DEFAULT_K_THRESHOLD,
            smoothing: true,
            methods: SweepMethod::ALL.to_vec(),
        }
    }
}

/// One method's estimate for one `(y, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub y_last: f64,
    pub seed: u64,
    pub method: SweepMethod,
    pub elpd: f64,
    pub analytic: f64,
    pub khat: f64,
    pub converged: bool,
    /// Accepted transforms for moment matching, iterations for AIS.
    pub steps: usize,
    pub target_evals: u64,
    pub proposal_evals: u64,
}

impl SweepRow {
    pub fn abs_error(&self) -> f64 {
        (self.elpd - self.analytic).abs()
    }
}

/// Runs every configured method on the last fold of one data set.
pub fn outlier_cell(cfg: &SweepConfig, y_last: f64, seed: u64) -> Result<Vec<SweepRow>> {
    let y = gaussian_outlier_data(cfg.data_seed, cfg.n_base, y_last);
    let fold = y.len() - 1;
    let analytic = gaussian_analytic_loo_lpd(&y, fold)?;
    let model = GaussianModel::new(y)?;
    let draws = model.sample_posterior(cfg.draws, task_seed(seed, 0), None)?;
    let log_post = log_joint_at(&model, &draws);
    let adapt = AdaptOptions {
        k_threshold: cfg.k_threshold,
        smoothing: cfg.smoothing,
        seed: task_seed(seed, 1),
        ..Default::default()
    };
    let opts = LooOptions { adapt, refit_budget: 0, folds: Some(vec![fold]) };
    let row = |method, elpd, khat, converged, steps, target_evals, proposal_evals| SweepRow {
        y_last,
        seed,
        method,
        elpd,
        analytic,
        khat,
        converged,
        steps,
        target_evals,
        proposal_evals,
    };

    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let r = match method {
            SweepMethod::Analytic => row(method, analytic, f64::NAN, true, 0, 0, 0),
            SweepMethod::Naive | SweepMethod::Psis | SweepMethod::PsisMm => {
                let res = match method {
                    SweepMethod::Naive => naive_loo(&model, cfg.draws, &LooOptions { adapt: AdaptOptions { seed: task_seed(seed, 2), ..adapt }, ..opts.clone() })?,
                    SweepMethod::Psis => psis_loo(&model, &draws, &log_post, &opts)?,
                    _ => mm_loo(&model, &draws, &log_post, &opts)?,
                };
                let f = &res.folds[0];
                row(
                    method,
                    f.elpd,
                    f.khat_reported,
                    f.khat_final <= cfg.k_threshold,
                    f.n_transforms,
                    f.target_evals,
                    f.proposal_evals,
                )
            }
            _ => {
                let (family, double_adapt) = method.ais_setup().expect("AIS method");
                let init = ParametricProposal::from_draws(family, &draws)?;
                let ais = AisOptions {
                    s_per_iter: cfg.draws,
                    k_threshold: cfg.k_threshold,
                    double_adapt,
                    smoothing: cfg.smoothing,
                    seed: task_seed(seed, 3 + u64::from(double_adapt) * 2 + u64::from(family == ProposalFamily::StudentT3)),
                    ..Default::default()
                };
                let res = ais_run(
                    |d: &DrawMatrix| {
                        let ll = log_lik_column(&model, d, fold);
                        Ok(log_joint_at(&model, d).iter().zip(ll).map(|(p, l)| p - l).collect())
                    },
                    |d: &DrawMatrix| FunctionValues::from_log_positive(&log_lik_column(&model, d, fold)),
                    &init,
                    &ais,
                )?;
                row(
                    method,
                    res.log_abs_estimate,
                    res.khat,
                    res.converged,
                    res.iterations.len(),
                    res.counters.target_evals,
                    res.counters.proposal_evals,
                )
            }
        };
        rows.push(r);
    }
    Ok(rows)
}

/// The whole grid, parallel over cells; rows are ordered by grid value,
/// seed, then method.
pub fn gaussian_outlier_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let cells: Vec<(f64, u64)> = cfg.y_grid.iter().flat_map(|&y| cfg.seeds.iter().map(move |&s| (y, s))).collect();
    let per_cell = cells
        .par_iter()
        .map(|&(y, s)| outlier_cell(cfg, y, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// Columns `y30,seed,method,elpd,analytic,khat`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["y30", "seed", "method", "elpd", "analytic", "khat"])?;
    for r in rows {
        wtr.write_record([
            fmt_f64(r.y_last),
            r.seed.to_string(),
            r.method.as_str().to_string(),
            fmt_f64(r.elpd),
            fmt_f64(r.analytic),
            fmt_f64(r.khat),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Columns `y30,seed,method,elpd,abs_error,khat,converged,steps,target_evals,proposal_evals`.
pub fn write_comparison_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "y30", "seed", "method", "elpd", "abs_error", "khat", "converged", "steps", "target_evals", "proposal_evals",
    ])?;
    for r in rows {
        wtr.write_record([
            fmt_f64(r.y_last),
            r.seed.to_string(),
            r.method.as_str().to_string(),
            fmt_f64(r.elpd),
            fmt_f64(r.abs_error()),
            fmt_f64(r.khat),
            r.converged.to_string(),
            r.steps.to_string(),
            r.target_evals.to_string(),
            r.proposal_evals.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mean absolute error per method and grid value.
pub fn mean_abs_error(rows: &[SweepRow], method: SweepMethod, y_last: f64) -> Option<f64> {
    let errs: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.y_last == y_last)
        .map(SweepRow::abs_error)
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}
