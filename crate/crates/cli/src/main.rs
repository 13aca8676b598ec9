use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use iwmm::experiments::{gaussian_outlier_sweep, write_comparison_csv, write_sweep_csv, SweepConfig, SweepMethod};
use iwmm::iwmm::AdaptOptions;
use iwmm::loo::{mm_loo, psis_loo, LooOptions, LooResult};
use iwmm::models::{log_joint_at, Dataset, GaussianModel, Model, PoissonGlm};
use iwmm::pareto::{fit_gpd_tail, is_reliable, maybe_smooth};
use iwmm::{LogWeights, DEFAULT_K_THRESHOLD};

const EXIT_FAILURE: u8 = 1;
const EXIT_UNRELIABLE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "iwmm", version, about = "Importance weighted moment matching and Pareto smoothed diagnostics")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Posterior or proposal draws per run.
    #[arg(long = "draws", global = true, default_value_t = 4000)]
    draws: usize,
    #[arg(long, global = true, default_value_t = DEFAULT_K_THRESHOLD)]
    k_threshold: f64,
    /// Use raw instead of Pareto smoothed weights.
    #[arg(long, global = true)]
    no_smoothing: bool,
    /// Folds that may be refitted when moment matching fails.
    #[arg(long, global = true, default_value_t = 0)]
    refit_budget: usize,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pareto diagnostic of a one-column weight file.
    Diagnose {
        weights: PathBuf,
        /// The file holds log weights.
        #[arg(long)]
        log: bool,
    },
    /// Pareto smoothed weights of a one-column weight file.
    Smooth {
        weights: PathBuf,
        #[arg(long)]
        log: bool,
    },
    /// LOO density of a moving last observation, all methods against the closed form.
    ExperimentGaussian {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Moment matching versus parametric adaptive importance sampling.
    AisCompare {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Leave-one-out cross-validation of a bundled model.
    Loo {
        #[arg(value_enum)]
        model: ModelName,
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LooKind::Mm)]
        method: LooKind,
        /// Also write the per-fold table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct GridArgs {
    /// Values of the last observation.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 4.0, 8.0, 12.0, 16.0, 20.0])]
    grid: Vec<f64>,
    /// Number of replications, seeded from `--seed` upwards.
    #[arg(long, default_value_t = 10)]
    replications: u64,
    /// Seed of the fixed base observations.
    #[arg(long, default_value_t = 3)]
    data_seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelName {
    Gaussian,
    #[value(name = "poisson_glm")]
    PoissonGlm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LooKind {
    Psis,
    Mm,
}

#[derive(Serialize)]
struct DiagnoseReport {
    #[serde(serialize_with = "json_f64")]
    khat: f64,
    sigma: f64,
    tail_len: usize,
    reliable: bool,
}

fn json_f64<S: serde::Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(&iwmm::loo::fmt_f64(*x))
    }
}

impl Cli {
    fn adapt_options(&self) -> AdaptOptions {
        AdaptOptions {
            k_threshold: self.k_threshold,
            smoothing: !self.no_smoothing,
            seed: self.seed,
            ..Default::default()
        }
    }

    fn check_adaptive(&self) -> anyhow::Result<()> {
        if self.draws < 100 {
            bail!("--draws must be at least 100");
        }
        Ok(())
    }
}

/// Reads one numeric column, tolerating a single non-numeric header line.
fn read_weight_column(path: &Path) -> anyhow::Result<Vec<f64>> {
    let mut text = String::new();
    File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?
        .read_to_string(&mut text)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 1 {
            bail!("line {}: expected one column, found {}", line + 1, rec.len());
        }
        let field = rec[0].trim();
        match field.parse::<f64>() {
            Ok(v) if !v.is_nan() => values.push(v),
            _ if line == 0 => continue,
            _ => bail!("line {}: cannot parse {field:?} as a number", line + 1),
        }
    }
    if values.is_empty() {
        bail!("no weights in {}", path.display());
    }
    Ok(values)
}

fn read_weights(path: &Path, log: bool) -> anyhow::Result<LogWeights> {
    let v = read_weight_column(path)?;
    Ok(if log { LogWeights::from_log(v, false)? } else { LogWeights::from_weights(&v, false)? })
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_model(name: ModelName, path: &Path) -> anyhow::Result<Box<dyn Model>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let data = Dataset::read_csv(file)?;
    Ok(match name {
        ModelName::Gaussian => Box::new(GaussianModel::new(data.y)?),
        ModelName::PoissonGlm => Box::new(PoissonGlm::new(&data)?),
    })
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    if !(cli.k_threshold > 0.0) {
        bail!("--k-threshold must be positive");
    }
    match &cli.command {
        Command::Diagnose { weights, log } => {
            let d = fit_gpd_tail(&read_weights(weights, *log)?);
            let report = DiagnoseReport { khat: d.khat, sigma: d.sigma, tail_len: d.tail_len, reliable: is_reliable(&d, cli.k_threshold) };
            let mut out = output(cli.out.as_deref())?;
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
            out.flush()?;
            Ok(if report.reliable { 0 } else { EXIT_UNRELIABLE })
        }
        Command::Smooth { weights, log } => {
            let w = read_weights(weights, *log)?;
            let (smoothed, d) = maybe_smooth(&w, true);
            eprintln!("khat={} tail_len={}", iwmm::loo::fmt_f64(d.khat), d.tail_len);
            let mut wtr = csv::Writer::from_writer(output(cli.out.as_deref())?);
            wtr.write_record([if *log { "log_weight" } else { "weight" }])?;
            for &l in smoothed.log_mag() {
                let v = if *log { l } else { l.exp() };
                wtr.write_record([v.to_string()])?;
            }
            wtr.flush()?;
            Ok(0)
        }
        Command::ExperimentGaussian { grid } | Command::AisCompare { grid } => {
            cli.check_adaptive()?;
            let compare = matches!(cli.command, Command::AisCompare { .. });
            let methods = if compare {
                vec![
                    SweepMethod::PsisMm,
                    SweepMethod::AisGaussian,
                    SweepMethod::AisStudentT3,
                    SweepMethod::AisGaussianDouble,
                    SweepMethod::AisStudentT3Double,
                ]
            } else {
                SweepMethod::ALL.to_vec()
            };
            if grid.grid.iter().any(|v| !v.is_finite()) {
                bail!("grid values must be finite");
            }
            let cfg = SweepConfig {
                y_grid: grid.grid.clone(),
                seeds: (cli.seed..cli.seed + grid.replications).collect(),
                draws: cli.draws,
                data_seed: grid.data_seed,
                k_threshold: cli.k_threshold,
                smoothing: !cli.no_smoothing,
                methods,
                ..Default::default()
            };
            let rows = gaussian_outlier_sweep(&cfg)?;
            let out = output(cli.out.as_deref())?;
            if compare {
                write_comparison_csv(&rows, out)?;
            } else {
                write_sweep_csv(&rows, out)?;
            }
            Ok(0)
        }
        Command::Loo { model, data, method, csv } => {
            cli.check_adaptive()?;
            let start = Instant::now();
            let model = load_model(*model, data)?;
            let draws = model.sample_posterior(cli.draws, cli.seed, None)?;
            let log_post = log_joint_at(model.as_ref(), &draws);
            let opts = LooOptions { adapt: cli.adapt_options(), refit_budget: cli.refit_budget, folds: None };
            let result = match method {
                LooKind::Psis => psis_loo(model.as_ref(), &draws, &log_post, &opts)?,
                LooKind::Mm => mm_loo(model.as_ref(), &draws, &log_post, &opts)?,
            };
            write_loo(cli, &result, csv.as_deref())?;
            let c = result.total_counters();
            eprintln!(
                "elpd_loo={:.4} n_bad={} target_evals={} proposal_evals={} wall={:.2}s",
                result.elpd_loo,
                result.n_bad,
                c.target_evals,
                c.proposal_evals,
                start.elapsed().as_secs_f64()
            );
            let failed = result.folds.iter().filter(|f| f.method == iwmm::loo::LooMethod::Failed).count();
            if failed > 0 {
                eprintln!("error: {failed} refitted folds did not reach a reliable estimate");
                return Ok(EXIT_FAILURE);
            }
            Ok(0)
        }
    }
}

fn write_loo(cli: &Cli, result: &LooResult, csv: Option<&Path>) -> anyhow::Result<()> {
    let mut out = output(cli.out.as_deref())?;
    result.write_json(&mut out)?;
    writeln!(out)?;
    out.flush()?;
    if let Some(p) = csv {
        result.write_csv(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FAILURE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
