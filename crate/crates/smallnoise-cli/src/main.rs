//! Command-line front end. Five subcommands cover the pipeline stages:
//!
//!   minimize     enumerate minimizing controls for a projected target
//!   check-nd     run the non-degeneracy certificates on those minimizers
//!   expand       assemble the density exponents (c1, c2) at fixed horizon
//!   short-time   the same in the short-time regime (eps = sqrt(t))
//!   mc-validate  compare predicted exponents against Euler-Maruyama paths
//!
//! Reports go to stdout (or `--out`) as JSON by default. Exit codes: 0 on
//! success, 2 when `--strict-nd` is set and certification fails, 3 when the
//! target is unreachable or sits on the deterministic flow, 1 otherwise.

mod emit;
mod reports;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use smallnoise::bvp::{self, MultistartConfig, TargetSpec};
use smallnoise::nalgebra::DVector;
use smallnoise::expansion::{self, ExpansionOptions};
use smallnoise::montecarlo::{self, Bandwidth, McConfig};
use smallnoise::nondegeneracy::{assemble_nd_report, NdOptions};
use smallnoise::VectorFieldSystem;

use reports::{CheckNdReport, ExpandReport, McReport, MinimizeReport, RunManifest};

#[derive(Parser)]
#[command(name = "smallnoise", version, about = "Small-noise density expansions for projected diffusions", long_about = None)]
struct Cli {
    /// Worker threads for the multistart search (or SMALLNOISE_JOBS).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate minimizing controls steering the projection to the target.
    Minimize(MinimizeArgs),
    /// Certify non-degeneracy: covariance, focality, bracket ranks.
    CheckNd(CheckNdArgs),
    /// Compute the density expansion exponents at fixed horizon.
    Expand(ExpandArgs),
    /// Short-time expansion: unit-horizon rescaling with frozen start.
    ShortTime(ShortTimeArgs),
    /// Validate predicted exponents against simulated densities.
    McValidate(McArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// `builtin:<name>` or a path to a JSON/TOML model file.
    #[arg(long)]
    model: String,
    /// Builtin parameter override, `name=value`. Repeatable.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    params: Vec<String>,
    /// Observed coordinates of a builtin, comma separated natural indices.
    #[arg(long, value_name = "I,J,...")]
    mask: Option<String>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct SolveArgs {
    /// Target values of the observed coordinates, comma separated.
    #[arg(long, value_name = "A1,A2,...", allow_hyphen_values = true)]
    target: String,
    /// Terminal time (default 1).
    #[arg(long)]
    horizon: Option<f64>,
    /// Multistart budget, split between low-discrepancy and Gaussian seeds.
    #[arg(long, default_value_t = 128)]
    multistart: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Runge-Kutta steps over the horizon during the Newton stage.
    #[arg(long, default_value_t = 1024)]
    steps: usize,
    /// Report file; stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

#[derive(Args)]
struct MinimizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Write each minimizing path as CSV; `-<k>` is inserted before the
    /// extension for the k-th minimizer.
    #[arg(long, value_name = "FILE")]
    emit_paths: Option<PathBuf>,
}

#[derive(Args)]
struct CheckNdArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Also run the discretized-Hessian second-order check.
    #[arg(long)]
    hessian_oracle: bool,
    /// Control intervals for the Hessian discretization.
    #[arg(long, default_value_t = 32, value_name = "N")]
    oracle_grid: usize,
}

#[derive(Args)]
struct ExpandArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    solve: SolveArgs,
    #[arg(long)]
    hessian_oracle: bool,
    #[arg(long, default_value_t = 32, value_name = "N")]
    oracle_grid: usize,
    /// Cross-check each multiplier against a finite-difference gradient.
    #[arg(long)]
    check_gradient: bool,
    /// Exit with status 2 unless every certificate passes.
    #[arg(long)]
    strict_nd: bool,
    /// Write the predicted log-density curve as CSV.
    #[arg(long, value_name = "FILE")]
    emit_plot_data: Option<PathBuf>,
    /// Noise levels for the plot grid (default 0.05..0.50).
    #[arg(long, value_name = "E1,E2,...")]
    epsilons: Option<String>,
}

#[derive(Args)]
struct ShortTimeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    solve: SolveArgs,
    #[arg(long)]
    strict_nd: bool,
    #[arg(long, value_name = "FILE")]
    emit_plot_data: Option<PathBuf>,
    /// Values of sqrt(t) for the plot grid.
    #[arg(long, value_name = "E1,E2,...")]
    epsilons: Option<String>,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_name = "A1,A2,...", allow_hyphen_values = true)]
    target: String,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// Noise ladder, strictly decreasing.
    #[arg(long, value_name = "E1,E2,...", default_value = "0.4,0.3,0.2,0.15,0.1")]
    epsilons: String,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 400)]
    euler_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed kernel bandwidth; Silverman's rule when absent.
    #[arg(long, value_name = "H")]
    bandwidth: Option<f64>,
    /// Localization radii for exit-probability diagnostics.
    #[arg(long, value_name = "R1,R2,...")]
    radii: Option<String>,
    /// Predicted exponents to compare against, `c1,c2`.
    #[arg(long, value_name = "C1,C2", allow_hyphen_values = true)]
    reference: Option<String>,
    /// Write the rescaled exponent observable and its fit as CSV.
    #[arg(long, value_name = "FILE")]
    emit_plot_data: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<smallnoise::Error>() {
                Some(smallnoise::Error::NoAdmissibleControl { .. })
                | Some(smallnoise::Error::DegenerateTarget) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    init_threads(cli.jobs)?;
    match cli.command {
        Command::Minimize(a) => cmd_minimize(a),
        Command::CheckNd(a) => cmd_check_nd(a),
        Command::Expand(a) => cmd_expand(a),
        Command::ShortTime(a) => cmd_short_time(a),
        Command::McValidate(a) => cmd_mc_validate(a),
    }
}

fn init_threads(jobs: Option<usize>) -> Result<()> {
    let jobs = jobs.or_else(|| {
        std::env::var("SMALLNOISE_JOBS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }
    Ok(())
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("bad {what} entry {t:?}: {e}"))
        })
        .collect()
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| anyhow!("bad {what} entry {t:?}: {e}"))
        })
        .collect()
}

fn parse_params(kvs: &[String]) -> Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    for kv in kvs {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("expected NAME=VALUE, got {kv:?}"))?;
        let val: f64 = v
            .trim()
            .parse()
            .map_err(|e| anyhow!("bad value for parameter {k:?}: {e}"))?;
        map.insert(k.trim().to_string(), val);
    }
    Ok(map)
}

fn build_system(args: &ModelArgs) -> Result<(VectorFieldSystem, BTreeMap<String, f64>)> {
    let params = parse_params(&args.params)?;
    let mask = args
        .mask
        .as_deref()
        .map(|s| parse_usize_list(s, "mask"))
        .transpose()?;
    if let Some(name) = args.model.strip_prefix("builtin:") {
        let sys = VectorFieldSystem::builtin(name, &params, mask)?;
        return Ok((sys, params));
    }
    if !params.is_empty() {
        bail!("--param only applies to builtin models");
    }
    if mask.is_some() {
        bail!("--mask only applies to builtin models; set projection_mask in the model file");
    }
    let sys = VectorFieldSystem::load(Path::new(&args.model))
        .with_context(|| format!("loading model file {:?}", args.model))?;
    Ok((sys, BTreeMap::new()))
}

fn multistart_config(solve: &SolveArgs) -> MultistartConfig {
    MultistartConfig {
        n_lowdisc: solve.multistart / 2,
        n_normal: solve.multistart - solve.multistart / 2,
        seed: solve.seed,
        steps: solve.steps,
        ..MultistartConfig::default()
    }
}

fn manifest(
    command: &str,
    args: &ModelArgs,
    params: BTreeMap<String, f64>,
    sys: &VectorFieldSystem,
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        model: args.model.clone(),
        params,
        mask: sys.mask().to_vec(),
        target: None,
        horizon: None,
        seed: None,
        multistart: None,
        steps: None,
        paths: None,
        euler_steps: None,
        epsilons: None,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    }
}

fn fill_solve(man: &mut RunManifest, solve: &SolveArgs, target: &[f64], horizon: Option<f64>) {
    man.target = Some(target.to_vec());
    man.horizon = horizon;
    man.seed = Some(solve.seed);
    man.multistart = Some(solve.multistart);
    man.steps = Some(solve.steps);
}

fn write_output(text: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {p:?}")),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// `report.csv` -> `report-3.csv` for minimizer index 3.
fn numbered_path(base: &Path, k: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("path");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    base.with_file_name(format!("{stem}-{k}.{ext}"))
}

fn plot_grid(spec: &Option<String>) -> Result<Vec<f64>> {
    match spec {
        Some(s) => {
            let eps = parse_f64_list(s, "epsilons")?;
            if eps.iter().any(|&e| !e.is_finite() || e <= 0.0) {
                bail!("plot noise levels must be positive");
            }
            Ok(eps)
        }
        None => Ok((1..=10).map(|k| 0.05 * k as f64).collect()),
    }
}

fn cmd_minimize(a: MinimizeArgs) -> Result<ExitCode> {
    let (sys, params) = build_system(&a.model)?;
    let target_vals = parse_f64_list(&a.solve.target, "target")?;
    let horizon = a.solve.horizon.unwrap_or(1.0);
    let target = TargetSpec::new(DVector::from_vec(target_vals.clone()), horizon);
    let cfg = multistart_config(&a.solve);
    let set = bvp::enumerate_minimizers(&sys, &target, &cfg)?;

    if let Some(base) = &a.emit_paths {
        let names = sys.internal_coord_names();
        for (k, min) in set.minimizers.iter().enumerate() {
            let p = numbered_path(base, k);
            let mut buf = Vec::new();
            min.path.write_csv(&names, &mut buf)?;
            fs::write(&p, buf).with_context(|| format!("writing {p:?}"))?;
        }
    }

    let mut man = manifest("minimize", &a.model, params, &sys);
    fill_solve(&mut man, &a.solve, &target_vals, Some(horizon));
    let report = MinimizeReport::new(man, &set);
    let text = match a.solve.format {
        OutputFormat::Json => to_json(&report)?,
        OutputFormat::Csv => emit::minimize_csv(&report),
    };
    write_output(&text, &a.solve.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_check_nd(a: CheckNdArgs) -> Result<ExitCode> {
    let (sys, params) = build_system(&a.model)?;
    let target_vals = parse_f64_list(&a.solve.target, "target")?;
    let horizon = a.solve.horizon.unwrap_or(1.0);
    let target = TargetSpec::new(DVector::from_vec(target_vals.clone()), horizon);
    let cfg = multistart_config(&a.solve);
    let set = bvp::enumerate_minimizers(&sys, &target, &cfg)?;
    if set.degenerate_zero_control {
        return Err(smallnoise::Error::DegenerateTarget.into());
    }
    let opts = NdOptions {
        run_hessian_oracle: a.hessian_oracle,
        oracle_grid: a.oracle_grid,
        ..NdOptions::default()
    };
    let nd = assemble_nd_report(&sys, &target, &set, &opts)?;

    let mut man = manifest("check-nd", &a.model, params, &sys);
    fill_solve(&mut man, &a.solve, &target_vals, Some(horizon));
    let report = CheckNdReport::new(man, &set, &nd);
    if a.solve.format == OutputFormat::Csv {
        bail!("csv output is only available for minimize and mc-validate");
    }
    write_output(&to_json(&report)?, &a.solve.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_expand(a: ExpandArgs) -> Result<ExitCode> {
    let (sys, params) = build_system(&a.model)?;
    let target_vals = parse_f64_list(&a.solve.target, "target")?;
    let horizon = a.solve.horizon.unwrap_or(1.0);
    let target = TargetSpec::new(DVector::from_vec(target_vals.clone()), horizon);
    let cfg = multistart_config(&a.solve);
    let opts = ExpansionOptions {
        nd: NdOptions {
            run_hessian_oracle: a.hessian_oracle,
            oracle_grid: a.oracle_grid,
            ..NdOptions::default()
        },
        check_gradient: a.check_gradient,
    };
    let result = expansion::expand(&sys, &target, &cfg, &opts)?;

    if let Some(p) = &a.emit_plot_data {
        let grid = plot_grid(&a.epsilons)?;
        let csv = emit::predicted_curve_csv(result.c1, result.c2, result.ell, &grid);
        fs::write(p, csv).with_context(|| format!("writing {p:?}"))?;
    }

    let mut man = manifest("expand", &a.model, params, &sys);
    fill_solve(&mut man, &a.solve, &target_vals, Some(horizon));
    let report = ExpandReport::new(man, &result);
    if a.solve.format == OutputFormat::Csv {
        bail!("csv output is only available for minimize and mc-validate");
    }
    write_output(&to_json(&report)?, &a.solve.out)?;
    if a.strict_nd && !result.certified {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_short_time(a: ShortTimeArgs) -> Result<ExitCode> {
    if a.solve.horizon.is_some() {
        bail!("short-time mode rescales to unit horizon; --horizon does not apply");
    }
    let (sys, params) = build_system(&a.model)?;
    let target_vals = parse_f64_list(&a.solve.target, "target")?;
    let point = DVector::from_vec(target_vals.clone());
    let cfg = multistart_config(&a.solve);
    let opts = ExpansionOptions::default();
    let result = expansion::short_time(&sys, &point, &cfg, &opts)?;

    if let Some(p) = &a.emit_plot_data {
        let grid = plot_grid(&a.epsilons)?;
        let csv = emit::predicted_curve_csv(result.c1, result.c2, result.ell, &grid);
        fs::write(p, csv).with_context(|| format!("writing {p:?}"))?;
    }

    let mut man = manifest("short-time", &a.model, params, &sys);
    fill_solve(&mut man, &a.solve, &target_vals, None);
    let report = ExpandReport::new(man, &result);
    if a.solve.format == OutputFormat::Csv {
        bail!("csv output is only available for minimize and mc-validate");
    }
    write_output(&to_json(&report)?, &a.solve.out)?;
    if a.strict_nd && !result.certified {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_mc_validate(a: McArgs) -> Result<ExitCode> {
    let (sys, params) = build_system(&a.model)?;
    let target_vals = parse_f64_list(&a.target, "target")?;
    let target = TargetSpec::new(DVector::from_vec(target_vals.clone()), a.horizon);
    let epsilons = parse_f64_list(&a.epsilons, "epsilons")?;
    let radii = a
        .radii
        .as_deref()
        .map(|s| parse_f64_list(s, "radii"))
        .transpose()?
        .unwrap_or_default();
    let reference = match a.reference.as_deref() {
        Some(s) => {
            let v = parse_f64_list(s, "reference")?;
            if v.len() != 2 {
                bail!("--reference expects exactly c1,c2");
            }
            Some((v[0], v[1]))
        }
        None => None,
    };
    let cfg = McConfig {
        epsilons: epsilons.clone(),
        n_paths: a.paths,
        euler_steps: a.euler_steps,
        seed: a.seed,
        bandwidth: a.bandwidth.map_or(Bandwidth::Silverman, Bandwidth::Fixed),
        radii,
    };
    let validation = montecarlo::validate(&sys, &target, &cfg, reference)?;

    let mut man = manifest("mc-validate", &a.model, params, &sys);
    man.target = Some(target_vals);
    man.horizon = Some(a.horizon);
    man.seed = Some(a.seed);
    man.paths = Some(a.paths);
    man.euler_steps = Some(a.euler_steps);
    man.epsilons = Some(epsilons);
    let report = McReport::new(man, &validation);

    if let Some(p) = &a.emit_plot_data {
        let csv = emit::mc_curve_csv(&report);
        fs::write(p, csv).with_context(|| format!("writing {p:?}"))?;
    }

    let text = match a.format {
        OutputFormat::Json => to_json(&report)?,
        OutputFormat::Csv => emit::mc_csv(&report),
    };
    write_output(&text, &a.out)?;
    Ok(ExitCode::SUCCESS)
}
