mod config;
mod output;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use soboq_core::bellman::sample_occupancy;
use soboq_core::data::{read_jsonl, write_jsonl, Dataset, DatasetMeta};
use soboq_core::diagnostics::{self, medians_by_value, pd_diagnostic, run_sweep, PdReport, SweepRow};
use soboq_core::env::builtin_env_with;
use soboq_core::experiment::{self, ExperimentConfig, Summary};
use soboq_core::funcspace::{FeatureSpec, ValueClass};
use soboq_core::solver::Mode;
use soboq_core::{Error, Parallelism};

use crate::config::{apply_seed_override, parse_config, parse_plan, seed_override, to_toml};
use crate::output::{read_coeffs, read_json, read_sweep, write_atomic, write_coeffs, write_iterates, write_json, write_sweep};

const CONFIG_FILE: &str = "config.toml";
const ITERATES_FILE: &str = "iterates.csv";
const COEFFS_FILE: &str = "coeffs.jsonl";
const SUMMARY_FILE: &str = "summary.json";
const DATA_FILE: &str = "data.jsonl";

/// Sobolev-prox fitted q-learning experiments.
#[derive(Parser, Debug)]
#[command(name = "soboq", version)]
struct Cli {
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an offline dataset under the behavior policy.
    Generate(GenerateArgs),
    /// Fit on an existing dataset.
    Fit(FitArgs),
    /// Generate a dataset and fit in one go.
    Run(RunArgs),
    /// Fill the oracle error columns of a finished run.
    Evaluate(EvaluateArgs),
    /// Structural diagnostics.
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Run a parameter sweep.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override `[solver].mode`.
    #[arg(long)]
    mode: Option<Mode>,
    /// Reuse the whole dataset at every iteration (experimental).
    #[arg(long)]
    no_split: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use this dataset instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    no_split: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    /// Benchmark whose oracle is used; must match the run.
    #[arg(long)]
    oracle: String,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Diagnose {
    /// Positive-definiteness of the Bellman form on random value functions.
    Pd(PdArgs),
}

#[derive(Args, Debug)]
struct PdArgs {
    #[arg(long, default_value = "ou1d")]
    env: String,
    /// Optional experiment file supplying `[env]` parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "poly:3")]
    features: FeatureSpec,
    /// Occupancy draws.
    #[arg(long, default_value_t = 100_000)]
    n_mc: usize,
    #[arg(long, default_value_t = 20)]
    n_funcs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep the completed values of an existing table and run the rest.
    #[arg(long)]
    resume: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let par = if cli.sequential { Parallelism::Sequential } else { Parallelism::default() };
    match &cli.command {
        Command::Generate(a) => generate(a, par),
        Command::Fit(a) => fit(a, par),
        Command::Run(a) => run(a, par),
        Command::Evaluate(a) => evaluate(a, par),
        Command::Diagnose(Diagnose::Pd(a)) => diagnose_pd(a, par),
        Command::Sweep(a) => sweep(a, par),
    }
}

fn meta_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_dataset(path: &Path, data: &Dataset) -> Result<(), Error> {
    write_atomic(path, |w| write_jsonl(w, &data.trajectories))?;
    write_json(&meta_path(path), &data.meta)
}

fn read_dataset(path: &Path, config: &ExperimentConfig) -> Result<Dataset, Error> {
    let trajectories = read_jsonl(BufReader::new(File::open(path)?))?;
    let mp = meta_path(path);
    let meta: DatasetMeta = if mp.exists() {
        read_json(&mp)?
    } else {
        log::warn!("{} not found; assuming the dataset matches the configuration", mp.display());
        DatasetMeta {
            seed: config.data.seed,
            env: config.env.name.clone(),
            n: trajectories.len(),
            h: config.env.h,
            beta: config.env.beta,
            truncations: 0,
        }
    };
    let mismatch = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
    if meta.env != config.env.name {
        return mismatch("[env].name", format!("dataset was generated on `{}`", meta.env));
    }
    if meta.h != config.env.h {
        return mismatch("[env].h", format!("dataset was generated with h = {}", meta.h));
    }
    if meta.beta != config.env.beta {
        return mismatch("[env].beta", format!("dataset was generated with beta = {}", meta.beta));
    }
    if meta.n != trajectories.len() {
        return Err(Error::Parse {
            line: 0,
            message: format!("metadata lists {} trajectories, file has {}", meta.n, trajectories.len()),
        });
    }
    let mut data = Dataset::new(trajectories, meta);
    if !config.solver.no_split {
        data = data.split_folds(2 * config.solver.iterations)?;
    }
    Ok(data)
}

fn generate(a: &GenerateArgs, par: Parallelism) -> Result<(), Error> {
    let mut config = match &a.config {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    apply_seed_override(&mut config)?;
    if let Some(env) = &a.env {
        config.env.name = env.clone();
    }
    if let Some(n) = a.n {
        config.data.n = n;
    }
    if let Some(seed) = a.seed {
        config.data.seed = seed;
    }
    // fold count is irrelevant here
    config.solver.no_split = true;
    config.validate()?;
    let bench = builtin_env_with(&config.env.name, config.env.params())?;
    let data = soboq_core::data::generate_dataset(&bench.env, &bench.policy, &bench.initial, config.data.n, config.data.seed, par)?;
    write_dataset(&a.out, &data)?;
    println!(
        "wrote {} trajectories ({} transitions) to {}",
        data.n(),
        data.total_transitions(),
        a.out.display()
    );
    Ok(())
}

fn load_run_config(path: &Path, mode: Option<Mode>, no_split: bool) -> Result<ExperimentConfig, Error> {
    let mut config = parse_config(path)?;
    apply_seed_override(&mut config)?;
    if let Some(m) = mode {
        config.solver.mode = m;
    }
    if no_split {
        log::warn!("--no-split reuses the whole dataset at every iteration");
        config.solver.no_split = true;
    }
    config.validate()?;
    Ok(config)
}

fn fit(a: &FitArgs, par: Parallelism) -> Result<(), Error> {
    let config = load_run_config(&a.config, a.mode, a.no_split)?;
    let data = read_dataset(&a.data, &config)?;
    let prepared = experiment::prepare(&config, par)?;
    finish_run(&config, &prepared, &data, &a.out, par)
}

fn run(a: &RunArgs, par: Parallelism) -> Result<(), Error> {
    let config = load_run_config(&a.config, a.mode, a.no_split)?;
    let prepared = experiment::prepare(&config, par)?;
    let data = match &a.data {
        Some(p) => read_dataset(p, &config)?,
        None => {
            let data = experiment::generate(&config, &prepared, par)?;
            if config.output.write_data {
                write_dataset(&a.out.join(DATA_FILE), &data)?;
            }
            data
        }
    };
    finish_run(&config, &prepared, &data, &a.out, par)
}

fn finish_run(
    config: &ExperimentConfig,
    prepared: &experiment::Prepared,
    data: &Dataset,
    out: &Path,
    par: Parallelism,
) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    write_atomic(&out.join(CONFIG_FILE), |w| Ok(w.write_all(to_toml(config).as_bytes())?))?;
    let outcome = experiment::run(config, prepared, data, par)?;
    write_iterates(&out.join(ITERATES_FILE), &outcome.fit.log)?;
    write_coeffs(&out.join(COEFFS_FILE), &outcome.fit.history)?;
    write_json(&out.join(SUMMARY_FILE), &outcome.summary)?;
    print_summary(&outcome.summary);
    Ok(())
}

fn print_summary(s: &Summary) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{} {} n={} N={}: final err_v_h1 {} err_q_l2 {}, plateau {}, value projections {}",
        s.env,
        s.mode,
        s.n,
        s.iterations,
        fmt(s.final_err_v_h1),
        fmt(s.final_err_q_l2),
        fmt(s.plateau_err_v_h1),
        s.value_projections
    );
    if let Some(c) = &s.convergence {
        println!("convergence: {}", serde_json::to_string(c).unwrap_or_default());
    }
}

fn evaluate(a: &EvaluateArgs, par: Parallelism) -> Result<(), Error> {
    let mut config = parse_config(&a.run.join(CONFIG_FILE))?;
    if config.env.name != a.oracle {
        return Err(Error::Config {
            field: "--oracle".into(),
            message: format!("run was fitted on `{}`", config.env.name),
        });
    }
    config.oracle.enabled = true;
    if a.cache_dir.is_some() {
        config.oracle.cache_dir = a.cache_dir.clone();
    }
    if !config.oracle_supported() {
        return Err(Error::UnsupportedOracle(format!("no oracle for `{}`", config.env.name)));
    }
    let prepared = experiment::prepare(&config, par)?;
    let history = read_coeffs(&a.run.join(COEFFS_FILE))?;
    let summary_path = a.run.join(SUMMARY_FILE);
    let mut summary: Summary = read_json(&summary_path)?;
    let iterates_path = a.run.join(ITERATES_FILE);
    let mut rdr = csv::Reader::from_path(&iterates_path).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rows: Vec<csv::StringRecord> = rdr
        .records()
        .collect::<Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if rows.len() != history.len() {
        return Err(Error::Parse {
            line: 0,
            message: format!("{} iterate rows but {} coefficient records", rows.len(), history.len()),
        });
    }
    let mut errors = Vec::with_capacity(history.len());
    for (row, (theta, eta)) in rows.iter_mut().zip(&history) {
        let (ev, eq) = experiment::oracle_errors(&prepared, theta, eta).expect("oracle was solved")?;
        let mut fields: Vec<String> = row.iter().map(str::to_string).collect();
        fields[4] = output::float(ev);
        fields[5] = output::float(eq);
        *row = csv::StringRecord::from(fields);
        errors.push((ev, eq));
    }
    write_atomic(&iterates_path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidArgument(e.to_string());
        csv.write_record(output::ITERATES_HEADER).map_err(io)?;
        for r in &rows {
            csv.write_record(r).map_err(io)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let ev: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let frac = config.output.plateau_fraction;
    summary.final_err_v_h1 = ev.last().copied();
    summary.final_err_q_l2 = errors.last().map(|e| e.1);
    summary.plateau_err_v_h1 = Some(diagnostics::plateau(&ev, frac));
    summary.convergence = Some(diagnostics::convergence_fit(&ev, frac));
    write_json(&summary_path, &summary)?;
    print_summary(&summary);
    Ok(())
}

fn diagnose_pd(a: &PdArgs, par: Parallelism) -> Result<(), Error> {
    let mut config = match &a.config {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    config.env.name = a.env.clone();
    let bench = builtin_env_with(&config.env.name, config.env.params())?;
    let seed = seed_override()?.unwrap_or(a.seed);
    let states = sample_occupancy(&bench.env, &bench.policy, &bench.initial, a.n_mc, seed, par)?;
    let class = ValueClass::new(a.features.build(bench.env.dim())?, 1.0)?;
    let report = pd_diagnostic(&bench.env, &bench.policy, &class, &states, a.n_funcs, seed.wrapping_add(1), par)?;
    print_pd(&report);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn print_pd(r: &PdReport) {
    println!("{:>4} {:>14} {:>14} {:>14} {:>12}  result", "f", "lhs", "rhs", "margin", "se");
    for (i, row) in r.rows.iter().enumerate() {
        println!(
            "{i:>4} {:>14.6e} {:>14.6e} {:>14.6e} {:>12.4e}  {}",
            row.lhs,
            row.rhs,
            row.margin,
            row.se,
            if row.pass { "ok" } else { "violated" }
        );
    }
    println!("{} on {} with {} occupancy draws", if r.pass { "PASS" } else { "FAIL" }, r.env, r.n_states);
}

#[derive(Serialize)]
struct MedianRow {
    axis: String,
    value: f64,
    ok_runs: usize,
    median_err_v_h1: Option<f64>,
    median_err_q_l2: Option<f64>,
    median_plateau_v_h1: Option<f64>,
}

fn sweep(a: &SweepArgs, par: Parallelism) -> Result<(), Error> {
    let plan = parse_plan(&a.plan)?;
    let previous = if a.resume && a.out.exists() { read_sweep(&a.out)? } else { Vec::new() };
    // keep the longest prefix of values whose replicates all completed
    let mut done: HashMap<String, usize> = HashMap::new();
    for rec in &previous {
        *done.entry(rec[1].to_string()).or_default() += 1;
    }
    let from = plan
        .values
        .iter()
        .take_while(|v| done.get(&output::float(**v)).copied().unwrap_or(0) >= plan.replicates)
        .count();
    let keep: Vec<csv::StringRecord> = previous
        .into_iter()
        .filter(|rec| plan.values[..from].iter().any(|v| output::float(*v) == rec[1]))
        .collect();
    if from > 0 {
        println!("resuming after {from} completed values");
    }
    let rows = run_sweep(&plan, from, par)?;
    write_sweep(&a.out, &keep, &rows)?;

    let mut all: Vec<SweepRow> = keep.iter().filter_map(|rec| parse_row(rec, &plan.values)).collect();
    all.extend(rows.iter().cloned());
    let ev = medians_by_value(&all, |r| r.err_v_h1);
    let eq = medians_by_value(&all, |r| r.err_q_l2);
    let pv = medians_by_value(&all, |r| r.plateau_v);
    let medians: Vec<MedianRow> = ev
        .iter()
        .zip(&eq)
        .zip(&pv)
        .map(|((v, q), p)| MedianRow {
            axis: plan.axis.to_string(),
            value: v.0,
            ok_runs: all.iter().filter(|r| r.value == v.0 && r.status == "ok").count(),
            median_err_v_h1: v.1,
            median_err_q_l2: q.1,
            median_plateau_v_h1: p.1,
        })
        .collect();
    let mut mpath = a.out.clone().into_os_string();
    mpath.push(".medians.json");
    write_json(Path::new(&mpath), &medians)?;
    for m in &medians {
        println!(
            "{}={}: ok {}/{} median err_v_h1 {:?} plateau {:?}",
            m.axis, m.value, m.ok_runs, plan.replicates, m.median_err_v_h1, m.median_plateau_v_h1
        );
    }
    let failed = all.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        println!("{failed} runs failed; see the status column");
    }
    Ok(())
}

/// Recovers the medians-relevant fields of a kept row. The table has no
/// plateau column, so resumed rows contribute only final errors.
fn parse_row(rec: &csv::StringRecord, values: &[f64]) -> Option<SweepRow> {
    let value: f64 = rec[1].parse().ok()?;
    let opt = |s: &str| if s.is_empty() { None } else { s.parse().ok() };
    Some(SweepRow {
        axis: rec[0].parse::<String>().ok().and_then(|a| serde_json::from_value(serde_json::Value::String(a)).ok())?,
        value,
        value_index: values.iter().position(|v| *v == value)?,
        replicate: rec[2].parse().ok()?,
        seed: rec[3].parse().ok()?,
        err_v_h1: opt(&rec[4]),
        err_q_l2: opt(&rec[5]),
        plateau_v: None,
        status: rec[6].to_string(),
        runtime_s: rec[7].parse().ok()?,
    })
}
