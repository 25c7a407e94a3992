use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lmmgof::cusum::write_labeled_traces;
use lmmgof::{
    fit_lmm, load_dataset, run_gof_multi, run_study, workflow_hint, ClusteredDataset, ColumnSubset, Error, FitOptions,
    FittedLmm, GofOptions, GofResult, Method, ModelConfig, NullScheme, ProcessSpec, ResidualFlavor, SchemeKind,
    SimulationScenario, Variant, WeightLaw,
};
use log::warn;
use serde_json::{json, Value};

/// Smallest ensemble accepted, and the size below which p-values are coarse.
const MIN_M: usize = 19;
const WARN_M: usize = 99;

#[derive(Parser)]
#[command(
    name = "lmmgof",
    version,
    about = "Cusum goodness-of-fit tests for linear mixed-effects models"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write a JSON summary.
    Fit(FitArgs),
    /// Fit the model and test its functional form.
    Gof(GofArgs),
    /// Run a Monte-Carlo size/power study from a scenario file.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV, one row per observation.
    #[arg(long)]
    data: PathBuf,
    /// JSON model description (cluster, outcome, fixed, random, intercept flags).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "REML")]
    method: Method,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory; the summary goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GofArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Null scheme; repeat to run several on the same fit.
    #[arg(long, default_value = "refit-flip")]
    scheme: Vec<SchemeKind>,
    /// Weight law (defaults to the scheme's own).
    #[arg(long)]
    law: Option<WeightLaw>,
    /// Number of null replicates.
    #[arg(long = "M", default_value_t = 500)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `O`, `F` or `Fsub:<col>,<col>` (names or 0-based indices); repeatable.
    #[arg(long, default_values_t = vec!["O".to_string(), "F".to_string()])]
    process: Vec<String>,
    #[arg(long, default_value = "block")]
    variant: Variant,
    #[arg(long, default_value = "individual")]
    residuals: ResidualFlavor,
    /// Significance level used by the workflow hint.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Output directory for the JSON result and the trace CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "M")]
    m: Option<usize>,
    /// Number of replications.
    #[arg(long = "R")]
    r: Option<usize>,
    /// Output directory for the table and run metadata; the table goes to
    /// stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Gof(a) => cmd_gof(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad input, 3 for estimation failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_input_error() => 2,
        Some(_) => 3,
        None => 2,
    }
}

fn load(args: &DataArgs) -> anyhow::Result<ClusteredDataset> {
    let config = ModelConfig::from_json_file(&args.model)?;
    Ok(load_dataset(&args.data, &config)?)
}

fn fit_summary(ds: &ClusteredDataset, fit: &FittedLmm) -> Value {
    let rows = |m: &lmmgof::nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
    };
    json!({
        "method": fit.method,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "boundary": fit.boundary,
        "loglik": fit.loglik,
        "n_clusters": ds.n_clusters(),
        "n_obs": ds.n_obs(),
        "fixed_effects": ds.fixed_names().iter().zip(fit.beta.iter())
            .map(|(n, b)| json!({"name": n, "estimate": b})).collect::<Vec<_>>(),
        "random_effects": ds.random_names(),
        "d": rows(&fit.vc.d),
        "sigma2": fit.vc.sigma2,
        "blups": ds.clusters().iter().zip(&fit.blups)
            .map(|(c, b)| json!({"cluster": c.label, "values": b.as_slice()})).collect::<Vec<_>>(),
    })
}

fn write_json(out: Option<&Path>, file: &str, value: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join(file), text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn fit_model(ds: &ClusteredDataset, method: Method) -> anyhow::Result<FittedLmm> {
    let fit = fit_lmm(ds, method, &FitOptions::default())?;
    if !fit.converged {
        return Err(Error::NoConvergence {
            iterations: fit.iterations,
        }
        .into());
    }
    if fit.boundary {
        warn!("variance components at the boundary of the parameter space");
    }
    Ok(fit)
}

fn cmd_fit(args: &FitArgs) -> anyhow::Result<()> {
    let ds = load(&args.data)?;
    let fit = fit_model(&ds, args.data.method)?;
    write_json(args.out.as_deref(), "fit.json", &fit_summary(&ds, &fit))
}

fn parse_process(text: &str, ds: &ClusteredDataset) -> anyhow::Result<(ProcessSpec, String)> {
    match text {
        "O" => return Ok((ProcessSpec::O, "O".into())),
        "F" => return Ok((ProcessSpec::F, "F".into())),
        _ => {}
    }
    let Some(cols) = text.strip_prefix("Fsub:") else {
        return Err(Error::InvalidInput(format!("unknown process `{text}` (expected O, F or Fsub:<cols>)")).into());
    };
    let parts: Vec<&str> = cols.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let subset = match parts.iter().map(|p| p.parse::<usize>()).collect::<Result<Vec<_>, _>>() {
        Ok(idx) => ColumnSubset::new(idx, ds.p())?,
        Err(_) => ColumnSubset::from_names(&parts, ds)?,
    };
    let names: Vec<&str> = subset.indices().iter().map(|&i| ds.fixed_names()[i].as_str()).collect();
    let label = format!("F-subset:{}", names.join("+"));
    Ok((ProcessSpec::FSubset(subset), label))
}

fn result_json(r: &GofResult, label: &str) -> Value {
    json!({
        "process": label,
        "kind": r.observed.kind,
        "scheme": r.scheme.kind,
        "law": r.scheme.law,
        "ks": r.observed_stats.ks,
        "cvm": r.observed_stats.cvm,
        "p_ks": r.p_ks,
        "p_cvm": r.p_cvm,
        "effective_m": r.effective_m(),
        "failed_replicates": r.failed_replicates,
    })
}

fn cmd_gof(args: &GofArgs) -> anyhow::Result<()> {
    if args.m < MIN_M {
        return Err(Error::InvalidInput(format!("M = {} is below the minimum of {MIN_M}", args.m)).into());
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must lie in (0, 1)".into()).into());
    }
    let mut warnings = Vec::new();
    if args.m < WARN_M {
        let msg = format!("M = {} gives p-values no finer than 1/{}", args.m, args.m + 1);
        warn!("{msg}");
        warnings.push(msg);
    }
    let ds = load(&args.data)?;
    let mut specs = Vec::new();
    let mut labels = Vec::new();
    for p in &args.process {
        let (spec, label) = parse_process(p, &ds)?;
        specs.push(spec);
        labels.push(label);
    }
    let fit = fit_model(&ds, args.data.method)?;
    let opts = GofOptions {
        variant: args.variant,
        flavor: args.residuals,
        keep_processes: args.out.is_some(),
        ..Default::default()
    };

    let mut results = Vec::new();
    let mut hints = serde_json::Map::new();
    for &kind in &args.scheme {
        let mut scheme = NullScheme::new(kind, args.m, args.seed);
        if let Some(law) = args.law {
            scheme = scheme.with_law(law);
        }
        let res = run_gof_multi(&ds, &fit, &specs, &scheme, &opts)?;
        let failed = res[0].failed_replicates.len();
        if failed > 0 {
            let msg = format!("{kind}: {failed} null replicate(s) failed to refit and were excluded");
            warn!("{msg}");
            warnings.push(msg);
        }
        hints.insert(kind.to_string(), Value::String(workflow_hint(&res, args.alpha)));
        if let Some(dir) = &args.out {
            let trace_labels: Vec<String> = res
                .iter()
                .zip(&labels)
                .map(|(r, l)| match r.spec {
                    ProcessSpec::O => r.observed.kind.to_string(),
                    _ => l.clone(),
                })
                .collect();
            write_scheme_traces(dir, kind, &res, &trace_labels)?;
        }
        results.extend(res.iter().zip(&labels).map(|(r, l)| result_json(r, l)));
    }
    let doc = json!({
        "data": args.data.data,
        "m": args.m,
        "seed": args.seed,
        "variant": args.variant,
        "residuals": args.residuals,
        "alpha": args.alpha,
        "fit": fit_summary(&ds, &fit),
        "results": results,
        "hints": hints,
        "warnings": warnings,
    });
    write_json(args.out.as_deref(), "gof.json", &doc)
}

fn write_scheme_traces(dir: &Path, kind: SchemeKind, res: &[GofResult], labels: &[String]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for (r, label) in res.iter().zip(labels) {
        rows.push((label.as_str(), 0, &r.observed));
        for (id, p) in r.replicate_ids.iter().zip(&r.null_processes) {
            rows.push((label.as_str(), *id, p));
        }
    }
    let file = fs::File::create(dir.join(format!("traces_{kind}.csv")))?;
    write_labeled_traces(std::io::BufWriter::new(file), &rows)?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut sc: SimulationScenario = serde_json::from_str(&text).map_err(Error::from)?;
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    if let Some(m) = args.m {
        sc.m = m;
    }
    if let Some(r) = args.r {
        sc.replications = r;
    }
    sc.validate()?;
    if sc.m < WARN_M {
        warn!("M = {} gives p-values no finer than 1/{}", sc.m, sc.m + 1);
    }
    let start = Instant::now();
    let outcome = run_study(&sc)?;
    let elapsed = start.elapsed().as_secs_f64();
    if !outcome.failed_replications.is_empty() {
        warn!("{} replication(s) excluded", outcome.failed_replications.len());
    }

    let mut table = Vec::new();
    outcome.table.write_csv(&mut table)?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("table.csv"), &table)?;
            let meta = json!({
                "scenario": sc,
                "seed": sc.seed,
                "replications": sc.replications,
                "m": sc.m,
                "threads": rayon::current_num_threads(),
                "elapsed_seconds": elapsed,
                "failed_replications": outcome.failed_replications,
                "excluded_null_replicates": outcome.excluded_null_replicates,
            });
            fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        }
        None => std::io::stdout().write_all(&table)?,
    }
    if outcome.table.rows.is_empty() {
        bail!("no rows produced");
    }
    Ok(())
}
