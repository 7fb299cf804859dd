//! The `gpalm` command line: `fit` for one dataset, `simulate` for Monte
//! Carlo studies. Every run writes its artifacts into one output directory
//! together with a manifest that pins the resolved configuration, seeds and
//! input checksums.
//!
//! Exit codes: 0 success, 1 usage or i/o error, 2 numerical non-convergence
//! (or a simulation exceeding the failure budget).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{AdditiveSplineBasis, KnotRule};
use crate::covariance::{CorrelationStructure, WorkingCovariance};
use crate::cv::{cross_validate, CvOutcome, CvPlan, KnotGrid};
use crate::data::{CsvSchema, Dataset, Severity};
use crate::error::Error;
use crate::estimator::{fit_gee, FitConfig, FitResult, Link};
use crate::inference::wald_report;
use crate::sim::{KnotSelection, Setup, SimulationConfig};

#[derive(Parser)]
#[command(name = "gpalm", version, about = "Partially linear additive models for clustered data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a long-format CSV dataset
    Fit(Box<FitArgs>),
    /// Run a Monte Carlo study on one of the built-in setups
    Simulate(Box<SimArgs>),
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV, one row per observation
    #[arg(long)]
    input: PathBuf,
    /// Cluster id column
    #[arg(long, default_value = "cluster")]
    cluster_col: String,
    /// Response column
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Parametric covariate columns, comma separated (intercept is injected)
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    x_cols: Vec<String>,
    /// Nonparametric covariate columns, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    t_cols: Vec<String>,
    /// Integer observation-order column (file order if absent)
    #[arg(long)]
    order_col: Option<String>,
    /// The first --x-cols entry is already an all-ones intercept
    #[arg(long)]
    has_intercept: bool,
    /// Mean link: identity or log
    #[arg(long, default_value = "identity")]
    link: String,
    /// Working correlation: wi, ex, or ar1
    #[arg(long, default_value = "wi")]
    corr: String,
    /// Fix the working correlation parameter instead of estimating it
    #[arg(long)]
    rho: Option<f64>,
    /// Spline degree
    #[arg(long, default_value_t = 3)]
    degree: usize,
    /// Fixed interior-knot counts per dimension, comma separated
    #[arg(long, value_delimiter = ',')]
    knots: Option<Vec<usize>>,
    /// Select interior knots by delete-cluster-out cross-validation
    #[arg(long)]
    cv: bool,
    /// Knot grid for --cv: "lo:hi" or a comma list, shared across dimensions
    #[arg(long, default_value = "0:10")]
    knot_grid: String,
    /// Cross-validation folds
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Seed for the fold assignment
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative parameter-change tolerance
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Scoring rounds between working-correlation updates
    #[arg(long, default_value_t = 2)]
    corr_rounds: usize,
    /// Also write the inverse information matrix
    #[arg(long)]
    info_matrix: bool,
    /// Output directory (default: $GPALM_OUT_DIR or ./gpalm-out)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for cross-validation (0 = rayon default)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct SimArgs {
    /// Setup: s1..s5
    #[arg(long)]
    setup: Option<String>,
    /// Number of clusters
    #[arg(long)]
    n: Option<usize>,
    /// True correlation parameter
    #[arg(long)]
    rho: Option<f64>,
    /// Replication count
    #[arg(long)]
    reps: Option<usize>,
    /// Master seed; replication seeds are derived as ChaCha8 streams
    #[arg(long)]
    seed: Option<u64>,
    /// Working structures to compare, comma separated (wi, ex, ar1)
    #[arg(long, value_delimiter = ',')]
    structures: Option<Vec<String>>,
    /// Residual standard deviation of the Gaussian setups
    #[arg(long)]
    error_sd: Option<f64>,
    /// Fixed interior-knot count (disables per-replication cross-validation)
    #[arg(long)]
    fixed_knots: Option<usize>,
    /// Knot grid for per-replication cross-validation: "lo:hi" or comma list
    #[arg(long)]
    knot_grid: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    /// JSON config file; flags override it, it overrides defaults. A
    /// manifest from a previous run is accepted and replays it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for replications (0 = rayon default); the outputs are
    /// identical for any value
    #[arg(long)]
    jobs: Option<usize>,
}

/// File/manifest schema for `simulate`: every field optional, flags win.
#[derive(Debug, Default, Serialize, Deserialize)]
struct SimFileConfig {
    setup: Option<String>,
    n: Option<usize>,
    rho: Option<f64>,
    reps: Option<usize>,
    seed: Option<u64>,
    structures: Option<Vec<String>>,
    error_sd: Option<f64>,
    fixed_knots: Option<usize>,
    knot_grid: Option<String>,
    folds: Option<usize>,
    degree: Option<usize>,
    jobs: Option<usize>,
}

#[derive(Serialize)]
struct InputChecksum {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    version: String,
    seed_rule: String,
    config: serde_json::Value,
    inputs: Vec<InputChecksum>,
    outputs: Vec<String>,
    failures: usize,
    timing_ms: u128,
}

pub fn run() -> i32 {
    run_from(std::env::args().collect())
}

pub fn run_from(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with status 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Fit(args) => cmd_fit(&argv, &args),
        Command::Simulate(args) => cmd_simulate(&argv, &args),
    }
}

fn out_dir_or_default(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("GPALM_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("gpalm-out"))
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_artifact(dir: &Path, name: &str, contents: &str, outputs: &mut Vec<String>) -> std::io::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    println!("wrote {}", path.display());
    outputs.push(name.to_string());
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<usize>, Error> {
    let spec = spec.trim();
    if let Some((lo, hi)) = spec.split_once(':') {
        let lo: usize = lo
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("bad knot grid `{spec}`")))?;
        let hi: usize = hi
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("bad knot grid `{spec}`")))?;
        if hi < lo {
            return Err(Error::Parameter(format!("bad knot grid `{spec}`")));
        }
        Ok((lo..=hi).collect())
    } else {
        spec.split(',')
            .map(|tok| {
                tok.trim()
                    .parse()
                    .map_err(|_| Error::Parameter(format!("bad knot grid `{spec}`")))
            })
            .collect()
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn cmd_fit(argv: &[String], args: &FitArgs) -> i32 {
    let started = Instant::now();
    match cmd_fit_inner(argv, args, started) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonConvergence(_) => 2,
                _ => 1,
            }
        }
    }
}

fn cmd_fit_inner(argv: &[String], args: &FitArgs, started: Instant) -> Result<i32, Error> {
    let link = Link::parse(&args.link)?;
    let mut structure = CorrelationStructure::parse(&args.corr)?;
    let schema = CsvSchema {
        cluster: args.cluster_col.clone(),
        y: args.y_col.clone(),
        x: args.x_cols.clone(),
        t: args.t_cols.clone(),
        order: args.order_col.clone(),
        has_intercept: args.has_intercept,
    };
    let dataset = Dataset::read_csv_path(&args.input, &schema)?;

    let findings = dataset.validate();
    let mut fatal = false;
    for f in &findings {
        match f.severity {
            Severity::Error => {
                eprintln!("error: {}", f.message);
                fatal = true;
            }
            Severity::Warning => eprintln!("warning: {}", f.message),
        }
    }
    if fatal {
        return Ok(1);
    }

    let fit_config = FitConfig {
        max_iter: args.max_iter,
        tol: args.tol,
        corr_update_rounds: args.corr_rounds,
        fix_rho: args.rho.is_some(),
        ..FitConfig::default()
    };

    // no within-cluster pairs: a correlated working structure cannot be
    // estimated, fall back to independence up front
    if structure != CorrelationStructure::Independence
        && dataset.max_cluster_size() < 2
        && args.rho.is_none()
    {
        eprintln!(
            "warning: no cluster has two or more observations; falling back to the \
             independence structure"
        );
        structure = CorrelationStructure::Independence;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;

    let mut cv_outcome: Option<CvOutcome> = None;
    let knot_counts: Vec<usize> = if args.cv {
        let plan = CvPlan {
            folds: args.folds,
            grid: KnotGrid::Shared(parse_grid(&args.knot_grid)?),
            seed: args.seed,
        };
        let outcome = pool.install(|| {
            cross_validate(
                &dataset,
                link,
                structure,
                args.rho,
                &plan,
                args.degree,
                KnotRule::Quantile,
                &fit_config,
            )
        })?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        let chosen = outcome.chosen.clone();
        cv_outcome = Some(outcome);
        chosen
    } else {
        match &args.knots {
            Some(k) if k.len() == 1 => vec![k[0]; dataset.d()],
            Some(k) => k.clone(),
            None => vec![3; dataset.d()],
        }
    };
    if knot_counts.len() != dataset.d() {
        return Err(Error::Parameter(format!(
            "{} knot counts for {} nonparametric dimensions",
            knot_counts.len(),
            dataset.d()
        )));
    }

    let basis = AdditiveSplineBasis::from_pooled(
        &dataset.pooled_t(),
        args.degree,
        &knot_counts,
        KnotRule::Quantile,
    )?;
    let spec = WorkingCovariance::new(structure, args.rho.unwrap_or(0.0), 1.0);

    let out_dir = out_dir_or_default(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut outputs = Vec::new();

    let fit_attempt = fit_gee(&dataset, &basis, link, &spec, &fit_config);
    let fit = match fit_attempt {
        Ok(fit) => fit,
        Err(Error::CannotEstimateCorrelation(msg)) => {
            eprintln!("warning: {msg}; refitting with the independence structure");
            let spec = WorkingCovariance::independence();
            fit_gee(&dataset, &basis, link, &spec, &fit_config)?
        }
        Err(Error::NonConvergence(partial)) => {
            let mut diag = String::from("key,value\n");
            diag.push_str(&format!("converged,false\niterations,{}\n", partial.iterations));
            diag.push_str(&format!("ee_norm,{}\nobjective,{}\n", partial.ee_norm, partial.objective));
            let mut coef = String::from("name,estimate,se,z\n");
            for (i, name) in dataset.x_names.iter().enumerate() {
                let est = partial.beta.get(i).copied().unwrap_or(f64::NAN);
                coef.push_str(&format!("{name},{},,\n", fmt_f64(est)));
            }
            write_artifact(&out_dir, "coefficients.csv", &coef, &mut outputs)?;
            write_artifact(&out_dir, "diagnostics.csv", &diag, &mut outputs)?;
            write_manifest(argv, args_config_json(args), &args.input, &out_dir, outputs, 0, started)?;
            eprintln!("error: fit did not converge after {} iterations", partial.iterations);
            return Ok(2);
        }
        Err(other) => return Err(other),
    };

    write_fit_artifacts(argv, args, &dataset, &basis, &fit, cv_outcome.as_ref(), &out_dir, started)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn write_fit_artifacts(
    argv: &[String],
    args: &FitArgs,
    dataset: &Dataset,
    basis: &AdditiveSplineBasis,
    fit: &FitResult,
    cv_outcome: Option<&CvOutcome>,
    out_dir: &Path,
    started: Instant,
) -> Result<(), Error> {
    let mut outputs = Vec::new();

    let rows = wald_report(&dataset.x_names, &fit.beta, &fit.robust_cov);
    let mut coef = String::from("name,estimate,se,z\n");
    for r in &rows {
        coef.push_str(&format!(
            "{},{},{},{}\n",
            r.name,
            fmt_f64(r.estimate),
            fmt_f64(r.se),
            fmt_f64(r.z)
        ));
    }
    write_artifact(out_dir, "coefficients.csv", &coef, &mut outputs)?;

    let mut curves = String::from("dimension,name,t,estimate\n");
    for d in 0..dataset.d() {
        let (a, b) = basis.bases()[d].boundary();
        let grid: Vec<f64> = (0..100).map(|i| a + (b - a) * i as f64 / 99.0).collect();
        let vals = basis.eval_component(&fit.gamma, d, &grid)?;
        for (t, v) in grid.iter().zip(vals) {
            curves.push_str(&format!("{},{},{},{}\n", d, dataset.t_names[d], t, v));
        }
    }
    write_artifact(out_dir, "curves.csv", &curves, &mut outputs)?;

    let mut diag = String::from("key,value\n");
    diag.push_str(&format!("link,{}\n", args.link));
    diag.push_str(&format!("structure,{}\n", fit.spec.structure.name()));
    diag.push_str(&format!("rho_hat,{}\n", fit.spec.rho));
    diag.push_str(&format!("sigma2_hat,{}\n", fit.spec.sigma2));
    diag.push_str(&format!("converged,{}\n", fit.converged));
    diag.push_str(&format!("iterations,{}\n", fit.iterations));
    diag.push_str(&format!("objective,{}\n", fit.objective));
    diag.push_str(&format!("ee_norm,{}\n", fit.diagnostics.ee_norm));
    diag.push_str(&format!("ridge_used,{}\n", fit.diagnostics.ridge_used));
    diag.push_str(&format!("eta_clamped,{}\n", fit.diagnostics.eta_clamped));
    diag.push_str(&format!("n_clusters,{}\n", dataset.n_clusters()));
    diag.push_str(&format!("n_obs,{}\n", dataset.n_obs()));
    write_artifact(out_dir, "diagnostics.csv", &diag, &mut outputs)?;

    if let Some(outcome) = cv_outcome {
        let mut cv = String::from("knots,score,valid\n");
        for row in &outcome.table {
            let knots = row
                .knots
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(";");
            match row.score {
                Some(s) => cv.push_str(&format!("{knots},{s},true\n")),
                None => cv.push_str(&format!("{knots},,false\n")),
            }
        }
        cv.push_str(&format!(
            "chosen,{},\n",
            outcome
                .chosen
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(";")
        ));
        write_artifact(out_dir, "cv_scores.csv", &cv, &mut outputs)?;
    }

    if args.info_matrix {
        let k = fit.beta.len();
        let mut info = String::from("row,col,value\n");
        for i in 0..k {
            for j in 0..k {
                info.push_str(&format!("{i},{j},{}\n", fit.model_cov[(i, j)]));
            }
        }
        write_artifact(out_dir, "info_matrix.csv", &info, &mut outputs)?;
    }

    write_manifest(argv, args_config_json(args), &args.input, out_dir, outputs, 0, started)?;
    Ok(())
}

fn args_config_json(args: &FitArgs) -> serde_json::Value {
    serde_json::json!({
        "input": args.input.display().to_string(),
        "cluster_col": args.cluster_col,
        "y_col": args.y_col,
        "x_cols": args.x_cols,
        "t_cols": args.t_cols,
        "order_col": args.order_col,
        "has_intercept": args.has_intercept,
        "link": args.link,
        "corr": args.corr,
        "rho": args.rho,
        "degree": args.degree,
        "knots": args.knots,
        "cv": args.cv,
        "knot_grid": args.knot_grid,
        "folds": args.folds,
        "seed": args.seed,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "corr_rounds": args.corr_rounds,
    })
}

fn write_manifest(
    argv: &[String],
    config: serde_json::Value,
    input: &Path,
    out_dir: &Path,
    mut outputs: Vec<String>,
    failures: usize,
    started: Instant,
) -> Result<(), Error> {
    let mut inputs = Vec::new();
    if input.exists() {
        inputs.push(InputChecksum {
            path: input.display().to_string(),
            sha256: sha256_file(input)?,
        });
    }
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        command: argv.to_vec(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed_rule: "replication r uses ChaCha8 stream r+1 of the master seed".into(),
        config,
        inputs,
        outputs,
        failures,
        timing_ms: started.elapsed().as_millis(),
    };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_simulate(argv: &[String], args: &SimArgs) -> i32 {
    let started = Instant::now();
    match cmd_simulate_inner(argv, args, started) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonConvergence(_) | Error::Study(_) => 2,
                _ => 1,
            }
        }
    }
}

fn cmd_simulate_inner(argv: &[String], args: &SimArgs, started: Instant) -> Result<i32, Error> {
    // precedence: flags > config file > defaults
    let mut file_cfg = SimFileConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Parameter(format!("config file: {e}")))?;
        let cfg_value = value.get("config").cloned().unwrap_or(value);
        file_cfg = serde_json::from_value(cfg_value)
            .map_err(|e| Error::Parameter(format!("config file: {e}")))?;
    }

    let setup_name = args
        .setup
        .clone()
        .or(file_cfg.setup)
        .unwrap_or_else(|| "s1".into());
    let setup = Setup::parse(&setup_name)?;
    let structures_raw = args
        .structures
        .clone()
        .or(file_cfg.structures)
        .unwrap_or_else(|| vec!["wi".into(), "ex".into(), "ar1".into()]);
    let structures = structures_raw
        .iter()
        .map(|s| CorrelationStructure::parse(s))
        .collect::<Result<Vec<_>, _>>()?;
    let fixed_knots = args.fixed_knots.or(file_cfg.fixed_knots);
    let knot_grid_spec = args
        .knot_grid
        .clone()
        .or(file_cfg.knot_grid)
        .unwrap_or_else(|| "1:7".into());
    let folds = args.folds.or(file_cfg.folds).unwrap_or(5);
    let resolved = SimFileConfig {
        setup: Some(setup_name),
        n: Some(args.n.or(file_cfg.n).unwrap_or(100)),
        rho: Some(args.rho.or(file_cfg.rho).unwrap_or(0.5)),
        reps: Some(args.reps.or(file_cfg.reps).unwrap_or(400)),
        seed: Some(args.seed.or(file_cfg.seed).unwrap_or(0)),
        structures: Some(structures_raw),
        error_sd: Some(args.error_sd.or(file_cfg.error_sd).unwrap_or(1.0)),
        fixed_knots,
        knot_grid: Some(knot_grid_spec.clone()),
        folds: Some(folds),
        degree: Some(args.degree.or(file_cfg.degree).unwrap_or(3)),
        jobs: Some(args.jobs.or(file_cfg.jobs).unwrap_or(0)),
    };

    let knots = match fixed_knots {
        Some(k) => KnotSelection::Fixed(k),
        None => KnotSelection::Cv { grid: parse_grid(&knot_grid_spec)?, folds },
    };
    let config = SimulationConfig {
        setup,
        n: resolved.n.unwrap(),
        rho: resolved.rho.unwrap(),
        replications: resolved.reps.unwrap(),
        seed: resolved.seed.unwrap(),
        fit_structures: structures,
        error_sd: resolved.error_sd.unwrap(),
        knots,
        degree: resolved.degree.unwrap(),
    };
    config.validate()?;

    let jobs = resolved.jobs.unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let report = pool.install(|| crate::sim::run_study(&config))?;

    let out_dir = out_dir_or_default(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut outputs = Vec::new();
    write_artifact(&out_dir, "replications.csv", &report.replications_csv(), &mut outputs)?;
    write_artifact(&out_dir, "aggregate.csv", &report.aggregate_csv(), &mut outputs)?;
    write_artifact(&out_dir, "aggregate_x1e5.csv", &report.aggregate_csv_x1e5(), &mut outputs)?;
    if !report.failures.is_empty() {
        let mut failures_csv = String::from("rep,structure,message\n");
        for f in &report.failures {
            failures_csv.push_str(&format!(
                "{},{},\"{}\"\n",
                f.rep,
                f.structure,
                f.message.replace('"', "'")
            ));
        }
        write_artifact(&out_dir, "failures.csv", &failures_csv, &mut outputs)?;
    }

    let config_json = serde_json::to_value(&resolved).unwrap();
    let input = args.config.clone().unwrap_or_default();
    write_manifest(argv, config_json, &input, &out_dir, outputs, report.failures.len(), started)?;

    if let Err(e) = report.check() {
        eprintln!("error: {e}");
        return Ok(2);
    }
    Ok(0)
}
