use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, Vector3};
use serde::Serialize;

use nodf::dataset::{read_dataset, write_dataset, Dtype};
use nodf::downstream::{gfa, Streamline, TraceConfig};
use nodf::error::{NodfError, Result};
use nodf::estimator::{fit_pipeline, interval_from_moments, split_calibration, EstimatorConfig, PosteriorState};
use nodf::harness::{self, ExperimentConfig, PhantomConfig, PhantomKind, TraceKit, TractConfig};
use nodf::hyperopt::{self, TrialRecord};
use nodf::rng::derive_seed;
use nodf::shls;
use nodf::sphere::{fibonacci_sphere, parse_bvec, Direction, HarmonicBasis};

#[derive(Parser)]
#[command(name = "nodf", version, about = "Neural orientation distribution fields with closed-form posterior uncertainty")]
struct Cli {
    /// Master seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overridden by NODF_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a phantom dataset.
    Phantom(PhantomArgs),
    /// Train the field, calibrate variances and condition the posterior.
    Fit(FitArgs),
    /// Bayesian optimization of the penalty weight only.
    Hyperopt(HyperoptArgs),
    /// Pointwise posterior mean, variance and credible interval.
    Query(QueryArgs),
    /// Posterior draws of ODF coefficients.
    Sample(SampleArgs),
    /// Penalized least-squares spherical harmonic fit.
    Baseline(BaselineArgs),
    /// Residual bootstrap replicates of the baseline fit.
    Bootstrap(BootstrapArgs),
    /// Streamlines on the posterior mean field and on posterior draws.
    Tract(TractArgs),
    /// Run an experiment or re-aggregate a written report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_enum, default_value = "crossing2d")]
    kind: PhantomKind,
    /// Phantom configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid size per axis, comma separated.
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    #[arg(long)]
    directions: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    bundle_width: Option<f64>,
    /// Store tensors as f32 instead of f64.
    #[arg(long)]
    f32: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Estimator configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HyperoptArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the trial ledger and the selection.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// One voxel coordinate per line.
    #[arg(long)]
    coords: PathBuf,
    /// Directions in bvec layout; defaults to the 200-point evaluation grid.
    #[arg(long)]
    directions: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    coords: PathBuf,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// Penalty weight, or `auto` for GCV.
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long = "B", default_value_t = 500)]
    b: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TractArgs {
    #[arg(long)]
    model: PathBuf,
    /// One seed per line: `x y z` or `x y z dx dy dz`.
    #[arg(long)]
    seeds: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, default_value_t = 0.25)]
    gfa_threshold: f64,
    #[arg(long, default_value_t = 1000)]
    max_steps: usize,
    /// Posterior draws traced per seed.
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    icosphere_level: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Report directory.
    #[arg(long)]
    report: PathBuf,
    /// Run the Monte-Carlo experiment described by this JSON file first.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the tractography experiment described by this JSON file first.
    #[arg(long)]
    tract_config: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(NodfError::MissingComponent(p.to_path_buf()));
            }
            Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
        }
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Whitespace- or comma-separated numbers, one record per line; `#` starts a comment.
fn read_table(path: &Path) -> Result<Vec<Vec<f64>>> {
    if !path.exists() {
        return Err(NodfError::MissingComponent(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| NodfError::Parse(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_coords(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>> {
    let rows = read_table(path)?;
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(NodfError::ShapeMismatch(format!(
            "coordinate rows need {dim} values, found {}",
            r.len()
        )));
    }
    Ok(rows)
}

fn parse_lambda(s: &str) -> Result<Option<f64>> {
    if s == "auto" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| NodfError::Parse(format!("lambda {s:?}: {e}")))
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn cmd_phantom(a: &PhantomArgs, seed: u64) -> Result<()> {
    let mut cfg: PhantomConfig = match &a.config {
        Some(_) => read_json(a.config.as_deref())?,
        None if a.kind == PhantomKind::Caduceus3d => PhantomConfig::caduceus(24),
        None => PhantomConfig::default(),
    };
    if a.config.is_none() {
        cfg.kind = a.kind;
    }
    if let Some(s) = &a.shape {
        cfg.shape = s.clone();
    }
    if let Some(m) = a.directions {
        cfg.n_directions = m;
    }
    if let Some(s) = a.snr {
        cfg.snr = s;
    }
    if let Some(w) = a.bundle_width {
        cfg.bundle_width = w;
    }
    let ds = harness::build_phantom_dataset(&cfg, seed)?;
    write_dataset(&ds, &a.out, if a.f32 { Dtype::F32 } else { Dtype::F64 })?;
    log::info!("wrote {} voxels x {} directions to {}", ds.n_voxels(), ds.n_directions(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    seed: u64,
    lambda_c: f64,
    sigma_e2: f64,
    sigma_w2: f64,
    sigma_mu2: f64,
    final_loss: f64,
    calibration_voxels: Vec<usize>,
    /// (s_w^2, s_mu^2, log-likelihood) per calibration grid cell.
    calibration_table: Vec<(f64, f64, f64)>,
    config: EstimatorConfig,
}

/// Trial fields that do not depend on timing.
#[derive(Serialize)]
struct TrialSummary {
    x: Vec<f64>,
    loglik: f64,
    seed: u64,
}

fn trial_summaries(trials: &[TrialRecord]) -> Vec<TrialSummary> {
    trials
        .iter()
        .map(|t| TrialSummary {
            x: t.x.clone(),
            loglik: t.loglik,
            seed: t.seed,
        })
        .collect()
}

fn write_trials(dir: &Path, trials: &[TrialRecord]) -> Result<()> {
    let ledger = dir.join("trials.jsonl");
    if ledger.exists() {
        fs::remove_file(&ledger)?;
    }
    hyperopt::write_ledger(&ledger, trials)?;
    write_json(&dir.join("trials.json"), &trial_summaries(trials))
}

fn cmd_fit(a: &FitArgs, seed: u64) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let cfg: EstimatorConfig = read_json(a.config.as_deref())?;
    let out = fit_pipeline(&ds, &cfg, seed)?;
    out.state.save(&a.out)?;
    let summary = FitSummary {
        seed,
        lambda_c: out.lambda_c,
        sigma_e2: out.sigma_e2,
        sigma_w2: out.calibration.sigma_w2,
        sigma_mu2: out.calibration.sigma_mu2,
        final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
        calibration_voxels: out.calib_idx.clone(),
        calibration_table: out.calibration.table.clone(),
        config: cfg,
    };
    write_json(&a.out.join("fit.json"), &summary)?;
    let losses: String = out.losses.iter().map(|l| format!("{l}\n")).collect();
    fs::write(a.out.join("losses.txt"), losses)?;
    if !out.trials.is_empty() {
        write_trials(&a.out, &out.trials)?;
    }
    log::info!("posterior written to {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct HyperoptSummary {
    seed: u64,
    best_index: usize,
    best_x: Vec<f64>,
    best_lambda_c: f64,
    best_loglik: f64,
}

fn cmd_hyperopt(a: &HyperoptArgs, seed: u64) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let cfg: EstimatorConfig = read_json(a.config.as_deref())?;
    cfg.validate()?;
    let sigma_e2 = match (cfg.sigma_e2, &ds.b0) {
        (Some(s), _) => s,
        (None, Some(b0)) => nodf::estimator::estimate_sigma_e(b0)?,
        (None, None) => {
            return Err(NodfError::InvalidArgument(
                "dataset has no b=0 volumes and no noise variance was given".into(),
            ))
        }
    };
    // Same partition and seed derivation as `fit`.
    let (_, train_idx) = split_calibration(ds.n_voxels(), cfg.n_calib, derive_seed(seed, &[10]))?;
    let train = ds.subset(&train_idx);
    let res = hyperopt::bo_loop(&train, &cfg, sigma_e2, derive_seed(seed, &[11]))?;
    fs::create_dir_all(&a.out)?;
    write_trials(&a.out, &res.trials)?;
    let best = res.best();
    write_json(
        &a.out.join("hyperopt.json"),
        &HyperoptSummary {
            seed,
            best_index: res.best_index,
            best_x: best.x.clone(),
            best_lambda_c: res.best_lambda_c(),
            best_loglik: best.loglik,
        },
    )
}

fn directions_arg(path: Option<&Path>) -> Result<Vec<Direction>> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(NodfError::MissingComponent(p.to_path_buf()));
            }
            parse_bvec(&fs::read_to_string(p)?)
        }
        None => fibonacci_sphere(harness::EVAL_DIRECTIONS),
    }
}

fn cmd_query(a: &QueryArgs) -> Result<()> {
    let state = PosteriorState::load(&a.model)?;
    let dim = state.params.d_in();
    let coords = read_coords(&a.coords, dim)?;
    let dirs = directions_arg(a.directions.as_deref())?;
    let phi = state.basis.anisotropic_matrix(&dirs);
    let axes = ["x", "y", "z"];
    let mut text = format!("voxel,{},direction,px,py,pz,mean,var,lo,hi\n", axes[..dim].join(","));
    for (i, v) in coords.iter().enumerate() {
        let xi = state.features_at(v)?;
        let (means, vars) = state.odf_on_design(&xi, &phi);
        for (j, p) in dirs.iter().enumerate() {
            let (lo, hi) = interval_from_moments(means[j], vars[j], a.alpha)?;
            let pv = p.vector();
            text.push_str(&format!(
                "{i},{},{j},{},{},{},{},{},{},{}\n",
                join(v),
                pv.x,
                pv.y,
                pv.z,
                means[j],
                vars[j],
                lo,
                hi
            ));
        }
    }
    emit(a.out.as_deref(), &text)
}

fn cmd_sample(a: &SampleArgs, seed: u64) -> Result<()> {
    let state = PosteriorState::load(&a.model)?;
    let coords = read_coords(&a.coords, state.params.d_in())?;
    let grid = fibonacci_sphere(harness::EVAL_DIRECTIONS)?;
    let design = state.basis.matrix(&grid);
    let k = state.basis.len();
    let mut text = format!(
        "voxel,draw,gfa,{}\n",
        (0..k).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",")
    );
    for (i, v) in coords.iter().enumerate() {
        let draws = state.sample_odf(v, a.n, derive_seed(seed, &[i as u64]))?;
        for (d, c) in draws.iter().enumerate() {
            let g = gfa((&design * c).as_slice()).unwrap_or(f64::NAN);
            text.push_str(&format!("{i},{d},{g},{}\n", join(c.as_slice())));
        }
    }
    emit(a.out.as_deref(), &text)
}

fn baseline_lambda(y: &DMatrix<f64>, basis: &HarmonicBasis, phi: &DMatrix<f64>, arg: &str) -> Result<f64> {
    match parse_lambda(arg)? {
        Some(l) => Ok(l),
        None => shls::gcv_select(y, basis, phi, &shls::default_lambda_grid()),
    }
}

#[derive(Serialize)]
struct BaselineSummary {
    lambda: f64,
    gcv: f64,
    voxels: usize,
}

fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let basis = HarmonicBasis::new(8)?;
    let phi = basis.matrix(&ds.directions);
    let lambda = baseline_lambda(&ds.signals, &basis, &phi, &a.lambda)?;
    let fit = shls::shls_fit(&ds.signals, &basis, &phi, lambda)?;
    let mut blob = nodf::blob::TensorBlob::new();
    blob.push_matrix("odf_coeffs", &fit.odf_coeffs);
    blob.push_matrix("signal_coeffs", &fit.signal_coeffs);
    blob.meta = serde_json::json!({ "lambda": lambda });
    blob.save(&a.out, "baseline")?;
    let gcv = shls::gcv_score(&ds.signals, &phi, &shls::laplace_beltrami_penalty(&basis), lambda)?;
    write_json(
        &a.out.join("baseline.summary.json"),
        &BaselineSummary {
            lambda,
            gcv,
            voxels: ds.n_voxels(),
        },
    )
}

fn cmd_bootstrap(a: &BootstrapArgs, seed: u64) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let basis = HarmonicBasis::new(8)?;
    let phi = basis.matrix(&ds.directions);
    let lambda = baseline_lambda(&ds.signals, &basis, &phi, &a.lambda)?;
    let reps = shls::residual_bootstrap(&ds.signals, &basis, &phi, lambda, a.b, seed)?;
    reps.save(&a.out, lambda, seed)
}

#[derive(Serialize)]
struct SeedTracts {
    seed_point: [f64; 3],
    mean: Streamline,
    samples: Vec<Streamline>,
}

fn cmd_tract(a: &TractArgs, seed: u64) -> Result<()> {
    let state = PosteriorState::load(&a.model)?;
    let dim = state.params.d_in();
    let kit = TraceKit::new(state.basis.l_max(), a.icosphere_level)?;
    let cfg = TraceConfig {
        step: a.step,
        gfa_threshold: a.gfa_threshold,
        max_steps: a.max_steps,
    };
    let mut kit = kit;
    kit.domain.dim = dim;
    let mut out = Vec::new();
    for (i, row) in read_table(&a.seeds)?.iter().enumerate() {
        let (x0, initial) = match row.len() {
            3 => (Vector3::new(row[0], row[1], row[2]), None),
            6 => (Vector3::new(row[0], row[1], row[2]), Some(Vector3::new(row[3], row[4], row[5]))),
            n => return Err(NodfError::Parse(format!("seed row {} has {n} values, expected 3 or 6", i + 1))),
        };
        let mean = kit.trace_nodf(&state, &state.w_bar, x0, initial, &cfg)?;
        let samples = if a.samples > 0 {
            harness::posterior_streamlines(&kit, &state, x0, initial, a.samples, &cfg, derive_seed(seed, &[i as u64]))?
        } else {
            Vec::new()
        };
        out.push(SeedTracts {
            seed_point: [x0.x, x0.y, x0.z],
            mean,
            samples,
        });
    }
    write_json(&a.out, &out)
}

fn cmd_eval(a: &EvalArgs, seed: Option<u64>) -> Result<()> {
    if let Some(path) = &a.config {
        let mut cfg: ExperimentConfig = read_json(Some(path))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let report = harness::run_experiment(&cfg)?;
        harness::write_report(&report, &cfg, &a.report)?;
    }
    if let Some(path) = &a.tract_config {
        let mut cfg: TractConfig = read_json(Some(path))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let report = harness::run_tract_experiment(&cfg)?;
        write_json(&a.report.join("tract.json"), &report)?;
        println!("tract: M={} closer than M={} in {} of {} runs", cfg.m_high, cfg.m_low, report.improved_runs(), report.runs.len());
    }
    let rows_path = a.report.join("replicates.csv");
    if rows_path.exists() {
        let cells = harness::summarize(&harness::read_rows(&rows_path)?);
        let written = a.report.join("report.csv");
        if written.exists() {
            let stored = harness::read_cells(&written)?;
            let same = stored.len() == cells.len()
                && stored.iter().zip(&cells).all(|(s, c)| format!("{s:?}") == format!("{c:?}"));
            if !same {
                log::warn!("{} disagrees with the replicate rows", written.display());
            }
        }
        print!("{}", harness::format_table(&cells));
    } else if a.tract_config.is_none() {
        return Err(NodfError::MissingComponent(rows_path));
    }
    Ok(())
}

fn init_threads(flag: Option<usize>) {
    let env = std::env::var("NODF_THREADS").ok().and_then(|s| s.trim().parse::<usize>().ok());
    if let Some(n) = env.or(flag).filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    init_threads(cli.threads);
    let seed = cli.seed.unwrap_or(0);
    let result = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, seed),
        Command::Fit(a) => cmd_fit(a, seed),
        Command::Hyperopt(a) => cmd_hyperopt(a, seed),
        Command::Query(a) => cmd_query(a),
        Command::Sample(a) => cmd_sample(a, seed),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Bootstrap(a) => cmd_bootstrap(a, seed),
        Command::Tract(a) => cmd_tract(a, seed),
        Command::Eval(a) => cmd_eval(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
