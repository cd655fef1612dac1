use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dmi_core::config::{Method, PriorVariant, RunConfig};
use dmi_core::export::{export_image, Colormap};
use dmi_core::metrics::{evaluate_run, read_reports, summarize, write_summary, RunMetadata};
use dmi_core::observation::ObservationSet;
use dmi_core::prior::denoiser::{moving_average, train_denoiser_with, write_loss_csv, Architecture, DataScaling, DenoiserModel};
use dmi_core::prior::{fit_gaussian_prior, PriorHandle};
use dmi_core::sampler::reconstruct;
use dmi_core::scene_sim::{generate_dataset, Dataset, Split};
use dmi_core::sweep::{cell_observations, cell_sampler, load_prior, run_method, run_sweep, SweepCell, METRICS_FILE};
use dmi_core::{io, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "dmi", version, about = "Diffusion-prior reconstruction of masked, noisy radio maps")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set sampler.m=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for the sweep.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene and pathloss dataset.
    GenDataset,
    /// Train the denoiser (or fit the Gaussian prior) on the training split.
    TrainPrior,
    /// Reconstruct one map.
    Reconstruct(ReconstructArgs),
    /// Run the evaluation sweep and append to metrics.csv.
    Sweep,
    /// Aggregate a metrics CSV per condition.
    Eval {
        /// Metrics file; defaults to metrics.csv in the output directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check the sampler against the analytic Gaussian oracle.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a grid file as a PGM or PPM image.
    Export {
        grid: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value = "gray")]
        colormap: ColormapArg,
    },
}

#[derive(Args)]
struct ReconstructArgs {
    /// Observation JSON file.
    #[arg(long, conflicts_with = "map")]
    obs: Option<PathBuf>,
    /// Test map index to observe instead of an observation file.
    #[arg(long)]
    map: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    mask_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long)]
    aware: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "diffusion")]
    method: MethodArg,
    /// Output grid file; defaults to reconstruct/<name>.dmi in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the per-step trace CSV (diffusion only).
    #[arg(long)]
    trace: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColormapArg {
    Gray,
    Viridis,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Diffusion,
    Idw,
    Kriging,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Diffusion => Method::Diffusion,
            MethodArg::Idw => Method::Idw,
            MethodArg::Kriging => Method::Kriging,
        }
    }
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Partial(String),
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let user_side = match e.downcast_ref::<Error>() {
            Some(core) => matches!(
                core,
                Error::Config(_)
                    | Error::InvalidParameter { .. }
                    | Error::Io { .. }
                    | Error::Format { .. }
                    | Error::DimensionMismatch { .. }
                    | Error::EmptyMask
                    | Error::EmptyObservations
                    | Error::GridTooSmall { .. }
            ),
            None => true,
        };
        if user_side {
            Failure::Usage(e)
        } else {
            Failure::Internal(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn toml_string(p: &Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = cli.set.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("output.dir={}", toml_string(out)));
    }
    Ok(RunConfig::parse(&text, &overrides)?)
}

fn gen_dataset(cfg: &RunConfig) -> Outcome {
    let dc = cfg.dataset.dataset_config();
    let seed = cfg.base_seed()?;
    let manifest = generate_dataset(&dc, seed, cfg.dataset_dir())?;
    println!(
        "wrote {} train and {} test scenes ({} files) to {}",
        dc.n_train,
        dc.n_test,
        manifest.files.len(),
        cfg.dataset_dir().display()
    );
    Ok(())
}

fn train_prior(cfg: &RunConfig) -> Outcome {
    let dataset = Dataset::open(cfg.dataset_dir())?;
    let maps = dataset.load_maps(Split::Train)?;
    let out = cfg.output_dir();
    match cfg.prior.variant {
        PriorVariant::Gaussian => {
            let prior = fit_gaussian_prior(&maps, cfg.prior.var_floor)?;
            io::write_grid(&out.join("gaussian_mean.dmi"), &prior.mean)?;
            io::write_grid(&out.join("gaussian_var.dmi"), &prior.var)?;
            println!("fitted Gaussian prior on {} maps; wrote gaussian_mean.dmi and gaussian_var.dmi", maps.len());
        }
        PriorVariant::Learned => {
            let schedule = cfg.schedule.build()?;
            let arch = Architecture::from_base(cfg.train.base_channels);
            let seed = cfg.base_seed()?;
            let t0 = Instant::now();
            let (model, history) = train_denoiser_with(&maps, &schedule, &arch, &cfg.train, DataScaling::SYMMETRIC, seed, |r| {
                if r.step % 25 == 0 {
                    log::info!("step {} epoch {} loss {:.4}", r.step, r.epoch, r.loss);
                }
            })?;
            let path = cfg.model_path();
            model.save(&path)?;
            write_loss_csv(&out.join("loss.csv"), &history)?;
            let smooth = moving_average(&history, 25);
            println!(
                "trained {} parameters for {} steps in {:.1} s; loss {:.4} -> {:.4} (moving average); model at {}",
                model.param_count(),
                history.len(),
                t0.elapsed().as_secs_f64(),
                history.first().map_or(f64::NAN, |r| r.loss),
                smooth.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
        }
    }
    Ok(())
}

fn reconstruct_cmd(cfg: &RunConfig, args: &ReconstructArgs) -> Outcome {
    let base_seed = cfg.base_seed()?;
    let method: Method = args.method.into();
    let cell = SweepCell {
        map: args.map.unwrap_or(0),
        mask_rate: args.mask_rate,
        sigma: args.sigma,
        aware: args.aware,
        seed: args.seed,
    };
    let dataset = Dataset::open(cfg.dataset_dir());
    let (obs, truth, name) = match (&args.obs, args.map) {
        (Some(path), _) => {
            let obs = ObservationSet::load(path)?;
            let stem = path.file_stem().map_or("obs".into(), |s| s.to_string_lossy().into_owned());
            (obs, None, stem)
        }
        (None, Some(map)) => {
            let dataset = dataset?;
            let (scene, truth) = dataset.load(Split::Test, map)?;
            let obs = cell_observations(cfg, base_seed, &cell, &scene, &truth)?;
            let aware = if args.aware { "aware" } else { "unaware" };
            let name = format!("map{map:04}_r{}_s{}_{aware}_seed{}_{}", args.mask_rate, args.sigma, args.seed, method.name());
            (obs, Some((scene, truth)), name)
        }
        (None, None) => return Err(Failure::Usage(anyhow!("reconstruct needs --obs FILE or --map INDEX"))),
    };
    let schedule = cfg.schedule.build()?;
    let t0 = Instant::now();
    let (map, trace) = if method == Method::Diffusion {
        let prior = match cfg.prior.variant {
            PriorVariant::Learned => PriorHandle::Learned(Box::new(DenoiserModel::load(&cfg.model_path())?)),
            PriorVariant::Gaussian => load_prior(cfg, &Dataset::open(cfg.dataset_dir())?)?,
        };
        let mut sampler = cell_sampler(cfg, base_seed, &cell);
        sampler.record_trace = args.trace;
        let rec = reconstruct(&obs, &prior, &schedule, &sampler)?;
        (rec.map, Some((rec.trace, sampler.seed)))
    } else {
        (run_method(cfg, base_seed, method, &cell, &obs, None, &schedule)?, None)
    };
    let wall = t0.elapsed().as_secs_f64();
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| cfg.output_dir().join("reconstruct").join(format!("{name}.dmi")));
    io::write_grid(&output, &map)?;
    let mut manifest = serde_json::json!({
        "method": method.name(),
        "base_seed": base_seed,
        "cell": { "map": args.map, "mask_rate": args.mask_rate, "sigma": args.sigma, "aware": args.aware, "seed": args.seed },
        "observations": obs.len(),
        "wall_time_s": wall,
        "config": cfg.to_toml()?,
    });
    if let Some((trace, seed)) = &trace {
        manifest["sampler_seed"] = serde_json::json!(seed);
        manifest["max_weight_sum_error"] = serde_json::json!(trace.max_weight_sum_error);
        manifest["underflow_count"] = serde_json::json!(trace.underflow_count);
        if args.trace {
            let trace_path = output.with_extension("trace.csv");
            trace.write_csv(&trace_path)?;
            manifest["trace"] = serde_json::json!(trace_path);
        }
    }
    io::write_json(&output.with_extension("json"), &manifest)?;
    println!("wrote {} in {wall:.2} s", output.display());
    if let Some((scene, truth)) = truth {
        let meta = RunMetadata {
            method: method.name().into(),
            map: cell.map,
            mask_rate: cell.mask_rate,
            sigma: cell.sigma,
            aware: cell.aware,
            seed: cell.seed,
            wall_time_s: wall,
        };
        let r = evaluate_run(&map, &truth, &scene, &cfg.metrics, &meta)?;
        println!("psnr {:.2} dB  ssim {:.4}  nmse {:.4}  rmse {:.4}  spe {:.2}", r.psnr, r.ssim, r.nmse, r.rmse, r.spe);
    }
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, jobs: usize) -> Outcome {
    let prior = if cfg.sweep.methods.contains(&Method::Diffusion) {
        let dataset = Dataset::open(cfg.dataset_dir())?;
        Some(load_prior(cfg, &dataset)?)
    } else {
        None
    };
    let out = cfg.output_dir();
    io::write_bytes(&out.join("sweep_config.toml"), cfg.to_toml()?.as_bytes())?;
    let t0 = Instant::now();
    let summary = run_sweep(cfg, prior.as_ref(), jobs)?;
    println!(
        "{} cells ({} already complete), {} rows written to {} in {:.1} s",
        summary.cells,
        summary.skipped,
        summary.rows_written,
        out.join(METRICS_FILE).display(),
        t0.elapsed().as_secs_f64()
    );
    if !summary.failures.is_empty() {
        for (label, reason) in &summary.failures {
            eprintln!("failed: {label}: {reason}");
        }
        return Err(Failure::Partial(format!("{} runs failed", summary.failures.len())));
    }
    Ok(())
}

fn eval_cmd(csv: &Path, out: Option<&Path>) -> Outcome {
    let file = File::open(csv).with_context(|| format!("opening {}", csv.display()))?;
    let rows = read_reports(file)?;
    if rows.is_empty() {
        return Err(Failure::Usage(anyhow!("{} has no rows", csv.display())));
    }
    let summary = summarize(&rows);
    println!(
        "{:<10} {:>9} {:>6} {:>7} {:>5} {:>9} {:>7} {:>8} {:>8} {:>7}",
        "method", "mask_rate", "sigma", "aware", "runs", "psnr", "±", "ssim", "nmse", "spe"
    );
    for s in &summary {
        println!(
            "{:<10} {:>9} {:>6} {:>7} {:>5} {:>9.3} {:>7.3} {:>8.4} {:>8.4} {:>7.2}",
            s.method, s.mask_rate, s.sigma, s.aware, s.runs, s.psnr_mean, s.psnr_std, s.ssim_mean, s.nmse_mean, s.spe_mean
        );
    }
    if let Some(dir) = out {
        let path = dir.join("summary.csv");
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_summary(f, &summary)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn oracle_check(seed: u64) -> Outcome {
    let results = dmi_core::checks::oracle_suite(seed)?;
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += !r.passed as usize;
    }
    if failed > 0 {
        return Err(Failure::Internal(anyhow!("{failed} oracle checks failed")));
    }
    println!("all {} oracle checks passed", results.len());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if cli.jobs == 0 {
        return Err(Failure::Usage(anyhow!("--jobs must be at least 1")));
    }
    match &cli.command {
        Command::OracleCheck { seed } => oracle_check(*seed),
        Command::Export { grid, output, colormap } => {
            let g = io::read_grid(grid)?;
            let cm = match colormap {
                ColormapArg::Gray => Colormap::Gray,
                ColormapArg::Viridis => Colormap::Viridis,
            };
            export_image(&g, output, cm)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Eval { csv } => {
            let cfg = load_config(&cli).ok();
            let csv = match (csv, &cfg) {
                (Some(p), _) => p.clone(),
                (None, Some(c)) => c.output_dir().join(METRICS_FILE),
                (None, None) => match &cli.out {
                    Some(o) => o.join(METRICS_FILE),
                    None => bail_usage("eval needs --csv, --out or a config")?,
                },
            };
            let out = cfg.as_ref().map(|c| c.output_dir().to_path_buf()).or_else(|| cli.out.clone());
            eval_cmd(&csv, out.as_deref())
        }
        Command::GenDataset => gen_dataset(&load_config(&cli).map_err(Failure::Usage)?),
        Command::TrainPrior => train_prior(&load_config(&cli).map_err(Failure::Usage)?),
        Command::Reconstruct(args) => reconstruct_cmd(&load_config(&cli).map_err(Failure::Usage)?, args),
        Command::Sweep => sweep_cmd(&load_config(&cli).map_err(Failure::Usage)?, cli.jobs),
    }
}

fn bail_usage<T>(msg: &str) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(anyhow!("{msg}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Partial(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
