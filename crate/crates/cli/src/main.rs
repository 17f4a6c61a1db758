//! `stripalign`: generate, preprocess, estimate, export and inspect strip
//! adjustments.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use stripalign_core::config::{ConfigError, PipelineConfig};
use stripalign_core::diagnostics::{std_map_render, truth_report, GAUGE_KNOT_SPACING};
use stripalign_core::error::{ErrorClass, PipelineError};
use stripalign_core::latent_map::parse_dump;
use stripalign_core::pipeline::{
    compare_with_truth, evaluate, export_ply, map_dumps, preprocess, run_schedule, CorrectionsSet, WorkDir,
};
use stripalign_core::strip::write_strip;
use stripalign_core::synth::{
    generate_scene, read_truth, street_scene, write_truth, ErrorSpec, TrajectoryPath, STANDARD_LENGTH, STANDARD_SEED,
};

#[derive(Parser, Debug)]
#[command(name = "stripalign", version, about = "LiDAR strip adjustment against a latent surface map")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Number of worker threads.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Directory for intermediate engine files.
    #[arg(long, global = true, value_name = "DIR")]
    scratch: Option<PathBuf>,
    /// Seed for the scene generator and the RANSAC samplers.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run this many plan steps (the last step repeats if the plan is shorter).
    #[arg(long, global = true, value_name = "N")]
    iterations_override: Option<usize>,
    /// Tile edge length in meters.
    #[arg(long, global = true, value_name = "M")]
    tile_size: Option<f64>,
    /// More log output (repeat for debug level).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the street scene: strip files plus truth sidecars.
    Generate {
        /// Output directory (receives strips/, truth/, scene.json, paths.json).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Street length in meters.
        #[arg(long, default_value_t = STANDARD_LENGTH)]
        length: f64,
        /// Range noise (meters, 1 sigma).
        #[arg(long)]
        noise: Option<f64>,
        /// Generate without pose errors.
        #[arg(long)]
        no_errors: bool,
        /// Arc spacing of truth samples (meters).
        #[arg(long, default_value_t = 0.5)]
        truth_step: f64,
    },
    /// Segment strips and write the tile files.
    Preprocess {
        #[arg(long, value_name = "DIR")]
        work: PathBuf,
        /// Strip files, or directories searched for `*.strip`.
        #[arg(required = true, value_name = "STRIP")]
        inputs: Vec<PathBuf>,
    },
    /// Run the iteration plan on preprocessed tiles.
    Estimate {
        #[arg(long, value_name = "DIR")]
        work: PathBuf,
    },
    /// Write the corrected point cloud as binary PLY.
    Export {
        #[arg(long, value_name = "DIR")]
        work: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Corrections to apply (default: final corrections, else initial).
        #[arg(long, value_name = "FILE")]
        corrections: Option<PathBuf>,
    },
    /// Residual histogram, pixel std map and, with --truth, accuracy report.
    Stats {
        #[arg(long, value_name = "DIR")]
        work: PathBuf,
        /// Output directory (default: <work>/report).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        corrections: Option<PathBuf>,
        /// Directory written by `generate` (truth/ and paths.json).
        #[arg(long, value_name = "DIR")]
        truth: Option<PathBuf>,
        /// Std value rendered as full red (meters).
        #[arg(long, default_value_t = 0.007)]
        scale_max: f64,
        /// Std map ground resolution (meters per image pixel).
        #[arg(long, default_value_t = 0.1)]
        resolution: f64,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Pipeline(PipelineError),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Pipeline(e) => match e.class() {
                ErrorClass::Input => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Io => 4,
            },
            Self::Io(..) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Pipeline(e) => write!(f, "{e}"),
            Self::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl<E: Into<PipelineError>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::Pipeline(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| match e {
            ConfigError::Read { path, source } => CliError::Io(path, source),
            other => other.into(),
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(s) = &g.scratch {
        cfg.scratch = Some(s.clone());
    }
    if let Some(s) = g.seed {
        cfg.ransac.seed = s;
    }
    if let Some(n) = g.iterations_override {
        if cfg.plan.is_empty() && n > 0 {
            return Err(CliError::Usage("--iterations-override needs a non-empty plan".into()));
        }
        cfg.plan = cfg.plan.truncated(n);
    }
    if let Some(t) = g.tile_size {
        cfg.tiles.size = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Generate { out, length, noise, no_errors, truth_step } => {
            cmd_generate(&out, length, noise, no_errors, truth_step, cli.global.seed)
        }
        Command::Preprocess { work, inputs } => {
            let strips = collect_strips(&inputs)?;
            let pre = preprocess(&strips, &WorkDir::new(&work, &cfg), &cfg)?;
            let points: u64 = pre.tiles.iter().map(|t| t.points).sum();
            println!(
                "{} strips -> {} tiles, {} tile records, {} trajectories, {} anchors",
                strips.len(),
                pre.tiles.len(),
                points,
                pre.corrections.chains.len(),
                pre.corrections.anchor_count()
            );
            Ok(())
        }
        Command::Estimate { work } => {
            let wd = WorkDir::new(&work, &cfg);
            let stats = run_schedule(&wd, &cfg)?;
            for s in &stats {
                println!(
                    "iteration {:2}: threshold {:.4} pitch {:.3} accepted {:9} residual std {:.3} mm",
                    s.iteration,
                    s.threshold,
                    s.pitch,
                    s.points_used,
                    s.residual_std * 1e3
                );
            }
            println!("corrections: {}", wd.final_corrections().display());
            Ok(())
        }
        Command::Export { work, out, corrections } => {
            let wd = WorkDir::new(&work, &cfg);
            let corr = load_corrections(&wd, corrections.as_deref())?;
            let n = export_ply(&wd, &corr, &cfg, &out)?;
            println!("{n} points -> {}", out.display());
            Ok(())
        }
        Command::Stats { work, out, corrections, truth, scale_max, resolution } => {
            let wd = WorkDir::new(&work, &cfg);
            let out = out.unwrap_or_else(|| work.join("report"));
            cmd_stats(&wd, &cfg, &out, corrections.as_deref(), truth.as_deref(), scale_max, resolution)
        }
    }
}

fn cmd_generate(
    out: &Path,
    length: f64,
    noise: Option<f64>,
    no_errors: bool,
    truth_step: f64,
    seed: Option<u64>,
) -> Result<(), CliError> {
    if !(length > 0.0) || !(truth_step > 0.0) {
        return Err(CliError::Usage("--length and --truth-step must be positive".into()));
    }
    let seed = seed.unwrap_or(STANDARD_SEED);
    let mut scene = street_scene(length, seed);
    if no_errors {
        scene.errors = ErrorSpec { noise_sigma: scene.errors.noise_sigma, ..ErrorSpec::none() };
    }
    scene.errors.seed = seed;
    if let Some(n) = noise {
        scene.errors.noise_sigma = n;
    }
    let gen = generate_scene(&scene, truth_step)?;
    let (strips_dir, truth_dir) = (out.join("strips"), out.join("truth"));
    for d in [&strips_dir, &truth_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut points = 0;
    for g in &gen {
        for s in &g.strips {
            write_strip(s, &strips_dir.join(format!("strip_{:03}.strip", s.strip_id.0)))?;
            points += s.point_count();
        }
        write_truth(&truth_dir.join(format!("traj_{}.csv", g.trajectory_id.0)), &g.truth)?;
    }
    let scene_path = out.join("scene.json");
    fs::write(&scene_path, scene.scene.to_json()?).map_err(io_err(&scene_path))?;
    let paths_path = out.join("paths.json");
    let paths = serde_json::to_string_pretty(&scene.paths).expect("paths serialize");
    fs::write(&paths_path, paths).map_err(io_err(&paths_path))?;
    println!("{} strips, {points} points -> {}", gen.iter().map(|g| g.strips.len()).sum::<usize>(), out.display());
    Ok(())
}

fn collect_strips(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "strip"))
                .collect();
            if found.is_empty() {
                return Err(PipelineError::Input(format!("no .strip files in {}", p.display())).into());
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_corrections(wd: &WorkDir, explicit: Option<&Path>) -> Result<CorrectionsSet, CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None if wd.final_corrections().exists() => wd.final_corrections(),
        None => wd.corrections(0),
    };
    info!("corrections from {}", path.display());
    Ok(CorrectionsSet::read(&path)?)
}

fn cmd_stats(
    wd: &WorkDir,
    cfg: &PipelineConfig,
    out: &Path,
    corrections: Option<&Path>,
    truth: Option<&Path>,
    scale_max: f64,
    resolution: f64,
) -> Result<(), CliError> {
    if !(scale_max > 0.0) || !(resolution > 0.0) {
        return Err(CliError::Usage("--scale-max and --resolution must be positive".into()));
    }
    let Some(&step) = cfg.plan.steps.last() else {
        return Err(CliError::Usage("stats needs a non-empty plan for its evaluation step".into()));
    };
    let corr = load_corrections(wd, corrections)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let res = evaluate(wd, &corr, step, cfg)?;

    let hist_path = out.join("histogram.csv");
    fs::write(&hist_path, res.residuals.to_csv()).map_err(io_err(&hist_path))?;
    println!(
        "residuals: {} points, mean {:.4} mm, std {:.4} mm -> {}",
        res.residuals.count,
        res.residuals.mean * 1e3,
        res.residuals.std() * 1e3,
        hist_path.display()
    );

    let mut rows = Vec::new();
    for p in map_dumps(&wd.evaluation_dir())? {
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        rows.extend(parse_dump(&text).map_err(|e| PipelineError::Format { what: "map dump", path: p.clone(), reason: e })?);
    }
    if rows.is_empty() {
        println!("std map: no confident pixels");
    } else {
        let img = std_map_render(&rows, resolution, scale_max);
        let ppm = out.join("std_map.ppm");
        fs::write(&ppm, img.to_ppm()).map_err(io_err(&ppm))?;
        println!("std map: {}x{} -> {}", img.width, img.height, ppm.display());
    }

    if let Some(dir) = truth {
        let paths_file = dir.join("paths.json");
        let text = fs::read_to_string(&paths_file).map_err(io_err(&paths_file))?;
        let paths: Vec<TrajectoryPath> = serde_json::from_str(&text).map_err(|e| PipelineError::Format {
            what: "path list",
            path: paths_file.clone(),
            reason: e.to_string(),
        })?;
        let mut samples = BTreeMap::new();
        for p in &paths {
            let f = dir.join("truth").join(format!("traj_{}.csv", p.trajectory_id.0));
            samples.insert(p.trajectory_id.0, read_truth(&f)?);
        }
        let skip: BTreeSet<u32> = cfg.fixed_trajectories.iter().copied().collect();
        let cmp = compare_with_truth(&corr, &paths, &samples, &skip);
        let report = truth_report(&cmp, Some(GAUGE_KNOT_SPACING));
        let txt = out.join("truth_report.txt");
        fs::write(&txt, report.to_text()).map_err(io_err(&txt))?;
        let json = out.join("truth_report.json");
        fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(io_err(&json))?;
        print!("{}", report.to_text());
    }
    Ok(())
}
