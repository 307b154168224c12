use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trgmc::cmd::{cmd_background, cmd_compensate, cmd_evaluate, cmd_render, cmd_segment, cmd_synth, format_eval_table};
use trgmc::{Error, RunConfig};

/// Temporally robust global motion compensation.
#[derive(Parser)]
#[command(name = "trgmc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Command {
    /// Align all frames to one global coordinate system.
    Compensate,
    /// Render the motion panorama from frames and transforms.
    Render,
    /// Reconstruct the background plate.
    Background,
    /// Segment the foreground of every frame against the background plate.
    Segment,
    /// Compare transforms with ground truth across time gaps.
    Evaluate,
    /// Generate a synthetic scene from a scene spec.
    Synth,
}

#[derive(Args)]
struct Opts {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory of numbered frames.
    #[arg(long, global = true)]
    frames: Option<PathBuf>,
    /// Keypoint JSON (injection mode).
    #[arg(long, global = true)]
    keypoints: Option<PathBuf>,
    #[arg(long, global = true)]
    transforms: Option<PathBuf>,
    #[arg(long, global = true)]
    maps: Option<PathBuf>,
    /// Ground-truth transforms for evaluate.
    #[arg(long, global = true)]
    gt: Option<PathBuf>,
    /// Foreground masks for evaluate.
    #[arg(long, global = true)]
    masks: Option<PathBuf>,
    /// Scene spec for synth.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    #[arg(long, global = true)]
    delta_f: Option<usize>,
    /// backward or backward-forward.
    #[arg(long, global = true)]
    scheme: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    ratio: Option<f64>,
    #[arg(long, global = true)]
    gamma_coeff: Option<f64>,
    #[arg(long, global = true)]
    tau_fg: Option<f64>,
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    frame_width: Option<usize>,
    #[arg(long, global = true)]
    frame_height: Option<usize>,
    /// overlay or over-background.
    #[arg(long, global = true)]
    render_mode: Option<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

impl Opts {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let cli = PathBuf::from("<command line>");
        let fail = |message: String| Error::Config {
            path: cli.clone(),
            line: 0,
            message,
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| fail(format!("--set expects KEY=VALUE, got '{s}'")))?;
            cfg.set(k.trim(), v.trim()).map_err(fail)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let overrides = [
            ("out", path(&self.out)),
            ("frames", path(&self.frames)),
            ("keypoints", path(&self.keypoints)),
            ("transforms", path(&self.transforms)),
            ("maps", path(&self.maps)),
            ("gt", path(&self.gt)),
            ("masks", path(&self.masks)),
            ("spec", path(&self.spec)),
            ("delta_f", self.delta_f.map(|v| v.to_string())),
            ("scheme", self.scheme.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("ratio", self.ratio.map(|v| v.to_string())),
            ("gamma_coeff", self.gamma_coeff.map(|v| v.to_string())),
            ("tau_fg", self.tau_fg.map(|v| v.to_string())),
            ("budget", self.budget.map(|v| v.to_string())),
            ("frame_width", self.frame_width.map(|v| v.to_string())),
            ("frame_height", self.frame_height.map(|v| v.to_string())),
            ("render_mode", self.render_mode.clone()),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                cfg.set(k, &v).map_err(fail)?;
            }
        }
        cfg.validate().map_err(fail)?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = cli.opts.resolve()?;
    match cli.command {
        Command::Compensate => {
            let out = cmd_compensate(&cfg)?;
            println!(
                "aligned {} frames ({} keyframes, {} iterations) -> {}",
                out.report.frames,
                out.report.keyframes.len(),
                out.report.alignment.iterations,
                cfg.transforms_path().display()
            );
        }
        Command::Render => {
            let m = cmd_render(&cfg)?;
            println!("panorama {}x{} -> {}", m.width(), m.height(), cfg.out.join("panorama.png").display());
        }
        Command::Background => {
            let p = cmd_background(&cfg)?;
            println!(
                "background {}x{} -> {}",
                p.image.width(),
                p.image.height(),
                cfg.out.join("background.png").display()
            );
        }
        Command::Segment => {
            let masks = cmd_segment(&cfg)?;
            println!("{} masks -> {}", masks.len(), cfg.out.join("segment").display());
        }
        Command::Evaluate => {
            let result = cmd_evaluate(&cfg)?;
            print!("{}", format_eval_table(&result));
        }
        Command::Synth => {
            let spec = cmd_synth(&cfg)?;
            println!("{} frames of {} -> {}", spec.frames, spec.trajectory, cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.opts.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diag = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{diag}");
            ExitCode::FAILURE
        }
    }
}
