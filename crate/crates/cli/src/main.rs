use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hogs_core::error::Error;
use hogs_core::mathcore::Vec3;
use hogs_core::pipeline::{self, checkpoint_primitives, measure_fps, PipelineError, RunConfig, RunSummary, StageName};
use hogs_core::splat::{psnr, rasterize, Camera, Image};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "hogs", version, about = "Human-object Gaussian splatting on a synthetic capture")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    views: Option<usize>,
    #[arg(long, global = true)]
    grid_dims: Option<usize>,
    /// Disable the attraction and repulsion terms.
    #[arg(long, global = true)]
    no_physics: bool,
    /// Output directory for stage artifacts and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fixture directory written by `synth` and read by every stage.
    #[arg(long, global = true)]
    fixture: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic capture into the fixture directory.
    Synth,
    /// Rigid object tracking from markers.
    Track,
    /// Multi-view body pose refinement.
    FitPose,
    /// Signed distance grid of the tracked object.
    BuildSdf,
    /// Train the contact predictor and label the fixture frame.
    Contact,
    /// Physics-aware scene optimization.
    Optimize,
    /// Render a checkpoint from one camera and time it.
    Render(RenderArgs),
    /// Score the optimized scene and write the report.
    Eval,
    /// Every stage through evaluation.
    Pipeline,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Timed frames for the throughput figure.
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Raw ground-truth image; adds PSNR to timing.json.
    #[arg(long)]
    reference: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.to_string()),
            PipelineError::Stage { .. } => Failure::Stage(e.to_string()),
        }
    }
}

fn config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&s).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.views {
        cfg.views = v;
    }
    if let Some(d) = common.grid_dims {
        cfg.grid_dims = d;
    }
    if common.no_physics {
        cfg.physics = false;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(f) = &common.fixture {
        cfg.fixture = f.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    for st in &s.stages {
        println!("{:<10} {} {:.2}s", st.name, if st.skipped { "cached" } else { "ran   " }, st.seconds);
    }
    if let Some(r) = &s.report {
        let m = &r.metrics;
        println!(
            "psnr train {:.2} heldout {:.2}  penetration {:.2e}  contact f1 {:.3}  fps {:.1}",
            m.mean_train_psnr, m.mean_heldout_psnr, m.mean_penetration, m.contact_f1, r.timing.fps
        );
    }
}

fn render(cfg: &RunConfig, args: &RenderArgs) -> Result<(), Failure> {
    if args.frames < 100 {
        return Err(Failure::Config("render needs at least 100 timed frames".into()));
    }
    let stage = |e: Error| Failure::Stage(format!("render failed: {e}"));
    let (_, prims) = checkpoint_primitives(&args.checkpoint).map_err(stage)?;
    let cam = Camera::load(&args.camera).map_err(stage)?;
    let background = Vec3::from(cfg.optimize.background);
    let t0 = Instant::now();
    let img = rasterize(&prims, &cam, background).color;
    let first = t0.elapsed().as_secs_f64();
    let fps = measure_fps(&prims, &cam, background, args.frames);
    let score = match &args.reference {
        Some(r) => Some(Image::load_raw(r).and_then(|gt| psnr(&img, &gt)).map_err(stage)?),
        None => None,
    };
    let out = &cfg.out;
    let write = || -> Result<(), Error> {
        std::fs::create_dir_all(out)?;
        img.save_png(&out.join("render.png"))?;
        img.save_raw(&out.join("render.bin"))?;
        let timing = json!({
            "gaussians": prims.len(),
            "width": cam.width,
            "height": cam.height,
            "first_frame_seconds": first,
            "frames": args.frames,
            "fps": fps,
            "psnr": score,
        });
        std::fs::write(out.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
        Ok(())
    };
    write().map_err(stage)?;
    match score {
        Some(p) => println!("{} gaussians, {:.1} fps, psnr {p:.3}", prims.len(), fps),
        None => println!("{} gaussians, {:.1} fps", prims.len(), fps),
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = config(&cli.common)?;
    let stage = |name: StageName| -> Result<(), Failure> {
        print_summary(&pipeline::run(&cfg, name)?);
        Ok(())
    };
    match &cli.command {
        Command::Synth => {
            pipeline::synth(&cfg, &cfg.fixture).map_err(|e| Failure::Stage(format!("synth failed: {e}")))?;
            println!("fixture written to {}", cfg.fixture.display());
            Ok(())
        }
        Command::Track => stage(StageName::Track),
        Command::FitPose => stage(StageName::FitPose),
        Command::BuildSdf => stage(StageName::BuildSdf),
        Command::Contact => stage(StageName::Contact),
        Command::Optimize => stage(StageName::Optimize),
        Command::Eval | Command::Pipeline => {
            stage(StageName::Eval)?;
            println!("report: {}", report_path(&cfg.out).display());
            Ok(())
        }
        Command::Render(args) => render(&cfg, args),
    }
}

fn report_path(out: &Path) -> PathBuf {
    out.join("report.json")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match pipeline::with_threads(pipeline::threads_from_env(), || execute(&cli)) {
        Ok(r) => r,
        Err(e) => Err(Failure::Config(e.to_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
