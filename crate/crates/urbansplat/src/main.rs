//! Command-line front end. Every subcommand is a thin wrapper: load files,
//! call the library, write results. Exit codes: 0 success, 1 I/O failure,
//! 2 bad arguments or config, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use urbansplat::dataset::Dataset;
use urbansplat::enhancer::bundle::refine_bundle;
use urbansplat::enhancer::EnhancerConfig;
use urbansplat::error::{Error, Result};
use urbansplat::evaluate::{evaluate, Split};
use urbansplat::init::PruneRoundLog;
use urbansplat::io::ply::{cloud_from_gaussians, write_ply};
use urbansplat::io::png::write_image;
use urbansplat::scene::compose;
use urbansplat::splat::render;
use urbansplat::synth::{synth_scene, SceneSpec};
use urbansplat::train::{
    initialize_graph, load_checkpoint, save_checkpoint, train, Checkpoint, InitConfig, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "urbansplat", version, about = "Desk-scale urban scene reconstruction")]
struct Cli {
    /// Worker threads (0 keeps the library default).
    #[arg(long, global = true, env = "URBANSPLAT_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a scene spec.
    Synth(SynthArgs),
    /// Build and prune an initial scene graph from a dataset.
    Init(InitArgs),
    /// Optimize a scene graph against a dataset.
    Train(TrainArgs),
    /// Refine one view's depth bundle in place.
    Enhance(EnhanceArgs),
    /// Score a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Export a checkpoint's Gaussians as an ASCII PLY cloud.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene spec TOML; omitted means the built-in default scene.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Use the default scene with its moving box (needs no spec file).
    #[arg(long, conflicts_with = "spec")]
    mover: bool,
    #[arg(long, env = "URBANSPLAT_SEED", default_value_t = 0)]
    seed: u64,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Initialization config TOML; omitted means defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, env = "URBANSPLAT_SEED")]
    seed: Option<u64>,
    /// Output directory for the checkpoint, PLY, and report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Training config TOML; omitted means the desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to continue from; omitted means initialization runs first.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Initialization config TOML, used only when --from is absent.
    #[arg(long)]
    init_config: Option<PathBuf>,
    /// Overrides the seeds in both configs.
    #[arg(long, env = "URBANSPLAT_SEED")]
    seed: Option<u64>,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    /// Bundle directory holding cameras.json, image.png, rendered.pfm,
    /// previous.pfm, and one neighbor{i}.pfm per neighbor camera;
    /// refined.pfm and outcome.json are written next to them.
    #[arg(long)]
    bundle: PathBuf,
    /// Enhancer config TOML; omitted means defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint JSON.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Views to score: train, heldout, or all.
    #[arg(long, default_value = "heldout")]
    split: String,
    /// Report JSON path; omitted prints to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for rendered PNGs of every scored view.
    #[arg(long)]
    renders: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint JSON.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frame whose object poses get baked into the cloud.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// PLY path to write.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore the error if a pool already exists; only the first build wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => run_synth(a),
        Command::Init(a) => run_init(a),
        Command::Train(a) => run_train(a),
        Command::Enhance(a) => run_enhance(a),
        Command::Eval(a) => run_eval(a),
        Command::Export(a) => run_export(a),
    }
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let spec: SceneSpec = match &args.spec {
        Some(path) => load_toml(path)?,
        None if args.mover => SceneSpec::with_mover(),
        None => SceneSpec::default(),
    };
    let dataset = synth_scene(&spec, args.seed)?;
    dataset.save(&args.out)?;
    println!(
        "wrote {} views ({}x{}) to {}",
        dataset.views.len(),
        dataset.width,
        dataset.height,
        args.out.display()
    );
    Ok(())
}

/// What initialization produced, minus the graph itself.
#[derive(Debug, Serialize)]
struct InitReport {
    initial_points: usize,
    background: usize,
    road: usize,
    objects: Vec<usize>,
    ground_height: Option<f64>,
    prune_rounds: Vec<PruneRoundLog>,
}

fn run_init(args: InitArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset)?;
    let mut config: InitConfig = match &args.config {
        Some(path) => load_toml(path)?,
        None => InitConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let outcome = initialize_graph(&dataset, &config)?;
    std::fs::create_dir_all(&args.out)?;

    let report = InitReport {
        initial_points: outcome.initial_points,
        background: outcome.graph.background.len(),
        road: outcome.graph.road.len(),
        objects: outcome.graph.objects.iter().map(|o| o.gaussians.len()).collect(),
        ground_height: outcome.graph.ground.as_ref().map(|g| g.height),
        prune_rounds: outcome.prune_logs.clone(),
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Parse(format!("report serialize: {e}")))?;
    std::fs::write(args.out.join("init_report.json"), text)?;

    let (set, _) = compose(&outcome.graph, 0)?;
    write_ply(&args.out.join("init.ply"), &cloud_from_gaussians(&set))?;
    let ckpt = Checkpoint { graph: outcome.graph, iterations_done: 0 };
    save_checkpoint(&args.out.join("checkpoint.json"), &ckpt)?;
    println!(
        "initialized {} gaussians from {} points ({} pruning rounds), wrote {}",
        set.len(),
        report.initial_points,
        report.prune_rounds.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset)?;
    let mut config: TrainConfig = match &args.config {
        Some(path) => load_toml(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (mut graph, done) = match &args.from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            (ckpt.graph, ckpt.iterations_done)
        }
        None => {
            let mut init_config: InitConfig = match &args.init_config {
                Some(path) => load_toml(path)?,
                None => InitConfig::default(),
            };
            if let Some(seed) = args.seed {
                init_config.seed = seed;
            }
            (initialize_graph(&dataset, &init_config)?.graph, 0)
        }
    };
    let logs = train(&mut graph, &dataset, &config)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("train_log.txt"), logs.render_text())?;
    let ckpt = Checkpoint { graph, iterations_done: done + config.total_iters };
    save_checkpoint(&args.out.join("checkpoint.json"), &ckpt)?;
    match logs.iters.last() {
        Some(last) => println!(
            "trained {} iterations (total loss {:e}), wrote {}",
            config.total_iters,
            last.total,
            args.out.display()
        ),
        None => println!("trained 0 iterations, wrote {}", args.out.display()),
    }
    Ok(())
}

fn run_enhance(args: EnhanceArgs) -> Result<()> {
    let config: EnhancerConfig = match &args.config {
        Some(path) => load_toml(path)?,
        None => EnhancerConfig::default(),
    };
    let outcome = refine_bundle(&args.bundle, &config)?;
    println!(
        "refined: {:?}, {} steps accepted of {}, loss {:e} -> {:e}",
        outcome.status,
        outcome.steps_accepted,
        outcome.steps_total,
        outcome.initial_loss,
        outcome.final_loss
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.dataset)?;
    let split: Split = args.split.parse()?;
    let report = evaluate(&ckpt.graph, &dataset, split)?;
    if let Some(dir) = &args.renders {
        std::fs::create_dir_all(dir)?;
        for row in &report.views {
            let view = &dataset.views[row.view];
            let (set, _) = compose(&ckpt.graph, view.frame)?;
            let out = render(&set, &view.camera)?;
            let name = format!("cam{}_frame{:04}.png", view.cam_id, view.frame);
            write_image(&dir.join(name), &out.color)?;
        }
    }
    let text = report.to_json()?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!(
                "split {:?}: PSNR {:.2}, SSIM {:.4}, report at {}",
                split,
                report.mean_psnr,
                report.mean_ssim,
                path.display()
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (set, _) = compose(&ckpt.graph, args.frame)?;
    let cloud = cloud_from_gaussians(&set);
    write_ply(&args.out, &cloud)?;
    println!("wrote {} points to {}", cloud.positions.len(), args.out.display());
    Ok(())
}
