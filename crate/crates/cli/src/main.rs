use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use styleinject::adapters::{count_params, format_millions, AdapterConfig, LayerManifest, Method};
use styleinject::diffusion::NoiseSchedule;
use styleinject::persist::{write_trace, Checkpoint};
use styleinject::run::{self, Mode, RunConfig};
use styleinject::{Error, Parameterized, Result};

#[derive(Parser)]
#[command(name = "styleinject", version, about = "Routed low-rank adapters on a toy diffusion denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count adapter parameters for a layer manifest.
    CountParams(CountArgs),
    /// Fine-tune adapters (finetune or fewshot config).
    Train(RunArgs),
    /// Distill a teacher into an adapted student.
    Distill(RunArgs),
    /// Record router outputs while sampling from a checkpoint.
    ExportRouter(ExportArgs),
    /// Print the header and tensor table of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct CountArgs {
    /// Manifest file; the bundled SD-1.5 attention manifest when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "lora")]
    method: Method,
    #[arg(long, default_value_t = 32)]
    rank: usize,
    #[arg(long, default_value_t = 16)]
    styles: usize,
    #[arg(long)]
    alpha: Option<f64>,
    /// Also write the full breakdown as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the step budget of the adapter training or distillation.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    checkpoint: PathBuf,
    /// Comma-separated probe conditions, one sampled instance each.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7")]
    conditions: Vec<usize>,
    /// Sampler steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace file, one JSON record per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Verify the checkpoint against this run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Load despite a config hash mismatch.
    #[arg(long)]
    force: bool,
}

fn count(args: CountArgs) -> Result<()> {
    let manifest = match &args.manifest {
        Some(p) => LayerManifest::load(p)?,
        None => LayerManifest::sd15_attention(),
    };
    let cfg = AdapterConfig {
        method: args.method,
        rank: args.rank,
        styles: args.styles,
        alpha: args.alpha,
        ..AdapterConfig::default()
    };
    cfg.validate()?;
    let b = count_params(&cfg, &manifest)?;
    println!("{:<56} {:>12} {:>8} {:>8} {:>12}", "layer", "adapter", "d_in", "d_out", "params");
    for l in &b.layers {
        println!("{:<56} {:>12} {:>8} {:>8} {:>12}", l.name, l.adapter, l.d_in, l.d_out, l.total);
    }
    println!("total {} ({})", b.total, format_millions(b.total));
    if let Some(p) = &args.json {
        let text = serde_json::to_string_pretty(&b).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.steps {
        match cfg.mode {
            Mode::Distill => cfg.distill.loss.steps = n,
            _ => cfg.finetune.train.steps = n,
        }
    }
    let out = run::resolve_out_dir(args.out.clone(), &cfg)?;
    cfg.out_dir = Some(out.clone());
    cfg.validate()?;
    Ok((cfg, out))
}

fn train(args: RunArgs) -> Result<()> {
    let (cfg, out) = load_run(&args)?;
    let r = run::cmd_train(&cfg, &out)?;
    println!(
        "{} run: held-out task loss {:.6} -> {:.6} (best {} at {:.6}), {} trainable parameters",
        r.mode, r.initial_loss, r.final_loss, r.best_checkpoint, r.best_loss, r.trainable_params
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn distill(args: RunArgs) -> Result<()> {
    let (cfg, out) = load_run(&args)?;
    let r = run::cmd_distill(&cfg, &out)?;
    if r.converged_at_init {
        println!("student already matches the teacher; nothing to distill");
    } else {
        println!(
            "{} distillation: held-out output loss {:.6} -> {:.6} at {} (ratio {:.3})",
            r.scenario, r.initial_loss, r.best_loss, r.best_checkpoint, r.best_ratio
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint, None, false)?;
    let model = run::restore_attached(&ckpt)?;
    let cfg = RunConfig::from_toml(&ckpt.meta.config)?;
    let schedule = NoiseSchedule::from_spec(&cfg.schedule)?;
    let records = run::export_router(&model, &schedule, &args.conditions, args.steps, args.seed)?;
    write_trace(&args.out, &records)?;
    println!(
        "{} records ({} instances x {} layers x {} steps) written to {}",
        records.len(),
        args.conditions.len(),
        model.routed_layers().len(),
        args.steps,
        args.out.display()
    );
    Ok(())
}

fn expected_hash(path: &Path) -> Result<[u8; 32]> {
    let cfg = RunConfig::load(path)?;
    cfg.hash()
}

fn inspect(args: InspectArgs) -> Result<()> {
    let expected = args.config.as_deref().map(expected_hash).transpose()?;
    let ckpt = Checkpoint::load(&args.checkpoint, expected.as_ref(), args.force)?;
    println!("step        {}", ckpt.step);
    println!("kind        {}", ckpt.meta.kind);
    println!("seed        {}", ckpt.meta.seed);
    match ckpt.meta.loss {
        Some(l) => println!("loss        {l}"),
        None => println!("loss        -"),
    }
    println!("config hash {}", hex::encode(ckpt.config_hash));
    let mut total = 0;
    for (name, t) in &ckpt.tensors {
        println!("  {name:<48} {:?}", t.shape());
        total += t.numel();
    }
    println!("{} tensors, {} values", ckpt.tensors.len(), total);
    if ckpt.meta.kind == "adapters" {
        let model = run::restore_attached(&ckpt)?;
        println!("adapter parameters {}", model.param_count());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CountParams(a) => count(a),
        Command::Train(a) => train(a),
        Command::Distill(a) => distill(a),
        Command::ExportRouter(a) => export(a),
        Command::InspectCheckpoint(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
