use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqprecode::channel::build_dataset;
use vqprecode::harness::{
    checkpoint_path, eval_constellations, evaluate_method, load_checkpoint_for, load_or_build_dataset, parse_csv,
    plot_svg, pretrain_checkpoint_path, run_sweep, summarize, to_csv, write_manifest, ExperimentConfig, Method,
    SweepAxis, SweepRow, Variant,
};
use vqprecode::training::{finetune, noise_var_from_snr_db, pretrain};
use vqprecode::{Error, Result};

#[derive(Parser)]
#[command(name = "vqprecode", version, about = "Learned pilots, VQ feedback and GNN precoding for FDD MU-MIMO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file applied on top of the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (checkpoints go to `<out>/checkpoints` unless configured).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Start from the full-scale defaults instead of the desk-scale ones.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Override one configuration key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the channel dataset.
    GenerateData,
    /// Pre-train the model behind a learned method.
    Pretrain {
        #[arg(long)]
        method: String,
        /// Where to write the pre-trained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint end to end.
    Finetune {
        #[arg(long)]
        method: String,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate methods at the configured operating point.
    Evaluate {
        /// Method name; repeatable or comma separated. Defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        method: Vec<String>,
        /// Checkpoint for the (single) learned method being evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate every method along one axis and plot the result.
    Sweep {
        #[arg(long)]
        axis: String,
    },
    /// Render a sweep CSV as SVG.
    Plot { input: PathBuf },
}

fn exit_code(category: &str) -> u8 {
    match category {
        "unknown-flag" => 2,
        "unreadable-config" => 3,
        "fingerprint-mismatch" => 4,
        "missing-checkpoint" => 5,
        "malformed-input" => 6,
        "invalid-argument" => 7,
        "numerical" => 8,
        "not-implemented" => 9,
        "io" => 10,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let category = match e.kind() {
                ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand => "unknown-flag",
                _ => "invalid-argument",
            };
            eprint!("error[{category}]: {}", e.render());
            return ExitCode::from(exit_code(category));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = if common.paper_scale { ExperimentConfig::paper_scale() } else { ExperimentConfig::desk() };
    let default_ckpt = cfg.checkpoint_dir.clone();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set {kv:?}: expected key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
        if cfg.checkpoint_dir == default_ckpt {
            cfg.checkpoint_dir = out.join("checkpoints");
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn learned_variant(name: &str) -> Result<(Method, Variant)> {
    let m = Method::parse(name)?;
    let v = m
        .variant()
        .ok_or_else(|| Error::InvalidArgument(format!("{name} is not a learned method; nothing to train")))?;
    Ok((m, v))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::GenerateData => {
            let ds = build_dataset(&cfg.dataset_config())?;
            let path = out.join("dataset.bin");
            std::fs::create_dir_all(&out)?;
            ds.save(&path)?;
            println!("dataset: {} samples -> {}", ds.samples.len(), path.display());
            write_manifest(&out, "generate-data", &cfg, &[path])?;
        }
        Command::Pretrain { method, checkpoint } => {
            let (_, v) = learned_variant(&method)?;
            let ds = load_or_build_dataset(&cfg)?;
            let model = cfg.model_config(v.mode(), cfg.n_p, cfg.codebook_size);
            let (ckpt, report) = pretrain(&ds, model, v.pilot_kind(), &cfg.train_config())?;
            for (e, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {}: loss {l:.6}", e + 1);
            }
            let path = checkpoint
                .unwrap_or_else(|| pretrain_checkpoint_path(&cfg.checkpoint_dir, v, cfg.n_p, cfg.codebook_size));
            write(&path, ckpt.to_bytes())?;
            println!("checkpoint -> {}", path.display());
            write_manifest(&out, "pretrain", &cfg, &[path])?;
        }
        Command::Finetune { method, checkpoint } => {
            let (_, v) = learned_variant(&method)?;
            let ds = load_or_build_dataset(&cfg)?;
            let src = checkpoint
                .unwrap_or_else(|| pretrain_checkpoint_path(&cfg.checkpoint_dir, v, cfg.n_p, cfg.codebook_size));
            let pre = load_checkpoint_for(&cfg, &src, v, cfg.n_p, cfg.codebook_size)?;
            let model = cfg.model_config(v.mode(), cfg.n_p, cfg.codebook_size);
            let (fine, report) = finetune(&pre, &model, &ds, &cfg.train_config())?;
            for (e, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {}: loss {l:.6}", e + 1);
            }
            let path = checkpoint_path(&cfg.checkpoint_dir, v, cfg.n_p, cfg.codebook_size);
            write(&path, fine.to_bytes())?;
            println!("checkpoint -> {}", path.display());
            write_manifest(&out, "finetune", &cfg, &[path])?;
        }
        Command::Evaluate { method, checkpoint } => {
            let methods = if method.is_empty() {
                cfg.methods.clone()
            } else {
                method.iter().map(|m| Method::parse(m.trim())).collect::<Result<Vec<_>>>()?
            };
            if checkpoint.is_some() && methods.iter().filter(|m| m.variant().is_some()).count() != 1 {
                return Err(Error::InvalidArgument("--checkpoint needs exactly one learned method".into()));
            }
            let ds = load_or_build_dataset(&cfg)?;
            let constellations = eval_constellations(&cfg, &ds, cfg.j, noise_var_from_snr_db(cfg.snr_db))?;
            let mut rows = Vec::new();
            for m in methods {
                let ckpt = match m.variant() {
                    Some(v) => {
                        let path = checkpoint
                            .clone()
                            .unwrap_or_else(|| checkpoint_path(&cfg.checkpoint_dir, v, cfg.n_p, cfg.codebook_size));
                        Some(load_checkpoint_for(&cfg, &path, v, cfg.n_p, cfg.codebook_size)?)
                    }
                    None => None,
                };
                let rates = evaluate_method(m, ckpt.as_ref(), &ds, &constellations, &cfg)?;
                let (mean, se) = summarize(&rates);
                println!("{:<22} {mean:.4} ± {se:.4}", m.name());
                rows.push(SweepRow {
                    sweep_var: "J".into(),
                    value: cfg.j as f64,
                    method: m.name().into(),
                    mean_sum_rate: mean,
                    std_err: se,
                    n_constellations: rates.len(),
                    seed: cfg.seed,
                });
            }
            let path = out.join("evaluate.csv");
            write(&path, to_csv(&rows)?)?;
            write_manifest(&out, "evaluate", &cfg, &[path])?;
        }
        Command::Sweep { axis } => {
            let axis = SweepAxis::parse(&axis)?;
            let ds = load_or_build_dataset(&cfg)?;
            let result = run_sweep(axis, &cfg, &ds)?;
            let csv = out.join(format!("sweep_{}.csv", axis.name()));
            let svg = out.join(format!("sweep_{}.svg", axis.name()));
            write(&csv, to_csv(&result.rows)?)?;
            write(&svg, plot_svg(&result.rows)?)?;
            println!("{} rows -> {}, {}", result.rows.len(), csv.display(), svg.display());
            write_manifest(&out, &format!("sweep_{}", axis.name()), &cfg, &[csv, svg])?;
        }
        Command::Plot { input } => {
            let text = std::fs::read_to_string(&input)?;
            let rows = parse_csv(&text)?;
            let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
            let dir = match &cli.common.out {
                Some(d) => d.clone(),
                None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let svg = dir.join(format!("{stem}.svg"));
            write(&svg, plot_svg(&rows)?)?;
            println!("plot -> {}", svg.display());
            write_manifest(&dir, &format!("plot_{stem}"), &cfg, &[input, svg])?;
        }
    }
    Ok(())
}
