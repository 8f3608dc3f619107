use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use edgefill_core::canny::{CannyParams, DEFAULT_HIGH, DEFAULT_LOW};
use edgefill_core::Float;
use edgefill_cli::commands;
use edgefill_cli::run::prepare_run_dir;
use edgefill_cli::{exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "edgefill", version, about = "Edge-conditioned image inpainting")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// key = value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Applied after the file and INPAINT_* variables.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Completion network layout, e.g. "4(CM)-6(CM)-4(CM)".
    #[arg(long, global = true)]
    structure: Option<String>,
    #[arg(long, global = true, value_name = "BOOL")]
    use_edges: Option<String>,
    #[arg(long, global = true, value_name = "BOOL")]
    use_skip_links: Option<String>,
    /// mean or sum.
    #[arg(long, global = true)]
    sconv_norm: Option<String>,
    /// model or oracle.
    #[arg(long, global = true)]
    edge_source: Option<String>,
    #[arg(long, global = true)]
    fid_unsquared: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Canny sigma.
    #[arg(long, global = true)]
    sigma: Option<Float>,
}

#[derive(Args)]
struct RunDir {
    /// Write artifacts here instead of a fresh timestamped directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Parent of timestamped run directories.
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build a manifest and edge cache from a directory of images.
    Prepare {
        images: PathBuf,
        out: PathBuf,
    },
    /// Train the edge model.
    TrainEdge {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        dir: RunDir,
    },
    /// Train the completion model.
    TrainInpaint {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        edge_checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        dir: RunDir,
    },
    /// Repair one image given a hole mask (white = hole).
    Infer {
        #[arg(long)]
        edge_checkpoint: Option<PathBuf>,
        #[arg(long)]
        inpaint_checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw prediction and the predicted edge map.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Score a checkpoint pair on a split, the ground truth against itself,
    /// or an ablation grid.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        edge_checkpoint: Option<PathBuf>,
        #[arg(long)]
        inpaint_checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long, conflicts_with = "ablate")]
        reference: bool,
        /// Comma-separated axes out of edges, skip, cm.
        #[arg(long, value_name = "AXES")]
        ablate: Option<String>,
        /// Training steps per ablation variant.
        #[arg(long)]
        steps: Option<u64>,
        /// Write the composited images next to the report.
        #[arg(long)]
        save_images: bool,
        #[command(flatten)]
        dir: RunDir,
    },
    /// Generate irregular hole masks.
    GenMasks {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.25)]
        coverage: Float,
    },
    /// Canny edge map of one image.
    Canny {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LOW)]
        low: Float,
        #[arg(long, default_value_t = DEFAULT_HIGH)]
        high: Float,
    },
    /// Write procedural toy images.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Print the effective configuration.
    Config,
}

fn build_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    for kv in &g.set {
        cfg.apply_assignment(kv)?;
    }
    let flags = [
        ("structure", g.structure.clone()),
        ("use_edges", g.use_edges.clone()),
        ("use_skip_links", g.use_skip_links.clone()),
        ("sconv_norm", g.sconv_norm.clone()),
        ("edge_source", g.edge_source.clone()),
        ("seed", g.seed.map(|s| s.to_string())),
        ("canny_sigma", g.sigma.map(|s| s.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if g.fid_unsquared {
        cfg.fid_unsquared = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint(flag: Option<PathBuf>, key: &str, what: &str) -> Result<PathBuf> {
    flag.or_else(|| (!key.is_empty()).then(|| PathBuf::from(key))).ok_or_else(|| {
        edgefill_core::Error::Config(format!("missing --{what}-checkpoint (or {what}_checkpoint in the config)")).into()
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = build_config(&cli.global)?;
    match cli.command {
        Command::Prepare { images, out } => {
            let p = commands::prepare(&images, &out, &cfg)?;
            println!("manifest: {}", p.manifest.display());
            println!("train: {}  test: {}", p.train, p.test);
        }
        Command::TrainEdge {
            manifest,
            steps,
            resume,
            dir,
        } => {
            if let Some(s) = steps {
                cfg.edge_steps = s;
            }
            let run_dir = prepare_run_dir(dir.run_dir.as_deref(), &dir.runs_root, &cfg)?;
            let t = commands::train_edge(&cfg, &manifest, &run_dir, resume.as_deref())?;
            println!("run dir: {}", run_dir.display());
            println!("checkpoint: {} (step {})", t.checkpoint.display(), t.steps);
        }
        Command::TrainInpaint {
            manifest,
            edge_checkpoint,
            steps,
            resume,
            dir,
        } => {
            if let Some(s) = steps {
                cfg.inpaint_steps = s;
            }
            let run_dir = prepare_run_dir(dir.run_dir.as_deref(), &dir.runs_root, &cfg)?;
            let t = commands::train_inpaint(&cfg, &manifest, &run_dir, edge_checkpoint.as_deref(), resume.as_deref())?;
            println!("run dir: {}", run_dir.display());
            println!("checkpoint: {} (step {})", t.checkpoint.display(), t.steps);
        }
        Command::Infer {
            edge_checkpoint,
            inpaint_checkpoint,
            image,
            mask,
            out,
            dump_intermediates,
        } => {
            let inpaint = checkpoint(inpaint_checkpoint, &cfg.inpaint_checkpoint, "inpaint")?;
            let done = commands::infer(&cfg, edge_checkpoint.as_deref(), &inpaint, &image, &mask, &out, dump_intermediates)?;
            println!("wrote {}", done.output.display());
            for p in [done.raw, done.edges].into_iter().flatten() {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval {
            manifest,
            split,
            edge_checkpoint,
            inpaint_checkpoint,
            reference,
            ablate,
            steps,
            save_images,
            dir,
        } => {
            let split = commands::parse_split(&split)?;
            if let Some(s) = steps {
                cfg.inpaint_steps = s;
            }
            let run_dir = prepare_run_dir(dir.run_dir.as_deref(), &dir.runs_root, &cfg)?;
            if let Some(axes) = ablate {
                let axes = commands::parse_axes(&axes)?;
                commands::ablate(&cfg, &manifest, &axes, edge_checkpoint.as_deref(), &run_dir)?;
                print!("{}", std::fs::read_to_string(run_dir.join(edgefill_cli::report::ABLATION_TXT))?);
            } else {
                if reference {
                    commands::eval_reference(&cfg, &manifest, split, &run_dir)?;
                } else {
                    let inpaint = checkpoint(inpaint_checkpoint, &cfg.inpaint_checkpoint, "inpaint")?;
                    commands::eval(&cfg, &manifest, split, edge_checkpoint.as_deref(), &inpaint, &run_dir, save_images)?;
                }
                print!("{}", std::fs::read_to_string(run_dir.join(edgefill_cli::report::METRICS_TXT))?);
            }
            println!("run dir: {}", run_dir.display());
        }
        Command::GenMasks { out, count, size, coverage } => {
            let fr = commands::gen_masks(&out, count, size, coverage, cfg.seed)?;
            let mean = fr.iter().sum::<Float>() / fr.len().max(1) as Float;
            println!("wrote {} masks to {} (mean hole fraction {mean:.3})", fr.len(), out.display());
        }
        Command::Canny { image, out, low, high } => {
            let params = CannyParams {
                sigma: cfg.canny_sigma,
                low,
                high,
            };
            let e = commands::canny_file(&image, &out, &params)?;
            println!("wrote {} ({:.2}% edge pixels)", out.display(), 100.0 * e.fraction());
        }
        Command::ToyData { out, count, size } => {
            let files = commands::toy_data(&out, count, size, cfg.seed)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
