use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use motion_evolve::data::{load_frames, save_frames, ClipDataset, DatasetConfig, VideoClip};
use motion_evolve::harness::{
    animate, reconstruct, run_ablations, run_reference_sweep, train_with, Checkpoint, EvalOptions, TrainConfig,
};
use motion_evolve::metrics::{evaluate, EvaluationSetup, Metric, MetricReport, RandomProjectionEmbedder};
use motion_evolve::losses::RandomConvPyramid;

#[derive(Parser)]
#[command(name = "motion-evolve", version, about = "Keypoint-driven motion transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sprite dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML dataset config; defaults to 20 train / 5 test identities at 64x64.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from scratch and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the loss curve as JSON.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Rebuild a clip from its first frame.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long, default_value_t = 3)]
        refs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer the motion of one clip onto the first frame of another.
    Animate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source_clip: PathBuf,
        #[arg(long)]
        driving_clip: PathBuf,
        #[arg(long, default_value_t = 3)]
        refs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two frame directories.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        real: PathBuf,
        /// Comma-separated metric names.
        #[arg(long, value_delimiter = ',', default_value = "l1,psnr,ssim,ms_ssim,fid,csim,random_feature_distance")]
        metrics: Vec<Metric>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the four ablation presets.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_clips: Option<usize>,
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Evaluate a checkpoint at several reference counts.
    SweepRefs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        n: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_clips: Option<usize>,
        #[arg(long)]
        max_frames: Option<usize>,
    },
}

fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("report.json");
    fs::write(&path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_report(report: &MetricReport) {
    for r in &report.records {
        println!("{:<24} {} {:.6}", r.name.to_string(), r.direction.arrow(), r.value);
    }
    for n in &report.notes {
        println!("note: {n}");
    }
}

fn write_json(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData { out, seed, config } => {
            let cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => DatasetConfig::default(),
            };
            let ds = ClipDataset::generate(seed, &cfg)?;
            ds.save(&out)?;
            println!("wrote {} identities to {}", ds.identities.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            losses,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = ClipDataset::load(&data)?;
            let every = (cfg.iterations / 50).max(1);
            let result = train_with(&ds, &cfg, |s| {
                if s.iteration == 1 || s.iteration % every == 0 {
                    eprintln!(
                        "iter {:>5}  total {:.5}  perceptual {:.5}  equivariance {:.5}",
                        s.iteration, s.total, s.perceptual, s.equivariance
                    );
                }
            })?;
            result.checkpoint.save(&out)?;
            if let Some(p) = losses {
                let text = serde_json::to_string_pretty(&result.losses)?;
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("saved checkpoint after {} iterations to {}", result.checkpoint.iteration, out.display());
        }
        Command::Reconstruct { ckpt, clip, refs, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let clip = load_frames(&clip)?;
            let opts = EvalOptions {
                seed: ckpt.config.seed,
                ..EvalOptions::default()
            };
            let g = reconstruct(&ckpt, &clip, refs, &opts, None)?;
            save_frames(&VideoClip::new(g.frames)?, &out)?;
            write_report(&g.report, &out)?;
            print_report(&g.report);
        }
        Command::Animate {
            ckpt,
            source_clip,
            driving_clip,
            refs,
            out,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let src = load_frames(&source_clip)?;
            let drv = load_frames(&driving_clip)?;
            let opts = EvalOptions {
                seed: ckpt.config.seed,
                ..EvalOptions::default()
            };
            let g = animate(&ckpt, &src, &drv, refs, &opts, None)?;
            save_frames(&VideoClip::new(g.frames)?, &out)?;
            write_report(&g.report, &out)?;
            print_report(&g.report);
        }
        Command::Evaluate {
            gen,
            real,
            metrics,
            out,
        } => {
            let g = load_frames(&gen)?;
            let r = load_frames(&real)?;
            if g.len() != r.len() {
                bail!("{} has {} frames, {} has {}", gen.display(), g.len(), real.display(), r.len());
            }
            let embedder = RandomProjectionEmbedder::default();
            let fx = RandomConvPyramid::default();
            let setup = EvaluationSetup {
                metrics: &metrics,
                embedder: &embedder,
                features: &fx,
                oracle: None,
            };
            let mut report = MetricReport::new(real.display().to_string(), gen.display().to_string());
            evaluate(g.frames(), r.frames(), r.frames(), &setup, &mut report)?;
            print_report(&report);
            if let Some(p) = out {
                fs::write(&p, report.to_json()?).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Ablate {
            config,
            data,
            out,
            max_clips,
            max_frames,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = ClipDataset::load(&data)?;
            let opts = EvalOptions {
                seed: cfg.seed,
                max_clips,
                max_frames,
                ..EvalOptions::default()
            };
            let table = run_ablations(&ds, &cfg, &opts)?;
            print!("{}", table.to_markdown());
            fs::write(&out, table.to_json()?).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::SweepRefs {
            ckpt,
            data,
            n,
            out,
            max_clips,
            max_frames,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = ClipDataset::load(&data)?;
            let opts = EvalOptions {
                seed: ckpt.config.seed,
                max_clips,
                max_frames,
                ..EvalOptions::default()
            };
            let reports = run_reference_sweep(&ds, &ckpt, &n, &opts)?;
            for (k, r) in &reports {
                println!("N = {k}");
                print_report(r);
            }
            let text = serde_json::to_string_pretty(&reports.iter().map(|(_, r)| r).collect::<Vec<_>>())?;
            write_json(&text, out.as_deref())?;
        }
    }
    Ok(())
}
