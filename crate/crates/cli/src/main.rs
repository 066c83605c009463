use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use udcvr_cli::*;
use udcvr_core::metrics::format_db;
use udcvr_core::RunConfig;
use udcvr_net::TrainOptions;

/// Under-display-camera video restoration pipeline.
#[derive(Parser)]
#[command(name = "udcvr", version)]
struct Cli {
    /// Root directory for every output (and default inputs).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted overrides, e.g. `train.total_iters=10`.
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides)?,
            None => RunConfig::from_toml_str("", &self.overrides)?,
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset under <out>/dataset.
    Synth(ConfigArgs),
    /// Train on a manifest; checkpoints and metrics go to <out>/train.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to <out>/dataset/manifest.json.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from <out>/train/checkpoints/latest.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Restore every manifest clip with a checkpoint into <out>/restored.
    Infer {
        /// Defaults to <out>/train/checkpoints/latest.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score restored clips (or the degraded inputs) against the references.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory of restored clips; defaults to <out>/restored.
        #[arg(long)]
        restored: Option<PathBuf>,
        /// Score the degraded inputs instead.
        #[arg(long, conflicts_with = "restored")]
        inputs: bool,
    },
    /// Write flare/haze soft masks of a frame file or clip directory.
    Mask {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        /// Downsampling factor applied before masking.
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Render a PSF (file or configured synthetic kernel) log-scaled.
    PsfViz {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        psf: Option<PathBuf>,
        /// Orders of magnitude shown below the peak.
        #[arg(long, default_value_t = 4.0)]
        decades: f64,
    },
    /// Synthesize, train 200 iterations, restore and evaluate two tiny clips.
    Smoke {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn or_default(p: &Option<PathBuf>, d: PathBuf) -> PathBuf {
    p.clone().unwrap_or(d)
}

fn run(cli: Cli) -> Result<()> {
    let out: &Path = &cli.out;
    match cli.cmd {
        Cmd::Synth(c) => {
            let m = run_synth(&c.load()?, out)?;
            println!("{} clips -> {}", m.clips.len(), manifest_path(out).display());
        }
        Cmd::Train { cfg, manifest, resume } => {
            let cfg = cfg.load()?;
            let s = run_train(
                &cfg,
                &or_default(&manifest, manifest_path(out)),
                out,
                &TrainOptions {
                    resume,
                    stop_after: None,
                },
            )?;
            if let Some(last) = s.last {
                println!("iter {} loss {:.6}", s.iter, last.loss.total);
            }
            if let Some(v) = s.val_psnr {
                println!("validation PSNR {} dB", format_db(v));
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Cmd::Infer { checkpoint, manifest } => {
            let (_, net) = load_model(&or_default(&checkpoint, latest_checkpoint(out)))?;
            let dest = out.join(RESTORED_DIR);
            let ids = run_infer(&net, &or_default(&manifest, manifest_path(out)), &dest)?;
            println!("{} clips -> {}", ids.len(), dest.display());
        }
        Cmd::Eval {
            cfg,
            manifest,
            restored,
            inputs,
        } => {
            let cfg = cfg.load()?;
            let manifest = or_default(&manifest, manifest_path(out));
            let hash = config_hash(&cfg);
            let report = if inputs {
                input_report(&manifest, cfg.eval.crop, &hash)?
            } else {
                run_eval(&or_default(&restored, out.join(RESTORED_DIR)), &manifest, cfg.eval.crop, &hash)?
            };
            report.write(&out.join(EVAL_DIR))?;
            println!(
                "mean PSNR {} dB, mean SSIM {:.4} over {} clips",
                format_db(report.mean_psnr),
                report.mean_ssim,
                report.clips.len()
            );
        }
        Cmd::Mask { cfg, input, scale } => {
            let files = run_mask(&cfg.load()?, &input, scale, &out.join("masks"))?;
            println!("{} mask images -> {}", files.len(), out.join("masks").display());
        }
        Cmd::PsfViz { cfg, psf, decades } => {
            let files = run_psf_viz(&cfg.load()?, psf.as_deref(), decades, &out.join("psf"))?;
            println!("{} images -> {}", files.len(), out.join("psf").display());
        }
        Cmd::Smoke { seed } => {
            let r = end_to_end_smoke(seed, out)?;
            println!(
                "input {} dB -> restored {} dB; report {}",
                format_db(r.input_psnr),
                format_db(r.restored_psnr),
                r.report_hash
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match config_key(&e) {
            Some(key) => {
                eprintln!("error: bad configuration key `{key}`: {e:#}");
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
