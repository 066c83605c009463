//! Pipeline stages behind the `udcvr` command: dataset synthesis, training,
//! inference, evaluation, mask and PSF visualisation, and an end-to-end
//! smoke run. Outputs are laid out under one output root:
//!
//! ```text
//! <out>/dataset/manifest.json      synth
//! <out>/train/metrics.csv          train
//! <out>/train/checkpoints/*.ckpt
//! <out>/restored/<clip id>/        infer
//! <out>/eval/report.{json,csv}     eval
//! <out>/masks/, <out>/psf/         mask, psf-viz
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use udcvr_core::config::{FlowChoice, RunConfig};
use udcvr_core::io::{load_clip, read_frame, save_clip, write_png_gray, Encoding};
use udcvr_core::manifest::{root_of, Manifest};
use udcvr_core::masks::mask_at_scale;
use udcvr_core::metrics::{evaluate, hex_digest, EvalReport};
use udcvr_core::{CoreError, FrameStack};
use udcvr_net::{load_checkpoint, train, D2RNet, MotionInput, NetError, TrainData, TrainOptions, TrainSummary};
use udcvr_synth::{display_reference, generate_dataset, load_psf, make_synthetic_psf, sources_from_config, Psf, SynthError};

pub const DATASET_DIR: &str = "dataset";
pub const TRAIN_DIR: &str = "train";
pub const RESTORED_DIR: &str = "restored";
pub const EVAL_DIR: &str = "eval";

pub fn manifest_path(out: &Path) -> PathBuf {
    out.join(DATASET_DIR).join("manifest.json")
}

pub fn latest_checkpoint(out: &Path) -> PathBuf {
    out.join(TRAIN_DIR).join("checkpoints").join("latest.ckpt")
}

/// Hash identifying a configuration in reports.
pub fn config_hash(cfg: &RunConfig) -> String {
    hex_digest(cfg.to_toml_string().as_bytes())[..16].to_string()
}

/// The config key behind an error, if it is a configuration error.
pub fn config_key(err: &anyhow::Error) -> Option<String> {
    let core = err.chain().find_map(|e| {
        if let Some(c) = e.downcast_ref::<CoreError>() {
            return Some(c);
        }
        match e.downcast_ref::<NetError>() {
            Some(NetError::Core(c)) => Some(c),
            Some(NetError::Synth(SynthError::Core(c))) => Some(c),
            _ => e.downcast_ref::<SynthError>().and_then(|s| match s {
                SynthError::Core(c) => Some(c),
                _ => None,
            }),
        }
    })?;
    match core {
        CoreError::Config { key, .. } => Some(key.clone()),
        _ => None,
    }
}

pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dir = out.join(DATASET_DIR);
    let sources = sources_from_config(cfg)?;
    Ok(generate_dataset(&sources, cfg, &dir)?)
}

pub fn run_train(cfg: &RunConfig, manifest: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let data = TrainData::from_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    Ok(train(cfg, data, &out.join(TRAIN_DIR), opts)?)
}

/// Rebuilds the network stored in a checkpoint.
pub fn load_model(checkpoint: &Path) -> Result<(RunConfig, D2RNet)> {
    let ck = load_checkpoint(checkpoint)?;
    let mut net = D2RNet::new(&ck.config.model, &ck.config.mask, ck.config.seed)?;
    ck.load_into(net.params_mut(), checkpoint)?;
    Ok((ck.config, net))
}

fn motion_for(net: &D2RNet, manifest: &Path, clip: &udcvr_core::manifest::ClipEntry) -> Result<MotionInput> {
    let root = root_of(manifest);
    let dims = (clip.height, clip.width);
    Ok(match net.config().flow {
        FlowChoice::KnownMotion => {
            let hs = clip.load_homographies(&root)?;
            MotionInput::from_homographies(&hs, dims)?
        }
        other => MotionInput::for_choice(other, None, dims)?,
    })
}

/// Restores every manifest clip into `dest/<clip id>/` as float frames.
pub fn run_infer(net: &D2RNet, manifest: &Path, dest: &Path) -> Result<Vec<String>> {
    let m = Manifest::load(manifest)?;
    let root = root_of(manifest);
    let mut ids = Vec::with_capacity(m.clips.len());
    for c in &m.clips {
        let degraded = c.load_degraded(&root)?;
        let restored = net
            .restore_clip(&degraded, &motion_for(net, manifest, c)?)
            .with_context(|| format!("restoring clip {}", c.id))?;
        save_clip(&restored.clip, &dest.join(&c.id), Encoding::Float)?;
        ids.push(c.id.clone());
    }
    Ok(ids)
}

/// Display-range references of every manifest clip.
pub fn references(manifest: &Path) -> Result<Vec<(String, FrameStack)>> {
    let m = Manifest::load(manifest)?;
    let root = root_of(manifest);
    m.clips
        .iter()
        .map(|c| {
            let clean = c.load_clean(&root)?;
            Ok((c.id.clone(), display_reference(&clean, m.synth.clamp_hi, m.synth.tone_map)))
        })
        .collect()
}

/// Scores restored clips found under `restored` against the manifest.
pub fn run_eval(restored: &Path, manifest: &Path, crop: usize, hash: &str) -> Result<EvalReport> {
    let refs = references(manifest)?;
    let mut outs = Vec::new();
    let entries = fs::read_dir(restored).with_context(|| format!("reading {}", restored.display()))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        let id = d.file_name().expect("dir name").to_string_lossy().into_owned();
        outs.push((id, load_clip(&d, None)?));
    }
    Ok(evaluate(&outs, &refs, crop, hash)?)
}

/// Scores the degraded inputs themselves, the baseline a restorer must beat.
pub fn input_report(manifest: &Path, crop: usize, hash: &str) -> Result<EvalReport> {
    let m = Manifest::load(manifest)?;
    let root = root_of(manifest);
    let inputs = m
        .clips
        .iter()
        .map(|c| Ok((c.id.clone(), c.load_degraded(&root)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&inputs, &references(manifest)?, crop, hash)?)
}

/// Writes flare/haze maps of a frame file, or of every frame of a clip
/// directory, as grayscale PNGs. Returns the written paths.
pub fn run_mask(cfg: &RunConfig, input: &Path, scale: usize, dest: &Path) -> Result<Vec<PathBuf>> {
    let frames: Vec<(String, ndarray::Array3<f32>)> = if input.is_dir() {
        let clip = load_clip(input, None)?;
        clip.frames()
            .enumerate()
            .map(|(t, f)| (format!("{t:06}"), f.to_owned()))
            .collect()
    } else {
        let (f, _) = read_frame(input)?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(stem, f)]
    };
    fs::create_dir_all(dest).with_context(|| format!("creating {}", dest.display()))?;
    let mut written = Vec::new();
    for (name, f) in frames {
        let m = mask_at_scale(f.view(), &cfg.mask, scale)?;
        for (kind, map) in [("flare", &m.flare), ("haze", &m.haze)] {
            let p = dest.join(format!("{name}_{kind}.png"));
            write_png_gray(&p, map)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Log-scaled view of a kernel: `decades` orders of magnitude below the
/// peak map to black, the peak to white.
pub fn log_view(k: ndarray::ArrayView2<'_, f64>, decades: f64) -> Array2<f32> {
    let peak = k.iter().cloned().fold(0.0, f64::max);
    k.mapv(|v| {
        if peak <= 0.0 || v <= 0.0 {
            return 0.0;
        }
        (((v / peak).log10() + decades) / decades).clamp(0.0, 1.0) as f32
    })
}

/// Renders each PSF channel log-scaled. The kernel comes from `psf_file`
/// if given, otherwise from the configured synthetic PSF.
pub fn run_psf_viz(cfg: &RunConfig, psf_file: Option<&Path>, decades: f64, dest: &Path) -> Result<Vec<PathBuf>> {
    if !(decades > 0.0) {
        bail!("--decades must be positive");
    }
    let psf: Psf = match psf_file {
        Some(p) => load_psf(p)?,
        None => make_synthetic_psf(&cfg.synth.psf)?,
    };
    fs::create_dir_all(dest).with_context(|| format!("creating {}", dest.display()))?;
    let mut written = Vec::new();
    for c in 0..psf.channels() {
        let p = dest.join(format!("psf_c{c}.png"));
        write_png_gray(&p, &log_view(psf.for_channel(c), decades))?;
        written.push(p);
    }
    Ok(written)
}

/// Tiny configuration for the end-to-end smoke run.
pub fn smoke_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.synth.clips = 2;
    cfg.synth.frames = 4;
    cfg.synth.height = 32;
    cfg.synth.width = 32;
    cfg.synth.psf.size = 15;
    cfg.model.channels = vec![12, 12, 12];
    cfg.model.n_resblocks = 1;
    cfg.train.total_iters = 200;
    cfg.train.flow_freeze_iters = 0;
    cfg.train.batch = 1;
    cfg.train.patch = 32;
    cfg.train.seq_len = 4;
    cfg.train.lr_main = 1e-3;
    cfg.train.ckpt_every = 100;
    cfg.train.val_every = 0;
    cfg.train.val_clips = 1;
    cfg
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SmokeReport {
    pub input_psnr: f64,
    pub restored_psnr: f64,
    pub input_ssim: f64,
    pub restored_ssim: f64,
    /// Digest of the restored-clip evaluation report.
    pub report_hash: String,
}

/// Synthesizes two tiny clips, trains briefly, restores and scores them.
/// Fails if restoration scores below the degraded input.
pub fn end_to_end_smoke(seed: u64, out: &Path) -> Result<SmokeReport> {
    let cfg = smoke_config(seed);
    run_synth(&cfg, out)?;
    let manifest = manifest_path(out);
    run_train(&cfg, &manifest, out, &TrainOptions::default())?;
    let (_, net) = load_model(&latest_checkpoint(out))?;
    run_infer(&net, &manifest, &out.join(RESTORED_DIR))?;
    let hash = config_hash(&cfg);
    let restored = run_eval(&out.join(RESTORED_DIR), &manifest, cfg.eval.crop, &hash)?;
    restored.write(&out.join(EVAL_DIR))?;
    let input = input_report(&manifest, cfg.eval.crop, &hash)?;
    let report = SmokeReport {
        input_psnr: input.mean_psnr,
        restored_psnr: restored.mean_psnr,
        input_ssim: input.mean_ssim,
        restored_ssim: restored.mean_ssim,
        report_hash: restored.digest(),
    };
    fs::write(
        out.join("smoke.json"),
        serde_json::to_string_pretty(&report).expect("json") + "\n",
    )
    .context("writing smoke.json")?;
    if !(report.restored_psnr >= report.input_psnr) {
        bail!(
            "restored PSNR {:.3} dB is below the input PSNR {:.3} dB",
            report.restored_psnr,
            report.input_psnr
        );
    }
    Ok(report)
}
