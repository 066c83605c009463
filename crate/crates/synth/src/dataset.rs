use std::fs;
use std::path::{Path, PathBuf};

use udcvr_core::geometry::Homography;
use udcvr_core::io::{load_clip, save_clip, write_flo, Encoding};
use udcvr_core::manifest::{write_homographies, ClipEntry, Manifest};
use udcvr_core::rng::seeded_rng;
use udcvr_core::config::SourceKind;
use udcvr_core::{CoreError, RunConfig};

use crate::degrade::{synthesize_clip, DegradeParams};
use crate::error::{Result, SynthError};
use crate::motion::sample_motion;
use crate::psf::{make_synthetic_psf, save_psf};
use crate::scene::{apply_motion, render_clip, Scene};

/// Where a clip's clean frames come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClipSource {
    /// Rendered from a random scene seeded by the clip id.
    Procedural { id: String },
    /// Linear frames on disk; scripted camera motion is imposed on top.
    Directory { id: String, path: PathBuf },
}

impl ClipSource {
    pub fn id(&self) -> &str {
        match self {
            ClipSource::Procedural { id } | ClipSource::Directory { id, .. } => id,
        }
    }
}

/// Enumerates the sources described by `cfg.synth`.
pub fn sources_from_config(cfg: &RunConfig) -> Result<Vec<ClipSource>> {
    match cfg.synth.source {
        SourceKind::Procedural => Ok((0..cfg.synth.clips)
            .map(|i| ClipSource::Procedural { id: format!("clip{i:04}") })
            .collect()),
        SourceKind::Directory => {
            let root = Path::new(&cfg.synth.source_dir);
            let mut dirs: Vec<PathBuf> = fs::read_dir(root)
                .map_err(|e| CoreError::io(root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            Ok(dirs
                .into_iter()
                .map(|path| ClipSource::Directory {
                    id: path.file_name().unwrap().to_string_lossy().into_owned(),
                    path,
                })
                .collect())
        }
    }
}

fn synth_one(src: &ClipSource, cfg: &RunConfig, out: &Path) -> Result<ClipEntry> {
    let s = &cfg.synth;
    let id = src.id();
    let mut rng_params = seeded_rng(cfg.seed, &format!("synth/params/{id}"));
    let mut rng_motion = seeded_rng(cfg.seed, &format!("synth/motion/{id}"));
    let mut rng_noise = seeded_rng(cfg.seed, &format!("synth/noise/{id}"));

    let source = match src {
        ClipSource::Procedural { .. } => None,
        ClipSource::Directory { path, .. } => {
            let clip = load_clip(path, None)?;
            let n = clip.len().min(s.frames);
            Some(clip.slice_frames(0, n)?)
        }
    };
    let (frames, (h, w)) = match &source {
        None => (s.frames, (s.height, s.width)),
        Some(c) => (c.len(), c.frame_dims()),
    };
    let script = sample_motion(&s.motion, frames, (h, w), &mut rng_motion);
    let cumulative = script.cumulative();
    let gt = match source {
        None => {
            let mut rng_scene = seeded_rng(cfg.seed, &format!("synth/scene/{id}"));
            let scene = Scene::random(h, w, &mut rng_scene);
            render_clip(&scene, h, w, &cumulative)?
        }
        Some(c) => apply_motion(&c, &cumulative)?,
    };
    let params = DegradeParams::sample(s, &mut rng_params);
    let k0 = make_synthetic_psf(&s.psf)?;
    let clip = synthesize_clip(&gt, &k0, &script, &params, &mut rng_noise)?;

    let rel = format!("clips/{id}");
    let dir = out.join(&rel);
    save_clip(&clip.clean, &dir.join("clean"), Encoding::Float)?;
    save_clip(&clip.degraded, &dir.join("degraded"), Encoding::Int16)?;
    let mut psf_files = Vec::with_capacity(frames);
    let mut flow_files = Vec::with_capacity(frames);
    fs::create_dir_all(dir.join("flow")).map_err(|e| CoreError::io(&dir, e))?;
    for (t, (k, f)) in clip.psfs.iter().zip(&clip.flows).enumerate() {
        let psf_rel = format!("{rel}/psf/{t:06}.psf");
        let flow_rel = format!("{rel}/flow/{t:06}.flo");
        save_psf(k, &out.join(&psf_rel))?;
        write_flo(&out.join(&flow_rel), f)?;
        psf_files.push(psf_rel);
        flow_files.push(flow_rel);
    }
    let mut hs = vec![Homography::identity()];
    hs.extend(script.homographies.iter().cloned());
    let hom_rel = format!("{rel}/homographies.txt");
    write_homographies(&out.join(&hom_rel), &hs)?;

    Ok(ClipEntry {
        id: id.to_string(),
        frames,
        height: h,
        width: w,
        clean: format!("{rel}/clean"),
        degraded: format!("{rel}/degraded"),
        psf: psf_files,
        homographies: hom_rel,
        flow: flow_files,
        gain: params.gain,
        gamma: params.gamma,
        noise_sigma: params.noise_sigma,
    })
}

/// Synthesizes every source under `out` and writes `out/manifest.json`.
/// Each clip draws from its own random streams keyed by `(seed, clip id)`,
/// so the result does not depend on clip order or parallelism.
pub fn generate_dataset(sources: &[ClipSource], cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.synth.validate()?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let mut manifest = Manifest::new(cfg.seed, cfg.synth.clone());
    for src in sources {
        let entry = synth_one(src, cfg, out).map_err(|e| e.in_clip(src.id()))?;
        manifest.clips.push(entry);
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

impl From<SynthError> for CoreError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Core(c) => c,
            other => CoreError::Invalid(other.to_string()),
        }
    }
}
