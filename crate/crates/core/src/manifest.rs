//! Dataset manifest: one JSON file listing every synthesized clip and the
//! files that make it up. Paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{CoreError, Result};
use crate::frame::FrameStack;
use crate::geometry::{FlowField, Homography};
use crate::io;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Directory of clean linear-HDR frames (brightness gain already applied).
    pub clean: String,
    /// Directory of degraded display frames.
    pub degraded: String,
    /// One kernel file per frame.
    pub psf: Vec<String>,
    /// Text file with one `H_{t-1 -> t}` per line; line 0 is the identity.
    pub homographies: String,
    /// One `.flo` per frame holding `H_{t-1 -> t}` as a displacement field on
    /// frame `t-1`; frame 0 stores zeros.
    pub flow: Vec<String>,
    pub gain: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub synth: SynthConfig,
    pub clips: Vec<ClipEntry>,
}

impl Manifest {
    pub fn new(seed: u64, synth: SynthConfig) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            seed,
            synth,
            clips: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
            }
        }
        fs::write(path, self.to_json()).map_err(|e| CoreError::io(path, e))
    }

    /// Reads and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| {
            CoreError::Manifest(format!("{}: {e}", path.display()))
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(CoreError::Manifest(format!(
                "{}: unsupported version {}",
                path.display(),
                m.version
            )));
        }
        m.validate(&root_of(path))?;
        Ok(m)
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        for c in &self.clips {
            let bad = |msg: String| Err(CoreError::Manifest(format!("clip {}: {msg}", c.id)));
            if c.psf.len() != c.frames || c.flow.len() != c.frames {
                return bad(format!(
                    "{} frames but {} kernels and {} flows",
                    c.frames,
                    c.psf.len(),
                    c.flow.len()
                ));
            }
            let mut files: Vec<&String> = c.psf.iter().chain(c.flow.iter()).collect();
            files.push(&c.homographies);
            for f in files {
                if !root.join(f).is_file() {
                    return bad(format!("missing file {f}"));
                }
            }
            for dir in [&c.clean, &c.degraded] {
                let meta = io::read_clip_meta(&root.join(dir))?;
                match meta {
                    None => return bad(format!("missing clip directory metadata in {dir}")),
                    Some(m) if m.frames != c.frames => {
                        return bad(format!("{dir} holds {} frames, expected {}", m.frames, c.frames))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

/// Directory that manifest-relative paths resolve against.
pub fn root_of(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

impl ClipEntry {
    pub fn load_clean(&self, root: &Path) -> Result<FrameStack> {
        io::load_clip(&root.join(&self.clean), None)
    }

    pub fn load_degraded(&self, root: &Path) -> Result<FrameStack> {
        io::load_clip(&root.join(&self.degraded), None)
    }

    pub fn load_homographies(&self, root: &Path) -> Result<Vec<Homography>> {
        let hs = read_homographies(&root.join(&self.homographies))?;
        if hs.len() != self.frames {
            return Err(CoreError::Manifest(format!(
                "clip {}: {} homographies for {} frames",
                self.id,
                hs.len(),
                self.frames
            )));
        }
        Ok(hs)
    }

    pub fn load_flows(&self, root: &Path) -> Result<Vec<FlowField>> {
        self.flow.iter().map(|f| io::read_flo(&root.join(f))).collect()
    }
}

pub fn write_homographies(path: &Path, hs: &[Homography]) -> Result<()> {
    let mut text = String::new();
    for h in hs {
        let row: Vec<String> = h.matrix().iter().flatten().map(|v| format!("{v:?}")).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn read_homographies(path: &Path) -> Result<Vec<Homography>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CoreError::format(path, format!("line {}: {e}", i + 1)))?;
            if vals.len() != 9 {
                return Err(CoreError::format(path, format!("line {}: expected 9 values", i + 1)));
            }
            Homography::new([
                [vals[0], vals[1], vals[2]],
                [vals[3], vals[4], vals[5]],
                [vals[6], vals[7], vals[8]],
            ])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homography_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.txt");
        let hs = vec![
            Homography::identity(),
            Homography::rotation_about(0.013, 31.5, 31.5).compose(&Homography::translation(0.1, 1.0 / 3.0)),
        ];
        write_homographies(&p, &hs).unwrap();
        assert_eq!(read_homographies(&p).unwrap(), hs);
    }

    #[test]
    fn empty_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let m = Manifest::new(7, SynthConfig::default());
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }

    #[test]
    fn corrupted_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        fs::write(&p, "{ not json").unwrap();
        let err = Manifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("manifest.json"), "{err}");
    }
}
