//! Run configuration schema.
//!
//! A run is described by one TOML file. Every key has a default, so an empty
//! file is a valid config. Unknown keys are rejected, and command-line
//! overrides (`section.key=value`) are type-checked against the schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stochastic choice derives from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub mask: MaskConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            mask: MaskConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowChoice {
    /// Exact motion recorded by the synthesizer.
    KnownMotion,
    ZeroFlow,
    /// Small coarse-to-fine network trained jointly with the restorer.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scales: Vec<usize>,
    pub channels: Vec<usize>,
    pub n_resblocks: usize,
    /// Supervise the per-scale intermediate frames.
    pub enable_sup: bool,
    /// Short-term haze removal branch.
    pub enable_shr: bool,
    /// Long-term flare removal branch.
    pub enable_lfr: bool,
    /// Flare/haze mask gating; when off both masks are constant 1.
    pub enable_smg: bool,
    pub flow: FlowChoice,
    /// Base width of the learned flow estimator.
    pub flow_width: usize,
    /// Pyramid levels of the learned flow estimator.
    pub flow_levels: usize,
    pub global_residual: bool,
    /// Zero-initialize the reconstruction head (identity restorer at init).
    pub zero_init_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: vec![2, 4, 8],
            channels: vec![48, 60, 72],
            n_resblocks: 5,
            enable_sup: true,
            enable_shr: true,
            enable_lfr: true,
            enable_smg: true,
            flow: FlowChoice::KnownMotion,
            flow_width: 32,
            flow_levels: 4,
            global_residual: true,
            zero_init_head: true,
        }
    }
}

impl ModelConfig {
    /// Full-size network with a learned motion estimator in place of known
    /// motion.
    pub fn full_size() -> Self {
        ModelConfig {
            flow: FlowChoice::Learned,
            ..ModelConfig::default()
        }
    }

    /// Side length every frame must be a multiple of.
    pub fn alignment(&self) -> usize {
        let s = self.scales.iter().copied().max().unwrap_or(1);
        if self.flow == FlowChoice::Learned {
            s.max(1 << (self.flow_levels.saturating_sub(1)))
        } else {
            s
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(CoreError::config("model.scales", "at least one scale is required"));
        }
        if self.scales.len() != self.channels.len() {
            return Err(CoreError::config(
                "model.channels",
                format!(
                    "{} channel widths for {} scales",
                    self.channels.len(),
                    self.scales.len()
                ),
            ));
        }
        for (i, &s) in self.scales.iter().enumerate() {
            if s < 2 || !s.is_power_of_two() {
                return Err(CoreError::config(
                    "model.scales",
                    format!("scale {s} must be a power of two >= 2"),
                ));
            }
            if i > 0 && s <= self.scales[i - 1] {
                return Err(CoreError::config("model.scales", "scales must be strictly increasing"));
            }
        }
        if self.channels.contains(&0) {
            return Err(CoreError::config("model.channels", "widths must be positive"));
        }
        if self.n_resblocks == 0 {
            return Err(CoreError::config("model.n_resblocks", "must be >= 1"));
        }
        if self.flow == FlowChoice::Learned {
            if self.flow_width < 2 {
                return Err(CoreError::config("model.flow_width", "must be >= 2"));
            }
            if self.flow_levels == 0 {
                return Err(CoreError::config("model.flow_levels", "must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Cosine annealing from the base rate to 0 over `total_iters`.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            hflip: true,
            vflip: true,
            rot90: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_flow: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub schedule: Schedule,
    pub total_iters: u64,
    /// Iterations during which the flow estimator stays frozen.
    pub flow_freeze_iters: u64,
    pub batch: usize,
    pub patch: usize,
    pub seq_len: usize,
    pub eps_charb: f64,
    pub sup_weight: f64,
    pub aug: AugConfig,
    pub ckpt_every: u64,
    /// Validation PSNR cadence; 0 disables periodic validation.
    pub val_every: u64,
    /// Number of manifest clips used for validation PSNR.
    pub val_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_main: 1e-4,
            lr_flow: 1.25e-5,
            betas: [0.9, 0.99],
            adam_eps: 1e-8,
            schedule: Schedule::Cosine,
            total_iters: 20_000,
            // 5K of 400K iterations, scaled to the 20K desk run.
            flow_freeze_iters: 250,
            batch: 2,
            patch: 64,
            seq_len: 6,
            eps_charb: 1e-3,
            sup_weight: 1.0,
            aug: AugConfig::default(),
            ckpt_every: 1000,
            val_every: 1000,
            val_clips: 2,
        }
    }
}

impl TrainConfig {
    pub fn full_size() -> Self {
        TrainConfig {
            total_iters: 400_000,
            flow_freeze_iters: 5_000,
            batch: 8,
            patch: 256,
            seq_len: 30,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr_main", self.lr_main),
            ("train.lr_flow", self.lr_flow),
            ("train.adam_eps", self.adam_eps),
            ("train.eps_charb", self.eps_charb),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CoreError::config(key, format!("must be positive, got {v}")));
            }
        }
        if !(self.sup_weight.is_finite() && self.sup_weight >= 0.0) {
            return Err(CoreError::config("train.sup_weight", "must be >= 0"));
        }
        for b in self.betas {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::config("train.betas", "each beta must lie in [0, 1)"));
            }
        }
        let counts = [
            ("train.total_iters", self.total_iters as usize),
            ("train.batch", self.batch),
            ("train.patch", self.patch),
            ("train.seq_len", self.seq_len),
            ("train.ckpt_every", self.ckpt_every as usize),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(CoreError::config(key, "must be positive"));
            }
        }
        if self.flow_freeze_iters > self.total_iters {
            return Err(CoreError::config(
                "train.flow_freeze_iters",
                "must not exceed train.total_iters",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToneMap {
    Linear,
    /// `v^(1/2.2)` after clamping.
    #[serde(rename = "gamma-2.2")]
    Gamma22,
}

impl ToneMap {
    pub fn apply(self, v: f32) -> f32 {
        match self {
            ToneMap::Linear => v,
            ToneMap::Gamma22 => v.max(0.0).powf(1.0 / 2.2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsfKind {
    Gaussian,
    DiffractionLike,
    /// Loaded from `synth.psf.path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsfConfig {
    pub kind: PsfKind,
    /// Odd kernel side length.
    pub size: usize,
    /// Gaussian standard deviation (px).
    pub sigma: f64,
    /// Sidelobe spacing of the diffraction-like kernel (px).
    pub period: f64,
    /// Width of the sinc envelope (px).
    pub envelope: f64,
    /// Sharpness of the periodic comb (number of coherent apertures).
    pub order: usize,
    /// Relative weight of a broad haze halo added around the core.
    pub halo: f64,
    pub path: String,
    /// Number of PSF channels (1 or 3).
    pub channels: usize,
    /// Per-channel scale of the pattern; longer wavelengths diffract wider.
    pub channel_spread: [f64; 3],
}

impl Default for PsfConfig {
    fn default() -> Self {
        PsfConfig {
            kind: PsfKind::DiffractionLike,
            size: 31,
            sigma: 1.0,
            period: 6.0,
            envelope: 9.0,
            order: 3,
            halo: 0.3,
            path: String::new(),
            channels: 3,
            channel_spread: [1.1, 1.0, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionParams {
    /// Bound on each per-frame translation component (px).
    pub max_translation: f64,
    /// Bound on the per-frame rotation (rad).
    pub max_rotation: f64,
    /// Bound on each projective coefficient of the per-frame transform.
    pub max_perspective: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            max_translation: 2.0,
            max_rotation: 0.02,
            max_perspective: 1e-4,
        }
    }
}

impl MotionParams {
    pub fn still() -> Self {
        MotionParams {
            max_translation: 0.0,
            max_rotation: 0.0,
            max_perspective: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Rendered HDR scenes that move with the sampled camera motion.
    Procedural,
    /// Every subdirectory of `synth.source_dir` is one clean clip.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub source: SourceKind,
    pub source_dir: String,
    /// Procedural clip count.
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Intensity scaling, sampled uniformly per clip.
    pub gamma_range: [f64; 2],
    /// Additive noise std, sampled uniformly per clip.
    pub noise_sigma_range: [f64; 2],
    pub clamp_hi: f64,
    pub tone_map: ToneMap,
    /// Per-clip brightness gain, sampled log-uniformly.
    pub brightness_gain_range: [f64; 2],
    pub psf: PsfConfig,
    pub motion: MotionParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            source: SourceKind::Procedural,
            source_dir: String::new(),
            clips: 8,
            frames: 8,
            height: 64,
            width: 64,
            gamma_range: [0.8, 1.2],
            noise_sigma_range: [0.0, 0.01],
            clamp_hi: 1.0,
            tone_map: ToneMap::Linear,
            brightness_gain_range: [1.0, 8.0],
            psf: PsfConfig::default(),
            motion: MotionParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |key: &str, r: [f64; 2], lo_min: f64| {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < lo_min {
                Err(CoreError::config(
                    key,
                    format!("need {lo_min} <= lo <= hi, got {r:?}"),
                ))
            } else {
                Ok(())
            }
        };
        ordered("synth.gamma_range", self.gamma_range, f64::MIN_POSITIVE)?;
        ordered("synth.noise_sigma_range", self.noise_sigma_range, 0.0)?;
        ordered("synth.brightness_gain_range", self.brightness_gain_range, 1.0)?;
        if !(self.clamp_hi.is_finite() && self.clamp_hi > 0.0 && self.clamp_hi <= 1.0) {
            return Err(CoreError::config("synth.clamp_hi", "must lie in (0, 1]"));
        }
        if self.frames == 0 {
            return Err(CoreError::config("synth.frames", "must be >= 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(CoreError::config("synth.height", "frame size must be positive"));
        }
        if self.source == SourceKind::Directory && self.source_dir.is_empty() {
            return Err(CoreError::config("synth.source_dir", "required for directory sources"));
        }
        let p = &self.psf;
        if p.size % 2 == 0 || p.size == 0 {
            return Err(CoreError::config("synth.psf.size", "kernel size must be odd"));
        }
        if p.channels != 1 && p.channels != 3 {
            return Err(CoreError::config("synth.psf.channels", "must be 1 or 3"));
        }
        if p.kind == PsfKind::File && p.path.is_empty() {
            return Err(CoreError::config("synth.psf.path", "required for file kernels"));
        }
        let m = &self.motion;
        for (key, v) in [
            ("synth.motion.max_translation", m.max_translation),
            ("synth.motion.max_rotation", m.max_rotation),
            ("synth.motion.max_perspective", m.max_perspective),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::config(key, "must be a finite bound >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub tau: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { tau: 0.9 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CoreError::config("mask.tau", format!("must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pixels trimmed from every border before scoring.
    pub crop: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { crop: 0 }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.mask.validate()
    }

    /// Parses TOML text, applies dotted overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CoreError::config(first_key_of(&e), e.message().to_string()))?;
        let schema = schema_table();
        check_known_keys(&user, &schema, "")?;
        let mut merged = schema.clone();
        merge_into(&mut merged, user);
        for ov in overrides {
            apply_override(&mut merged, &schema, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::config(first_key_of(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn first_key_of(e: &toml::de::Error) -> String {
    // toml reports the offending field in its message; fall back to the span-less text.
    let msg = e.message();
    for quote in ['`', '"'] {
        if let Some(start) = msg.find(quote) {
            if let Some(len) = msg[start + 1..].find(quote) {
                return msg[start + 1..start + 1 + len].to_string();
            }
        }
    }
    "<config>".into()
}

fn schema_table() -> toml::Table {
    match toml::Value::try_from(RunConfig::default()).expect("defaults serialize") {
        toml::Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

fn check_known_keys(user: &toml::Table, schema: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match schema.get(k) {
            None => return Err(CoreError::config(key, "unknown key")),
            Some(toml::Value::Table(sub)) => match v {
                toml::Value::Table(usub) => check_known_keys(usub, sub, &key)?,
                _ => return Err(CoreError::config(key, "expected a table")),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

fn merge_into(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge_into(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn same_kind(schema: &toml::Value, v: &toml::Value) -> bool {
    use toml::Value::*;
    matches!(
        (schema, v),
        (String(_), String(_))
            | (Integer(_), Integer(_))
            | (Float(_), Float(_))
            | (Float(_), Integer(_))
            | (Boolean(_), Boolean(_))
            | (Array(_), Array(_))
    )
}

fn apply_override(merged: &mut toml::Table, schema: &toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| CoreError::config(ov, "override must look like section.key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let mut schema_node = schema;
    let mut node = merged;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let expected = schema_node
            .get(*part)
            .ok_or_else(|| CoreError::config(key, "unknown key"))?;
        if last {
            if expected.is_table() {
                return Err(CoreError::config(key, "cannot override a whole section"));
            }
            let parsed = parse_override_value(raw, expected);
            if !same_kind(expected, &parsed) {
                return Err(CoreError::config(
                    key,
                    format!("expected {}, got {raw:?}", expected.type_str()),
                ));
            }
            let parsed = match (expected, parsed) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, p) => p,
            };
            node.insert(part.to_string(), parsed);
            return Ok(());
        }
        schema_node = expected
            .as_table()
            .ok_or_else(|| CoreError::config(key, "unknown key"))?;
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CoreError::config(key, "expected a table"))?;
    }
    Ok(())
}

fn parse_override_value(raw: &str, expected: &toml::Value) -> toml::Value {
    if let Ok(t) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            // A bare word parsed as something else is still a string when the slot wants one.
            if expected.is_str() && !v.is_str() {
                return toml::Value::String(raw.to_string());
            }
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
