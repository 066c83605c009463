use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::Rng;
use udcvr_core::config::{FlowChoice, RunConfig, Schedule};
use udcvr_core::geometry::{FlowField, Homography};
use udcvr_core::manifest::{root_of, Manifest};
use udcvr_core::metrics::psnr;
use udcvr_core::rng::seeded_rng;
use udcvr_core::{Colorspace, CoreError, FrameStack};
use udcvr_synth::display_reference;
use udcvr_tensor::{Adam, Graph, Grads, ParamGroup};

use crate::augment::Augmentation;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{NetError, Result};
use crate::loss::{total_loss, LossBreakdown};
use crate::model::{stack_frames, D2RNet, MotionInput};

/// One training clip in display range, with optional recorded motion.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub id: String,
    pub degraded: Vec<Array3<f32>>,
    pub target: Vec<Array3<f32>>,
    /// `steps[t]` maps frame `t-1` onto frame `t`.
    pub steps: Option<Vec<Homography>>,
    fields: Option<(Vec<FlowField>, Vec<FlowField>)>,
}

impl TrainClip {
    pub fn new(id: &str, degraded: &FrameStack, target: &FrameStack, steps: Option<Vec<Homography>>) -> Result<Self> {
        if degraded.data().dim() != target.data().dim() {
            return Err(NetError::Invalid(format!("clip {id}: degraded and target shapes differ")));
        }
        let fields = match &steps {
            Some(hs) => {
                if hs.len() != degraded.len() {
                    return Err(NetError::Invalid(format!(
                        "clip {id}: {} homographies for {} frames",
                        hs.len(),
                        degraded.len()
                    )));
                }
                match MotionInput::from_homographies(hs, degraded.frame_dims())? {
                    MotionInput::Fields { to_prev, to_next } => Some((to_prev, to_next)),
                    _ => unreachable!(),
                }
            }
            None => None,
        };
        Ok(TrainClip {
            id: id.to_string(),
            degraded: degraded.frames().map(|f| f.to_owned()).collect(),
            target: target.frames().map(|f| f.to_owned()).collect(),
            steps,
            fields,
        })
    }

    pub fn len(&self) -> usize {
        self.degraded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degraded.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.degraded[0].dim();
        (h, w)
    }

    fn motion(&self, choice: FlowChoice) -> Result<MotionInput> {
        MotionInput::for_choice(choice, self.steps.as_deref(), self.dims())
    }
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub clips: Vec<TrainClip>,
}

impl TrainData {
    /// Loads every manifest clip; targets are the clean frames mapped to
    /// display range with the manifest's clamp and tone curve.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let root = root_of(path);
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for c in &manifest.clips {
            let clean = c.load_clean(&root)?;
            let target = display_reference(&clean, manifest.synth.clamp_hi, manifest.synth.tone_map);
            let degraded = c.load_degraded(&root)?;
            let steps = c.load_homographies(&root)?;
            clips.push(TrainClip::new(&c.id, &degraded, &target, Some(steps))?);
        }
        Ok(TrainData { clips })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Iterations completed, including this one.
    pub iter: u64,
    /// Averaged over the batch.
    pub loss: LossBreakdown,
    pub lr_main: f64,
    /// `None` while the flow group is frozen.
    pub lr_flow: Option<f64>,
}

struct Sample {
    label: String,
    degraded: Vec<Array3<f32>>,
    target: Vec<Array3<f32>>,
    motion: MotionInput,
}

pub struct Trainer {
    cfg: RunConfig,
    data: TrainData,
    model: D2RNet,
    adam: Adam,
    iter: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        if data.clips.is_empty() {
            return Err(NetError::Invalid("no training clips".into()));
        }
        let model = D2RNet::new(&cfg.model, &cfg.mask, cfg.seed)?;
        let t = &cfg.train;
        let a = model.alignment();
        if t.patch % a != 0 {
            return Err(CoreError::config("train.patch", format!("must be a multiple of {a}")).into());
        }
        for c in &data.clips {
            let (h, w) = c.dims();
            if h < t.patch || w < t.patch || c.len() < t.seq_len {
                return Err(NetError::Invalid(format!(
                    "clip {} ({} frames of {h}x{w}) is smaller than a {}-frame {}px sample",
                    c.id,
                    c.len(),
                    t.seq_len,
                    t.patch
                )));
            }
            if cfg.model.flow == FlowChoice::KnownMotion && c.steps.is_none() {
                return Err(NetError::Invalid(format!("clip {} has no recorded motion", c.id)));
            }
        }
        let adam = Adam::new(model.params(), t.betas[0] as f32, t.betas[1] as f32, t.adam_eps as f32);
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            model,
            adam,
            iter: 0,
        })
    }

    /// Continues from a checkpoint written by a run with the same model.
    pub fn resume(cfg: &RunConfig, data: TrainData, checkpoint: &Path) -> Result<Self> {
        let mut tr = Trainer::new(cfg, data)?;
        let ck = load_checkpoint(checkpoint)?;
        if ck.config.model != cfg.model || ck.config.seed != cfg.seed {
            return Err(NetError::Checkpoint {
                path: checkpoint.to_path_buf(),
                msg: "model configuration or seed differs from the current run".into(),
            });
        }
        ck.load_into(tr.model.params_mut(), checkpoint)?;
        if let Some(st) = ck.optimizer {
            tr.adam.set_state(st);
        }
        tr.iter = ck.iter;
        Ok(tr)
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn model(&self) -> &D2RNet {
        &self.model
    }

    pub fn into_model(self) -> D2RNet {
        self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn finished(&self) -> bool {
        self.iter >= self.cfg.train.total_iters
    }

    /// Learning rate of `group` for the update made at 0-based step `iter`.
    pub fn lr(&self, group: ParamGroup, iter: u64) -> Option<f64> {
        let t = &self.cfg.train;
        let factor = match t.schedule {
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / t.total_iters as f64).cos()),
            Schedule::Constant => 1.0,
        };
        match group {
            ParamGroup::Main => Some(t.lr_main * factor),
            ParamGroup::Flow if iter < t.flow_freeze_iters => None,
            ParamGroup::Flow => Some(t.lr_flow * factor),
        }
    }

    fn sample(&self, iter: u64, b: usize) -> Result<Sample> {
        let t = &self.cfg.train;
        let mut rng = seeded_rng(self.cfg.seed, &format!("train/{iter}/{b}"));
        let clip = &self.data.clips[rng.random_range(0..self.data.clips.len())];
        let (h, w) = clip.dims();
        let start = rng.random_range(0..=clip.len() - t.seq_len);
        let y0 = rng.random_range(0..=h - t.patch);
        let x0 = rng.random_range(0..=w - t.patch);
        let aug = Augmentation::sample(&t.aug, &mut rng);
        let p = t.patch;
        let crop = |a: &Array3<f32>| aug.apply_frame(&a.slice(s![.., y0..y0 + p, x0..x0 + p]).to_owned());
        let window = start..start + t.seq_len;
        let degraded = clip.degraded[window.clone()].iter().map(crop).collect();
        let target = clip.target[window.clone()].iter().map(crop).collect();
        let motion = match (self.cfg.model.flow, &clip.fields) {
            (FlowChoice::KnownMotion, Some((to_prev, to_next))) => {
                let crop_flow = |f: &FlowField| -> Result<FlowField> {
                    let c = FlowField::new(f.uv().slice(s![.., y0..y0 + p, x0..x0 + p]).to_owned())?;
                    Ok(aug.apply_flow(&c))
                };
                MotionInput::Fields {
                    to_prev: to_prev[window.clone()].iter().map(crop_flow).collect::<Result<_>>()?,
                    to_next: to_next[window].iter().map(crop_flow).collect::<Result<_>>()?,
                }
            }
            (choice, _) => clip.motion(choice)?,
        };
        Ok(Sample {
            label: format!(
                "{}[{}..{}] y={y0} x={x0} aug={aug:?}",
                clip.id,
                start,
                start + t.seq_len
            ),
            degraded,
            target,
            motion,
        })
    }

    /// One optimizer update over a batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let t = self.cfg.train.clone();
        let it = self.iter;
        let lr_main = self.lr(ParamGroup::Main, it).expect("main group is never frozen");
        let lr_flow = self.lr(ParamGroup::Flow, it);
        let n = self.model.params().len();
        let mut grads = Grads::empty(n);
        let mut labels = Vec::with_capacity(t.batch);
        let mut sum = LossBreakdown {
            total: 0.0,
            final_term: 0.0,
            intermediate_term: 0.0,
        };
        let inv = 1.0 / t.batch as f32;
        for b in 0..t.batch {
            let sample = self.sample(it, b)?;
            labels.push(sample.label.clone());
            let input = self.model.prepare(&sample.degraded, &sample.motion)?;
            let mut g = Graph::new(self.model.params());
            if lr_flow.is_none() {
                g.freeze(ParamGroup::Flow);
            }
            let out = self.model.forward_clip(&mut g, &input)?;
            let (loss, br) = total_loss(
                &mut g,
                &out,
                &sample.target,
                &self.cfg.model.scales,
                self.cfg.model.enable_sup,
                t.sup_weight,
                t.eps_charb,
            )?;
            if !br.total.is_finite() {
                return Err(NetError::NonFinite { iter: it + 1, batch: labels });
            }
            let gs = g.backward(loss);
            grads.add_scaled(&gs, inv);
            sum.total += br.total / t.batch as f64;
            sum.final_term += br.final_term / t.batch as f64;
            sum.intermediate_term += br.intermediate_term / t.batch as f64;
        }
        if !grads.all_finite() {
            return Err(NetError::NonFinite { iter: it + 1, batch: labels });
        }
        self.adam.step(self.model.params_mut(), &grads, |grp| match grp {
            ParamGroup::Main => Some(lr_main as f32),
            ParamGroup::Flow => lr_flow.map(|v| v as f32),
        });
        self.iter += 1;
        Ok(StepStats {
            iter: self.iter,
            loss: sum,
            lr_main,
            lr_flow,
        })
    }

    /// Mean PSNR of restored vs target over the first `val_clips` clips.
    pub fn validate(&self) -> Result<f64> {
        let n = self.cfg.train.val_clips.min(self.data.clips.len());
        if n == 0 {
            return Err(NetError::Invalid("no validation clips".into()));
        }
        let mut total = 0.0;
        for c in &self.data.clips[..n] {
            let clip = FrameStack::from_frames(&c.degraded, Colorspace::DisplayClamped)?;
            let restored = self.model.restore_clip(&clip, &c.motion(self.cfg.model.flow)?)?;
            total += psnr(restored.clip.data().view(), stack_frames(&c.target).view(), 1.0)?;
        }
        Ok(total / n as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.cfg, self.iter, self.model.params(), Some(self.adam.state()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/latest.ckpt` under the output directory.
    pub resume: bool,
    /// Stop after this many completed iterations (for interrupted runs).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iter: u64,
    pub last: Option<StepStats>,
    pub val_psnr: Option<f64>,
    pub checkpoint: PathBuf,
}

pub const METRICS_COLUMNS: &str = "iter,loss,final,intermediate,lr_main,lr_flow,val_psnr";

/// Runs (or resumes) training, writing checkpoints and `metrics.csv` under `out`.
pub fn train(cfg: &RunConfig, data: TrainData, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let ck_dir = out.join("checkpoints");
    let latest = ck_dir.join("latest.ckpt");
    let metrics = out.join("metrics.csv");
    let mut trainer = if opts.resume && latest.exists() {
        Trainer::resume(cfg, data, &latest)?
    } else {
        Trainer::new(cfg, data)?
    };
    fs::create_dir_all(&ck_dir).map_err(|e| CoreError::io(&ck_dir, e))?;
    if !(opts.resume && metrics.exists()) {
        let mut head = String::new();
        for line in cfg.to_toml_string().lines() {
            head.push_str("# ");
            head.push_str(line);
            head.push('\n');
        }
        head.push_str(METRICS_COLUMNS);
        head.push('\n');
        fs::write(&metrics, head).map_err(|e| CoreError::io(&metrics, e))?;
    }
    let mut log = OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| CoreError::io(&metrics, e))?;

    let t = &cfg.train;
    let mut last = None;
    let mut val_psnr = None;
    while !trainer.finished() && opts.stop_after.is_none_or(|s| trainer.iter() < s) {
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(NetError::NonFinite { iter, batch }) => {
                let dump = out.join("nan_dump.json");
                let body = serde_json::json!({ "iter": iter, "batch": batch });
                fs::write(&dump, serde_json::to_string_pretty(&body).expect("json"))
                    .map_err(|e| CoreError::io(&dump, e))?;
                return Err(NetError::NonFinite { iter, batch });
            }
            Err(e) => return Err(e),
        };
        let i = stats.iter;
        let val = if (t.val_every > 0 && i % t.val_every == 0) || i == t.total_iters {
            let v = trainer.validate()?;
            val_psnr = Some(v);
            Some(v)
        } else {
            None
        };
        writeln!(
            log,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{},{}",
            i,
            stats.loss.total,
            stats.loss.final_term,
            stats.loss.intermediate_term,
            stats.lr_main,
            stats.lr_flow.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "0".into()),
            val.map(|v| format!("{v:.4}")).unwrap_or_default()
        )
        .map_err(|e| CoreError::io(&metrics, e))?;
        if i % t.ckpt_every == 0 || i == t.total_iters || opts.stop_after == Some(i) {
            trainer.save(&ck_dir.join(format!("iter_{i:06}.ckpt")))?;
            trainer.save(&latest)?;
        }
        last = Some(stats);
    }
    if last.is_none() && !latest.exists() {
        trainer.save(&latest)?;
    }
    Ok(TrainSummary {
        iter: trainer.iter(),
        last,
        val_psnr,
        checkpoint: latest,
    })
}
