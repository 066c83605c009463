use ndarray::{s, Array3, Array4};
use udcvr_core::config::{FlowChoice, MaskConfig, ModelConfig};
use udcvr_core::geometry::{homography_to_flow, FlowField, Homography};
use udcvr_core::masks::mask_at_scale;
use udcvr_core::resample::resize3;
use udcvr_core::{Colorspace, FrameStack};
use udcvr_tensor::{Graph, ParamGroup, ParamStore, Tensor, Var};

use crate::error::{NetError, Result};
use crate::flownet::FlowNet;
use crate::layers::{Builder, Conv, Init, ResBlock};
use crate::{array_of, tensor_of};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Backward,
    Forward,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Backward => "bwd",
            Direction::Forward => "fwd",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Recurrent state entering a step; `None` is the all-zero state.
#[derive(Debug, Clone, Copy, Default)]
pub struct DamState {
    pub long: Option<Var>,
    pub short: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct DamOutput {
    pub out: Var,
    pub new_long: Var,
    pub intermediate: Var,
}

/// Intermediate frame estimate emitted by one recurrent step.
#[derive(Debug, Clone, Copy)]
pub struct Intermediate {
    /// Index into the configured scale list.
    pub scale: usize,
    pub direction: Direction,
    pub t: usize,
    pub var: Var,
}

#[derive(Debug, Clone)]
pub struct ClipOutput {
    pub frames: Vec<Var>,
    pub intermediates: Vec<Intermediate>,
    pub dam_calls: usize,
}

/// Motion used to align recurrent state between neighbouring frames.
#[derive(Debug, Clone)]
pub enum MotionInput {
    Zero,
    /// `to_prev[t]` lives on frame `t` and points into frame `t-1`;
    /// `to_next[t]` points into frame `t+1`. Unused ends hold zeros.
    Fields {
        to_prev: Vec<FlowField>,
        to_next: Vec<FlowField>,
    },
    Learned,
}

impl MotionInput {
    /// From per-step homographies where `steps[t]` maps frame `t-1` onto
    /// frame `t` (`steps[0]` is ignored).
    pub fn from_homographies(steps: &[Homography], dims: (usize, usize)) -> Result<Self> {
        let t_len = steps.len();
        let mut to_prev = Vec::with_capacity(t_len);
        let mut to_next = Vec::with_capacity(t_len);
        for t in 0..t_len {
            to_prev.push(if t > 0 {
                homography_to_flow(&steps[t].inverse()?, dims)?
            } else {
                FlowField::zeros(dims.0, dims.1)
            });
            to_next.push(if t + 1 < t_len {
                homography_to_flow(&steps[t + 1], dims)?
            } else {
                FlowField::zeros(dims.0, dims.1)
            });
        }
        Ok(MotionInput::Fields { to_prev, to_next })
    }

    /// Motion for a model configuration; known motion needs the homographies.
    pub fn for_choice(choice: FlowChoice, steps: Option<&[Homography]>, dims: (usize, usize)) -> Result<Self> {
        match choice {
            FlowChoice::ZeroFlow => Ok(MotionInput::Zero),
            FlowChoice::Learned => Ok(MotionInput::Learned),
            FlowChoice::KnownMotion => {
                let steps = steps.ok_or_else(|| {
                    NetError::Invalid("known-motion flow requires recorded homographies".into())
                })?;
                MotionInput::from_homographies(steps, dims)
            }
        }
    }
}

enum PreparedMotion {
    Zero,
    /// `[direction][t][scale]`, already rescaled to each scale.
    Fields(Vec<Vec<Vec<Tensor>>>),
    Learned,
}

/// Per-clip constants: frames, their downsampled copies and masks.
pub struct ClipInput {
    frames: Vec<Array3<f32>>,
    frames_s: Vec<Vec<Tensor>>,
    masks: Vec<Vec<(Tensor, Tensor)>>,
    motion: PreparedMotion,
}

impl ClipInput {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[0].dim();
        (h, w)
    }
}

struct Dam {
    conv_a: Conv,
    conv_b: Conv,
    conv_att: Conv,
    conv_c: Conv,
    conv_d: Conv,
    fuse: Conv,
    res: Vec<ResBlock>,
    out: Conv,
    channels: usize,
}

impl Dam {
    fn new(bld: &mut Builder, name: &str, c: usize, n_res: usize) -> Self {
        Dam {
            conv_a: bld.conv(&format!("{name}.flare_to_img"), c, 3, 3, 1, Init::Linear),
            conv_b: bld.conv(&format!("{name}.haze_to_img"), c, 3, 3, 1, Init::Linear),
            conv_att: bld.conv(&format!("{name}.attention"), 3, c, 3, 1, Init::Linear),
            conv_c: bld.conv(&format!("{name}.flare_refine"), c, c, 3, 1, Init::Linear),
            conv_d: bld.conv(&format!("{name}.haze_refine"), c, c, 3, 1, Init::Linear),
            fuse: bld.conv(&format!("{name}.fuse"), 3 * c, c, 3, 1, Init::Relu),
            res: (0..n_res)
                .map(|i| ResBlock::new(bld, &format!("{name}.res{i}"), c))
                .collect(),
            out: bld.conv(&format!("{name}.out"), c, c, 3, 1, Init::Linear),
            channels: c,
        }
    }
}

struct EncLevel {
    downs: Vec<Conv>,
    proj: Conv,
}

struct DecLevel {
    up: Conv,
    fuse: Conv,
}

/// The restoration network. Parameters live in an owned [`ParamStore`].
pub struct D2RNet {
    cfg: ModelConfig,
    mask: MaskConfig,
    store: ParamStore,
    stem: Conv,
    enc: Vec<EncLevel>,
    /// `[scale][direction]`
    dams: Vec<[Dam; 2]>,
    dec: Vec<DecLevel>,
    dec_full: Conv,
    head: Conv,
    flow: Option<FlowNet>,
}

impl D2RNet {
    pub fn new(cfg: &ModelConfig, mask: &MaskConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        mask.validate()?;
        let mut store = ParamStore::new();
        let mut bld = Builder {
            store: &mut store,
            seed,
            group: ParamGroup::Main,
        };
        let ch = &cfg.channels;
        let stem = bld.conv("enc.stem", 3, ch[0], 3, 1, Init::Relu);
        let mut enc = Vec::new();
        let (mut prev_scale, mut prev_c) = (1, ch[0]);
        for (i, (&s, &c)) in cfg.scales.iter().zip(ch).enumerate() {
            let steps = (s / prev_scale).trailing_zeros() as usize;
            let downs = (0..steps)
                .map(|j| {
                    let cin = if j == 0 { prev_c } else { c };
                    bld.conv(&format!("enc.s{s}.down{j}"), cin, c, 3, 2, Init::Relu)
                })
                .collect();
            let proj = bld.conv(&format!("enc.s{s}.proj"), c, c, 3, 1, Init::Linear);
            enc.push(EncLevel { downs, proj });
            prev_scale = s;
            prev_c = c;
            let _ = i;
        }
        let dams = cfg
            .scales
            .iter()
            .zip(ch)
            .map(|(&s, &c)| {
                [Direction::Backward, Direction::Forward]
                    .map(|d| Dam::new(&mut bld, &format!("dam.{}.s{s}", d.tag()), c, cfg.n_resblocks))
            })
            .collect();
        let dec = (0..cfg.scales.len() - 1)
            .map(|i| {
                let s = cfg.scales[i];
                DecLevel {
                    up: bld.conv(&format!("dec.s{s}.up"), ch[i + 1], ch[i], 3, 1, Init::Relu),
                    fuse: bld.conv(&format!("dec.s{s}.fuse"), 2 * ch[i], ch[i], 3, 1, Init::Relu),
                }
            })
            .collect();
        let dec_full = bld.conv("dec.full", ch[0], ch[0], 3, 1, Init::Relu);
        let head = bld.conv(
            "dec.head",
            ch[0],
            3,
            3,
            1,
            if cfg.zero_init_head { Init::Zero } else { Init::Linear },
        );
        let flow = (cfg.flow == FlowChoice::Learned)
            .then(|| FlowNet::new(&mut store, seed, cfg.flow_width, cfg.flow_levels, cfg.zero_init_head));
        Ok(D2RNet {
            cfg: cfg.clone(),
            mask: mask.clone(),
            store,
            stem,
            enc,
            dams,
            dec,
            dec_full,
            head,
            flow,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mask_config(&self) -> &MaskConfig {
        &self.mask
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Side length that frame dimensions must be a multiple of.
    pub fn alignment(&self) -> usize {
        self.cfg.alignment()
    }

    /// Builds the per-clip constants. Frames must already be aligned.
    pub fn prepare(&self, frames: &[Array3<f32>], motion: &MotionInput) -> Result<ClipInput> {
        if frames.is_empty() {
            return Err(NetError::Invalid("empty clip".into()));
        }
        let (_, h, w) = frames[0].dim();
        let a = self.alignment();
        if h % a != 0 || w % a != 0 || frames.iter().any(|f| f.dim() != (3, h, w)) {
            return Err(NetError::Invalid(format!(
                "frames must be 3x{h}x{w} with sides divisible by {a}"
            )));
        }
        let mut frames_s = Vec::with_capacity(frames.len());
        let mut masks = Vec::with_capacity(frames.len());
        for f in frames {
            let mut fs = Vec::new();
            let mut ms = Vec::new();
            for &s in &self.cfg.scales {
                fs.push(tensor_of(&resize3(f, h / s, w / s)));
                ms.push(if self.cfg.enable_smg {
                    let m = mask_at_scale(f.view(), &self.mask, s)?;
                    let (mh, mw) = m.dims();
                    (
                        Tensor::from_vec(&[1, mh, mw], m.flare.iter().copied().collect()),
                        Tensor::from_vec(&[1, mh, mw], m.haze.iter().copied().collect()),
                    )
                } else {
                    (Tensor::full(&[1, h / s, w / s], 1.0), Tensor::full(&[1, h / s, w / s], 1.0))
                });
            }
            frames_s.push(fs);
            masks.push(ms);
        }
        let motion = match motion {
            MotionInput::Zero => PreparedMotion::Zero,
            MotionInput::Learned => {
                if self.flow.is_none() {
                    return Err(NetError::Invalid("model has no learned flow estimator".into()));
                }
                PreparedMotion::Learned
            }
            MotionInput::Fields { to_prev, to_next } => {
                if to_prev.len() != frames.len() || to_next.len() != frames.len() {
                    return Err(NetError::Invalid("one flow field per frame and direction is required".into()));
                }
                let per_scale = |f: &FlowField| -> Result<Vec<Tensor>> {
                    if f.dims() != (h, w) {
                        return Err(NetError::Invalid(format!("flow {:?} for {h}x{w} frames", f.dims())));
                    }
                    Ok(self
                        .cfg
                        .scales
                        .iter()
                        .map(|&s| tensor_of(&resize3(f.uv(), h / s, w / s).mapv(|v| v / s as f32)))
                        .collect())
                };
                // Backward steps align the state of t+1, forward steps that of t-1.
                let bwd = to_next.iter().map(per_scale).collect::<Result<Vec<_>>>()?;
                let fwd = to_prev.iter().map(per_scale).collect::<Result<Vec<_>>>()?;
                PreparedMotion::Fields(vec![bwd, fwd])
            }
        };
        Ok(ClipInput {
            frames: frames.to_vec(),
            frames_s,
            masks,
            motion,
        })
    }

    /// Multi-scale encoder features of one frame.
    pub fn encode(&self, g: &mut Graph, frame: Var) -> Result<Vec<Var>> {
        let mut h = self.stem.forward_act(g, frame)?;
        let mut feats = Vec::with_capacity(self.enc.len());
        for level in &self.enc {
            for d in &level.downs {
                h = d.forward_act(g, h)?;
            }
            feats.push(level.proj.forward(g, h)?);
        }
        Ok(feats)
    }

    /// One recurrent refinement step at `scale` (an index into the scale list).
    /// `flow` aligns the incoming state to the current frame; `None` means
    /// the identity.
    #[allow(clippy::too_many_arguments)]
    pub fn dam_step(
        &self,
        g: &mut Graph,
        direction: Direction,
        scale: usize,
        f_t: Var,
        state: &DamState,
        frame_s: Var,
        masks: (Var, Var),
        flow: Option<Var>,
    ) -> Result<DamOutput> {
        let dam = &self.dams[scale][direction.index()];
        let (c, h, w) = g.value(f_t).chw();
        if c != dam.channels {
            return Err(NetError::Invalid(format!("feature has {c} channels, expected {}", dam.channels)));
        }
        let align = |g: &mut Graph, s: Option<Var>| -> Result<Var> {
            match (s, flow) {
                (None, _) => Ok(g.constant(Tensor::zeros(&[c, h, w]))),
                (Some(v), Some(f)) => Ok(g.warp(v, f)?),
                (Some(v), None) => Ok(v),
            }
        };
        let long = align(g, state.long)?;
        let short = align(g, state.short)?;
        let (m_flare, m_haze) = masks;

        let mut intermediate = frame_s;
        let mut gated = [None, None];
        if self.cfg.enable_lfr {
            let ml = g.mul_plane(long, m_flare)?;
            let img = dam.conv_a.forward(g, ml)?;
            intermediate = g.add(intermediate, img)?;
            gated[0] = Some(ml);
        }
        if self.cfg.enable_shr {
            let mh = g.mul_plane(short, m_haze)?;
            let img = dam.conv_b.forward(g, mh)?;
            intermediate = g.add(intermediate, img)?;
            gated[1] = Some(mh);
        }
        let att = dam.conv_att.forward(g, intermediate)?;
        let att = g.sigmoid(att);
        let refine = |g: &mut Graph, base: Var, gated: Option<Var>, conv: &Conv| -> Result<Var> {
            match gated {
                Some(m) => {
                    let r = conv.forward(g, m)?;
                    let r = g.mul(att, r)?;
                    Ok(g.add(base, r)?)
                }
                None => Ok(g.constant(Tensor::zeros(&[c, h, w]))),
            }
        };
        let refined_long = refine(g, long, gated[0], &dam.conv_c)?;
        let refined_short = refine(g, short, gated[1], &dam.conv_d)?;

        let x = g.concat(&[f_t, refined_long, refined_short])?;
        let mut fl = dam.fuse.forward_act(g, x)?;
        for rb in &dam.res {
            fl = rb.forward(g, fl)?;
        }
        let out = dam.out.forward(g, fl)?;
        Ok(DamOutput {
            out,
            new_long: fl,
            intermediate,
        })
    }

    /// Expanding path from per-scale features back to a full-size frame.
    pub fn decode(&self, g: &mut Graph, frame: Var, feats: &[Var]) -> Result<Var> {
        let n = feats.len();
        let mut x = feats[n - 1];
        for i in (0..n - 1).rev() {
            let (_, h, w) = g.value(feats[i]).chw();
            x = g.resize(x, h, w);
            x = self.dec[i].up.forward_act(g, x)?;
            x = g.concat(&[x, feats[i]])?;
            x = self.dec[i].fuse.forward_act(g, x)?;
        }
        let (_, h, w) = g.value(frame).chw();
        x = g.resize(x, h, w);
        x = self.dec_full.forward_act(g, x)?;
        let r = self.head.forward(g, x)?;
        Ok(if self.cfg.global_residual { g.add(frame, r)? } else { r })
    }

    fn frame_var(&self, g: &mut Graph, input: &ClipInput, t: usize) -> Var {
        g.constant(tensor_of(&input.frames[t]))
    }

    fn step_flows(&self, g: &mut Graph, input: &ClipInput, dir: Direction, t: usize) -> Result<Option<Vec<Var>>> {
        let neighbour = match dir {
            Direction::Backward if t + 1 < input.len() => t + 1,
            Direction::Forward if t > 0 => t - 1,
            _ => return Ok(None),
        };
        let (h, w) = input.dims();
        Ok(match &input.motion {
            PreparedMotion::Zero => None,
            PreparedMotion::Fields(f) => Some(
                f[dir.index()][t]
                    .iter()
                    .map(|tensor| g.constant(tensor.clone()))
                    .collect(),
            ),
            PreparedMotion::Learned => {
                let net = self.flow.as_ref().expect("checked in prepare");
                let full = net.estimate(g, &input.frames[t], &input.frames[neighbour])?;
                Some(
                    self.cfg
                        .scales
                        .iter()
                        .map(|&s| {
                            let f = g.resize(full, h / s, w / s);
                            g.scale(f, 1.0 / s as f32)
                        })
                        .collect(),
                )
            }
        })
    }

    fn run_step(
        &self,
        g: &mut Graph,
        input: &ClipInput,
        dir: Direction,
        t: usize,
        feats: &[Var],
        states: &mut [DamState],
        out: &mut ClipOutput,
    ) -> Result<Vec<Var>> {
        let flows = if states.iter().any(|s| s.long.is_some() || s.short.is_some()) {
            self.step_flows(g, input, dir, t)?
        } else {
            None
        };
        let mut outs = Vec::with_capacity(feats.len());
        for (i, &f) in feats.iter().enumerate() {
            let frame_s = g.constant(input.frames_s[t][i].clone());
            let (mf, mh) = &input.masks[t][i];
            let masks = (g.constant(mf.clone()), g.constant(mh.clone()));
            let flow = flows.as_ref().map(|v| v[i]);
            let o = self.dam_step(g, dir, i, f, &states[i], frame_s, masks, flow)?;
            out.dam_calls += 1;
            out.intermediates.push(Intermediate {
                scale: i,
                direction: dir,
                t,
                var: o.intermediate,
            });
            states[i] = DamState {
                long: Some(o.new_long),
                short: Some(f),
            };
            outs.push(o.out);
        }
        Ok(outs)
    }

    /// Backward pass over encoder features; returns per-frame outputs.
    pub fn backward_pass(&self, g: &mut Graph, input: &ClipInput, out: &mut ClipOutput) -> Result<Vec<Vec<Var>>> {
        let t_len = input.len();
        let mut states = vec![DamState::default(); self.cfg.scales.len()];
        let mut results: Vec<Vec<Var>> = vec![Vec::new(); t_len];
        for t in (0..t_len).rev() {
            let frame = self.frame_var(g, input, t);
            let feats = self.encode(g, frame)?;
            results[t] = self.run_step(g, input, Direction::Backward, t, &feats, &mut states, out)?;
            if !g.grad_enabled() {
                compact(g, &mut states, &mut results, out);
            }
        }
        Ok(results)
    }

    /// Forward pass over the backward-pass outputs, decoding each frame.
    pub fn forward_pass(
        &self,
        g: &mut Graph,
        input: &ClipInput,
        mut bwd: Vec<Vec<Var>>,
        out: &mut ClipOutput,
    ) -> Result<()> {
        let mut states = vec![DamState::default(); self.cfg.scales.len()];
        for t in 0..input.len() {
            let feats = bwd[t].clone();
            let outs = self.run_step(g, input, Direction::Forward, t, &feats, &mut states, out)?;
            let frame = self.frame_var(g, input, t);
            let restored = self.decode(g, frame, &outs)?;
            out.frames.push(restored);
            if !g.grad_enabled() {
                compact(g, &mut states, &mut bwd, out);
            }
        }
        Ok(())
    }

    /// Full bi-directional pass over a prepared clip.
    pub fn forward_clip(&self, g: &mut Graph, input: &ClipInput) -> Result<ClipOutput> {
        let mut out = ClipOutput {
            frames: Vec::with_capacity(input.len()),
            intermediates: Vec::new(),
            dam_calls: 0,
        };
        let bwd = self.backward_pass(g, input, &mut out)?;
        self.forward_pass(g, input, bwd, &mut out)?;
        Ok(out)
    }

    /// Restores a display-range clip of any size: frames are padded by edge
    /// replication to the model alignment and the result cropped back.
    pub fn restore_clip(&self, clip: &FrameStack, motion: &MotionInput) -> Result<Restored> {
        let (h, w) = clip.frame_dims();
        let a = self.alignment();
        let (ph, pw) = (h.div_ceil(a) * a, w.div_ceil(a) * a);
        let frames: Vec<Array3<f32>> = clip.frames().map(|f| pad_replicate(&f.to_owned(), ph, pw)).collect();
        let motion = match motion {
            MotionInput::Fields { to_prev, to_next } => {
                let pad = |v: &Vec<FlowField>| -> Result<Vec<FlowField>> {
                    v.iter()
                        .map(|f| Ok(FlowField::new(pad_replicate(f.uv(), ph, pw))?))
                        .collect()
                };
                MotionInput::Fields {
                    to_prev: pad(to_prev)?,
                    to_next: pad(to_next)?,
                }
            }
            other => other.clone(),
        };
        let input = self.prepare(&frames, &motion)?;
        let mut g = Graph::inference(&self.store);
        let out = self.forward_clip(&mut g, &input)?;
        let restored: Vec<Array3<f32>> = out
            .frames
            .iter()
            .map(|&v| {
                array_of(g.value(v))
                    .slice(s![.., ..h, ..w])
                    .mapv(|x| x.clamp(0.0, 1.0))
            })
            .collect();
        let intermediates = out
            .intermediates
            .iter()
            .map(|i| {
                let s = self.cfg.scales[i.scale];
                IntermediateFrame {
                    scale: s,
                    direction: i.direction,
                    t: i.t,
                    frame: array_of(g.value(i.var))
                        .slice(s![.., ..h.div_ceil(s), ..w.div_ceil(s)])
                        .to_owned(),
                }
            })
            .collect();
        Ok(Restored {
            clip: FrameStack::from_frames(&restored, Colorspace::DisplayClamped)?,
            intermediates,
            dam_calls: out.dam_calls,
        })
    }
}

/// Restored clip plus every intermediate estimate.
#[derive(Debug, Clone)]
pub struct Restored {
    pub clip: FrameStack,
    pub intermediates: Vec<IntermediateFrame>,
    pub dam_calls: usize,
}

#[derive(Debug, Clone)]
pub struct IntermediateFrame {
    /// Downsampling factor.
    pub scale: usize,
    pub direction: Direction,
    pub t: usize,
    pub frame: Array3<f32>,
}

/// Trainable scalar count of a configuration.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(D2RNet::new(cfg, &MaskConfig::default(), 0)?.num_params())
}

fn compact(g: &mut Graph, states: &mut [DamState], feats: &mut [Vec<Var>], out: &mut ClipOutput) {
    let mut live: Vec<&mut Var> = states
        .iter_mut()
        .flat_map(|s| s.long.iter_mut().chain(s.short.iter_mut()))
        .chain(feats.iter_mut().flatten())
        .chain(out.frames.iter_mut())
        .chain(out.intermediates.iter_mut().map(|i| &mut i.var))
        .collect();
    let keep: Vec<Var> = live.iter().map(|v| **v).collect();
    let fresh = g.compact(&keep);
    for (slot, v) in live.iter_mut().zip(fresh) {
        **slot = v;
    }
}

/// Pads a `C x H x W` array on the bottom/right by repeating edge pixels.
pub fn pad_replicate(a: &Array3<f32>, ph: usize, pw: usize) -> Array3<f32> {
    let (c, h, w) = a.dim();
    if (h, w) == (ph, pw) {
        return a.clone();
    }
    Array3::from_shape_fn((c, ph, pw), |(k, y, x)| a[(k, y.min(h - 1), x.min(w - 1))])
}

/// Stacks restored frames into a 4-D array.
pub fn stack_frames(frames: &[Array3<f32>]) -> Array4<f32> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).expect("frames share a shape")
}
