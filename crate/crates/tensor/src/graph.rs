use std::collections::HashMap;

use udcvr_core::geometry::{warp_bilinear_backward, warp_bilinear_into};
use udcvr_core::resample::{resize_adjoint_acc, resize_into};

use crate::conv::{conv_backward, conv_forward, ConvGeom};
use crate::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{shape_err, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x [C,H,W] * m [1,H,W]`, broadcasting over channels.
    MulPlane(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Resize(Var),
    Warp {
        src: Var,
        flow: Var,
    },
    Charbonnier {
        a: Var,
        b: Var,
        eps: f32,
    },
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations. Borrow the parameter store for the lifetime of one
/// forward/backward pass.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    frozen: Vec<ParamGroup>,
}

impl<'a> Graph<'a> {
    /// A graph that records gradients for every parameter.
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
            frozen: Vec::new(),
        }
    }

    /// A graph for inference only; [`Graph::backward`] panics.
    pub fn inference(store: &'a ParamStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    /// Parameters of `group` are treated as constants (no gradient work).
    pub fn freeze(&mut self, group: ParamGroup) {
        if !self.frozen.contains(&group) {
            self.frozen.push(group);
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let trainable = !self.frozen.contains(&p.group);
        let v = self.push(p.value.clone(), Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Drops every recorded node except `keep` (which become constants) and
    /// the parameters already loaded. Bounds memory during long inference
    /// runs; only valid without gradients.
    pub fn compact(&mut self, keep: &[Var]) -> Vec<Var> {
        assert!(!self.grad_enabled, "compact() would discard the tape");
        let mut nodes = std::mem::take(&mut self.nodes);
        let mut remap: HashMap<usize, Var> = HashMap::new();
        let mut params: Vec<(ParamId, Var)> = self.param_vars.drain().collect();
        params.sort_by_key(|(id, _)| *id);
        for (id, old) in params {
            let value = std::mem::replace(&mut nodes[old.0].value, Tensor::zeros(&[0]));
            let v = self.push(value, Op::Param(id), false);
            self.param_vars.insert(id, v);
            remap.insert(old.0, v);
        }
        keep.iter()
            .map(|k| {
                if let Some(&v) = remap.get(&k.0) {
                    return v;
                }
                let value = std::mem::replace(&mut nodes[k.0].value, Tensor::zeros(&[0]));
                let v = self.constant(value);
                remap.insert(k.0, v);
                v
            })
            .collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2] % 2 == 0 || stride == 0 {
            return Err(shape_err("conv2d", format!("input {:?}, weight {ws:?}", self.shape(x))));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, ws[2], stride);
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &geom,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_vec(&[cout, geom.oh, geom.ow], out), Op::Conv2d { x, w, b, geom }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::from_vec(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(a);
        Tensor::from_vec(t.shape(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Multiplies every channel of `x` by the single-channel map `m`.
    pub fn mul_plane(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw();
        if self.shape(m) != [1, h, w] {
            return Err(shape_err("mul_plane", format!("{:?} vs {:?}", self.shape(x), self.shape(m))));
        }
        let hw = h * w;
        let (tx, tm) = (self.value(x).data(), self.value(m).data());
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for i in 0..hw {
                out[ch * hw + i] = tx[ch * hw + i] * tm[i];
            }
        }
        let ng = self.ng(x) || self.ng(m);
        Ok(self.push(Tensor::from_vec(&[c, h, w], out), Op::MulPlane(x, m), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.map(a, |x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// `max(x, slope * x)` for `0 <= slope < 1`.
    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let v = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Concatenates CHW tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            if (ph, pw) != (h, w) {
                return Err(shape_err("concat", format!("{:?} vs {h}x{w}", self.shape(p))));
            }
            c += pc;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_vec(&[c, h, w], data), Op::Concat(parts.to_vec()), ng))
    }

    /// Bilinear resize of a CHW tensor (half-pixel centres, edge clamped).
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        if (oh, ow) == (h, w) {
            return x;
        }
        let mut out = vec![0.0; c * oh * ow];
        resize_into(self.value(x).data(), c, h, w, oh, ow, &mut out);
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, oh, ow], out), Op::Resize(x), ng)
    }

    /// Backward bilinear warp: `out(p) = src(p + flow(p))`, zeros outside.
    pub fn warp(&mut self, src: Var, flow: Var) -> Result<Var> {
        let (c, h, w) = self.value(src).chw();
        if self.shape(flow) != [2, h, w] {
            return Err(shape_err("warp", format!("src {:?}, flow {:?}", self.shape(src), self.shape(flow))));
        }
        let mut out = vec![0.0; c * h * w];
        warp_bilinear_into(self.value(src).data(), c, h, w, self.value(flow).data(), &mut out);
        let ng = self.ng(src) || self.ng(flow);
        Ok(self.push(Tensor::from_vec(&[c, h, w], out), Op::Warp { src, flow }, ng))
    }

    /// Mean over elements of `sqrt((a - b)^2 + eps^2)`.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f32) -> Result<Var> {
        self.same_shape("charbonnier", a, b)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let e2 = (eps as f64) * (eps as f64);
        let sum: f64 = ta
            .iter()
            .zip(tb)
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                (d * d + e2).sqrt()
            })
            .sum();
        let mean = (sum / ta.len().max(1) as f64) as f32;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(mean), Op::Charbonnier { a, b, eps }, ng))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let v = terms
            .iter()
            .map(|&(x, w)| w as f64 * self.value(x).item() as f64)
            .sum::<f64>() as f32;
        let ng = terms.iter().any(|&(x, _)| self.ng(x));
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert!(self.grad_enabled, "backward() on an inference graph");
        assert_eq!(self.value(loss).numel(), 1, "loss must be a scalar");
        let mut grads = Grads::empty(self.store.len());
        let mut g: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backprop(i, op, gi, &mut g, &mut grads);
        }
        grads
    }

    fn acc(&self, g: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut g[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_with(&self, g: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut g[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop(&self, i: usize, op: Op, gi: Tensor, g: &mut [Option<Tensor>], grads: &mut Grads) {
        match op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(id, gi),
            Op::Conv2d { x, w, b, geom } => {
                let cout = self.shape(w)[0];
                let need = (self.ng(x), self.ng(w), b.is_some_and(|b| self.ng(b)));
                let cg = conv_backward(self.value(x).data(), self.value(w).data(), gi.data(), cout, &geom, need);
                if let Some(dx) = cg.dx {
                    self.acc(g, x, Tensor::from_vec(self.shape(x), dx));
                }
                if let Some(dw) = cg.dw {
                    self.acc(g, w, Tensor::from_vec(self.shape(w), dw));
                }
                if let (Some(db), Some(b)) = (cg.db, b) {
                    self.acc(g, b, Tensor::from_vec(&[cout], db));
                }
            }
            Op::Add(a, b) => {
                if self.ng(b) {
                    self.acc(g, b, gi.clone());
                }
                self.acc(g, a, gi);
            }
            Op::Sub(a, b) => {
                if self.ng(b) {
                    let mut nb = gi.clone();
                    nb.data_mut().iter_mut().for_each(|v| *v = -*v);
                    self.acc(g, b, nb);
                }
                self.acc(g, a, gi);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                self.acc_with(g, a, |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(gi.data()).zip(tb) {
                        *d += gv * y;
                    }
                });
                self.acc_with(g, b, |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(gi.data()).zip(ta) {
                        *d += gv * x;
                    }
                });
            }
            Op::MulPlane(x, m) => {
                let (c, h, w) = self.value(x).chw();
                let hw = h * w;
                let (tx, tm) = (self.value(x).data(), self.value(m).data());
                let gd = gi.data();
                self.acc_with(g, x, |d| {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[ch * hw + p] += gd[ch * hw + p] * tm[p];
                        }
                    }
                });
                self.acc_with(g, m, |d| {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[p] += gd[ch * hw + p] * tx[ch * hw + p];
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                let mut t = gi;
                t.data_mut().iter_mut().for_each(|v| *v *= s);
                self.acc(g, a, t);
            }
            Op::Relu(a) => {
                let ta = self.value(a).data();
                let mut t = gi;
                for (v, &x) in t.data_mut().iter_mut().zip(ta) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.acc(g, a, t);
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(a).data();
                let mut t = gi;
                for (v, &x) in t.data_mut().iter_mut().zip(ta) {
                    if x <= 0.0 {
                        *v *= slope;
                    }
                }
                self.acc(g, a, t);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let mut t = gi;
                for (v, &s) in t.data_mut().iter_mut().zip(y) {
                    *v *= s * (1.0 - s);
                }
                self.acc(g, a, t);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    if self.ng(p) {
                        let t = Tensor::from_vec(self.shape(p), gi.data()[off..off + n].to_vec());
                        self.acc(g, p, t);
                    }
                    off += n;
                }
            }
            Op::Resize(x) => {
                let (c, h, w) = self.value(x).chw();
                let (_, oh, ow) = gi.chw();
                self.acc_with(g, x, |d| resize_adjoint_acc(gi.data(), c, h, w, oh, ow, d));
            }
            Op::Warp { src, flow } => {
                let (c, h, w) = self.value(src).chw();
                let mut dsrc = self.ng(src).then(|| vec![0.0f32; c * h * w]);
                let mut dflow = self.ng(flow).then(|| vec![0.0f32; 2 * h * w]);
                warp_bilinear_backward(
                    self.value(src).data(),
                    c,
                    h,
                    w,
                    self.value(flow).data(),
                    gi.data(),
                    dsrc.as_deref_mut(),
                    dflow.as_deref_mut(),
                );
                if let Some(d) = dsrc {
                    self.acc(g, src, Tensor::from_vec(&[c, h, w], d));
                }
                if let Some(d) = dflow {
                    self.acc(g, flow, Tensor::from_vec(&[2, h, w], d));
                }
            }
            Op::Charbonnier { a, b, eps } => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                let scale = gi.item() / ta.len().max(1) as f32;
                let e2 = eps * eps;
                let da: Vec<f32> = ta
                    .iter()
                    .zip(tb)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        scale * d / (d * d + e2).sqrt()
                    })
                    .collect();
                if self.ng(b) {
                    let db: Vec<f32> = da.iter().map(|v| -v).collect();
                    self.acc(g, b, Tensor::from_vec(self.shape(b), db));
                }
                self.acc(g, a, Tensor::from_vec(self.shape(a), da));
            }
            Op::WeightedSum(terms) => {
                let gv = gi.item();
                for (x, w) in terms {
                    self.acc(g, x, Tensor::scalar(gv * w));
                }
            }
        }
    }
}
