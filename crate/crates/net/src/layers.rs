use rand::Rng;
use udcvr_core::rng::seeded_rng;
use udcvr_tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

pub(crate) const LEAK: f32 = 0.1;

/// Weight initialisation rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Uniform with variance `2 / fan_in`, for layers followed by a ReLU.
    Relu,
    /// Uniform with variance `1 / fan_in`.
    Linear,
    /// [`Init::Relu`] scaled down, for residual branches.
    Scaled(f32),
    Zero,
}

/// Square convolution with "same" padding and a bias.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
    pub group: ParamGroup,
}

impl Builder<'_> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> Conv {
        let fan_in = (cin * k * k) as f32;
        let bound = match init {
            Init::Relu => (6.0 / fan_in).sqrt(),
            Init::Linear => (3.0 / fan_in).sqrt(),
            Init::Scaled(s) => s * (6.0 / fan_in).sqrt(),
            Init::Zero => 0.0,
        };
        let mut rng = seeded_rng(self.seed, &format!("init/{name}"));
        let n = cout * cin * k * k;
        let data = (0..n)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        let w = self
            .store
            .add(format!("{name}.w"), Tensor::from_vec(&[cout, cin, k, k], data), self.group);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]), self.group);
        Conv { w, b, stride }
    }
}

impl Conv {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        Ok(g.conv2d(x, w, Some(b), self.stride)?)
    }

    pub fn forward_relu(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.relu(y))
    }

    /// Leaky activation used outside residual blocks.
    pub fn forward_act(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.leaky_relu(y, LEAK))
    }
}

/// Two 3x3 convolutions with a ReLU between them and an identity skip.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    pub fn new(bld: &mut Builder, name: &str, c: usize) -> Self {
        ResBlock {
            a: bld.conv(&format!("{name}.conv1"), c, c, 3, 1, Init::Relu),
            b: bld.conv(&format!("{name}.conv2"), c, c, 3, 1, Init::Scaled(0.1)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.a.forward_relu(g, x)?;
        let h = self.b.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}
