//! Coarse-to-fine learned motion estimator: at each pyramid level a small
//! convolutional module refines the upsampled flow from the level below,
//! looking at the reference frame, the target warped by the current flow,
//! and the flow itself.

use udcvr_core::resample::resize3;
use udcvr_tensor::{Graph, ParamGroup, ParamStore, Var};

use crate::error::Result;
use crate::layers::{Builder, Conv, Init};
use crate::tensor_of;

#[derive(Debug, Clone)]
pub(crate) struct FlowNet {
    /// `levels[0]` works at full resolution.
    levels: Vec<Vec<Conv>>,
}

impl FlowNet {
    pub fn new(store: &mut ParamStore, seed: u64, width: usize, levels: usize, zero_head: bool) -> Self {
        let mut bld = Builder {
            store,
            seed,
            group: ParamGroup::Flow,
        };
        let w = width;
        let half = (w / 2).max(1);
        let n = levels;
        let levels = (0..n)
            .map(|l| {
                let name = |i: usize| format!("flow.l{l}.conv{i}");
                // The coarsest level starts from zero flow, so it sees only the frames.
                let cin = if l + 1 == n { 6 } else { 8 };
                vec![
                    bld.conv(&name(0), cin, w, 7, 1, Init::Relu),
                    bld.conv(&name(1), w, 2 * w, 7, 1, Init::Relu),
                    bld.conv(&name(2), 2 * w, w, 7, 1, Init::Relu),
                    bld.conv(&name(3), w, half, 7, 1, Init::Relu),
                    bld.conv(&name(4), half, 2, 7, 1, if zero_head { Init::Zero } else { Init::Scaled(0.1) }),
                ]
            })
            .collect();
        FlowNet { levels }
    }

    /// Flow on `reference`'s grid pointing into `target` (both `3 x H x W`).
    pub fn estimate(&self, g: &mut Graph, reference: &ndarray::Array3<f32>, target: &ndarray::Array3<f32>) -> Result<Var> {
        let (_, h, w) = reference.dim();
        let mut flow: Option<Var> = None;
        for l in (0..self.levels.len()).rev() {
            let (hl, wl) = (h >> l, w >> l);
            // Centred inputs keep first-layer units from all dying together.
            let r = g.constant(tensor_of(&resize3(reference, hl, wl).mapv(|v| v - 0.5)));
            let t = g.constant(tensor_of(&resize3(target, hl, wl).mapv(|v| v - 0.5)));
            let (mut x, up) = match flow {
                Some(f) => {
                    let f = g.resize(f, hl, wl);
                    let up = g.scale(f, 2.0);
                    let warped = g.warp(t, up)?;
                    (g.concat(&[r, warped, up])?, Some(up))
                }
                None => (g.concat(&[r, t])?, None),
            };
            let convs = &self.levels[l];
            for (i, c) in convs.iter().enumerate() {
                x = if i + 1 < convs.len() { c.forward_act(g, x)? } else { c.forward(g, x)? };
            }
            flow = Some(match up {
                Some(u) => g.add(u, x)?,
                None => x,
            });
        }
        Ok(flow.expect("at least one level"))
    }
}
