use crate::params::{Grads, ParamGroup, ParamStore};

/// Per-parameter optimizer state, exposed for checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub steps: u64,
}

/// Adam with bias correction. Each parameter counts its own steps, so a group
/// that was frozen starts its bias correction fresh when it is released.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    state: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f32, beta2: f32, eps: f32) -> Self {
        let state = store
            .iter()
            .map(|(_, p)| AdamState {
                m: vec![0.0; p.value.numel()],
                v: vec![0.0; p.value.numel()],
                steps: 0,
            })
            .collect();
        Adam {
            beta1,
            beta2,
            eps,
            state,
        }
    }

    pub fn state(&self) -> &[AdamState] {
        &self.state
    }

    /// Replaces the moments, e.g. when resuming. Lengths must match the store.
    pub fn set_state(&mut self, state: Vec<AdamState>) {
        assert_eq!(state.len(), self.state.len());
        for (a, b) in state.iter().zip(&self.state) {
            assert_eq!(a.m.len(), b.m.len());
        }
        self.state = state;
    }

    /// One update. `lr(group)` returns `None` for frozen groups, which are
    /// left untouched (values, moments and step counts alike).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: impl Fn(ParamGroup) -> Option<f32>) {
        for (id, p) in store.iter_mut() {
            let Some(rate) = lr(p.group) else { continue };
            let Some(g) = grads.get(id) else { continue };
            let st = &mut self.state[id.0];
            st.steps += 1;
            let t = st.steps as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let step = rate / bc1;
            for (((w, &gv), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                *w -= step * *m / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[2], vec![1.0, -1.0]), ParamGroup::Main);
        let f = store.add("f", Tensor::from_vec(&[1], vec![0.5]), ParamGroup::Flow);
        let mut adam = Adam::new(&store, 0.9, 0.99, 1e-8);
        let mut grads = Grads::empty(2);
        grads.accumulate(a, Tensor::from_vec(&[2], vec![3.0, -0.2]));
        grads.accumulate(f, Tensor::from_vec(&[1], vec![1.0]));
        adam.step(&mut store, &grads, |g| (g == ParamGroup::Main).then_some(0.1));
        let v = store.get(a).value.data();
        assert!((v[0] - 0.9).abs() < 1e-5 && (v[1] + 0.9).abs() < 1e-5, "{v:?}");
        assert_eq!(store.get(f).value.data(), &[0.5]);
        assert_eq!(adam.state()[f.0].steps, 0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_vec(&[1, 1, 3], vec![2.0, -3.0, 0.5]), ParamGroup::Main);
        let mut adam = Adam::new(&store, 0.9, 0.99, 1e-8);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.param(x);
                let target = g.constant(Tensor::from_vec(&[1, 1, 3], vec![1.0, 1.0, 1.0]));
                let loss = g.charbonnier(xv, target, 1e-3).unwrap();
                g.backward(loss)
            };
            adam.step(&mut store, &grads, |_| Some(0.02));
        }
        for &v in store.get(x).value.data() {
            assert!((v - 1.0).abs() < 0.05, "{v}");
        }
    }
}
