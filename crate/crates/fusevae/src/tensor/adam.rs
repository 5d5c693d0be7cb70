use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Adam hyperparameters. The moment decay rates and epsilon stay at their
/// conventional values throughout this crate.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Dense per-parameter gradient accumulator, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    bufs: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer { bufs: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect() }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64], scale: f64) -> Result<()> {
        let buf = &mut self.bufs[id.index()];
        if buf.len() != grad.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match parameter length {}",
                grad.len(),
                buf.len()
            )));
        }
        for (b, &g) in buf.iter_mut().zip(grad) {
            *b += scale * g;
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.index()]
    }

    pub fn reset(&mut self) {
        for b in &mut self.bufs {
            b.fill(0.0);
        }
    }
}

/// Adam first/second moment state for every parameter in a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        AdamState { v: m.clone(), m, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Flattens the moments in store order for checkpointing.
    pub fn snapshot(&self) -> (u64, Vec<f64>, Vec<f64>) {
        let m = self.m.iter().flatten().copied().collect();
        let v = self.v.iter().flatten().copied().collect();
        (self.t, m, v)
    }

    /// Rebuilds the state from a [`AdamState::snapshot`] taken against a
    /// store with the same layout.
    pub fn restore(store: &ParamStore, t: u64, m: &[f64], v: &[f64]) -> Result<Self> {
        let total = store.total_elems();
        if m.len() != total || v.len() != total {
            return Err(Error::shape(format!(
                "optimizer snapshot holds {} and {} values, store needs {total}",
                m.len(),
                v.len()
            )));
        }
        let mut state = AdamState::new(store);
        let mut offset = 0usize;
        for (i, (_, p)) in store.iter().enumerate() {
            let len = p.value.numel();
            state.m[i].copy_from_slice(&m[offset..offset + len]);
            state.v[i].copy_from_slice(&v[offset..offset + len]);
            offset += len;
        }
        state.t = t;
        Ok(state)
    }

    /// One bias-corrected Adam update over the parameters selected by
    /// `include` (by name). A non-finite gradient in the selection aborts
    /// before any state is touched, so a failed step leaves parameters and
    /// moments exactly as they were.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradBuffer,
        cfg: &AdamConfig,
        include: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let selected: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| include(&p.name))
            .map(|(id, _)| id)
            .collect();
        for &id in &selected {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::numerics(format!(
                    "non-finite gradient for parameter {:?}",
                    store.name(id)
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for id in selected {
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
