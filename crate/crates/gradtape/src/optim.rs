use crate::params::{ParamId, ParamStore, Reader};
use crate::tensor::Tensor;

const STATE_MAGIC: &[u8; 8] = b"GTADAMW1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect::<Vec<_>>();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Frozen parameters and parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        let step_size = (c.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            let Some(g) = g else { continue };
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                p[j] -= c.lr * c.weight_decay * p[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + c.eps);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<(), String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != STATE_MAGIC {
            return Err("bad optimizer state magic".into());
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        if count != self.m.len() {
            return Err(format!("optimizer state for {count} parameters, model has {}", self.m.len()));
        }
        for i in 0..count {
            let n = r.u32()? as usize;
            if n != self.m[i].len() {
                return Err(format!("optimizer state size mismatch for parameter {i}"));
            }
            let raw = r.take(n * 8)?;
            let vals: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            self.m[i] = vals[..n].to_vec();
            self.v[i] = vals[n..].to_vec();
        }
        self.step = step;
        Ok(())
    }
}
