//! Adam with global-norm gradient clipping; state round-trips through checkpoints.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip threshold on the global gradient norm; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, max_grad_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the (pre-clipping) global gradient norm.
    pub fn step(&mut self, grads: &GradStore, params: &[(String, Var)]) -> Result<f64> {
        let mut gs = Vec::with_capacity(params.len());
        let mut sq = 0f64;
        for (name, var) in params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                gs.push((name, var, g.clone()));
            }
        }
        let norm = sq.sqrt();
        let clip = match self.max_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var, g) in gs {
            let g = if clip != 1.0 { (g * clip)? } else { g };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            if self.lr != 0.0 {
                let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
                var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            }
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// State as named tensors (`t`, `m.<param>`, `v.<param>`).
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        out.insert("t".to_string(), Tensor::new(&[self.t as f64], &Device::Cpu)?);
        for (k, m) in &self.m {
            out.insert(format!("m.{k}"), m.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("v.{k}"), v.clone());
        }
        Ok(out)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.t = 0;
        for (k, t) in state {
            if k == "t" {
                self.t = t.to_dtype(DType::F64)?.to_vec1::<f64>()?[0] as u64;
            } else if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        Ok(())
    }
}
