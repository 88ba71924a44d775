//! SGD with momentum and Adam over named candle variables.
//!
//! Both follow the usual PyTorch update rules. Parameters with no gradient in
//! a step are left untouched and their state does not advance.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::{Error, Result};

/// `g ← ∇ + wd·θ; b ← μ·b + g; θ ← θ − lr·b` (first step `b = g`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    bufs: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            bufs: BTreeMap::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a Var)>, grads: &GradStore) -> Result<()> {
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            // gradients can carry their own graph; keep only the values
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor().detach() * self.weight_decay)?)?;
            }
            let buf = match self.bufs.get(name) {
                Some(b) if self.momentum != 0.0 => ((b * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor().detach() - (&buf * self.lr)?)?)?;
            if self.momentum != 0.0 {
                self.bufs.insert(name.to_string(), buf);
            }
        }
        Ok(())
    }

    /// Momentum buffers keyed `<prefix><param>`.
    pub fn state(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.bufs
            .iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) {
        self.bufs = tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect();
    }
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a Var)>, grads: &GradStore) -> Result<()> {
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            let g = &g.detach();
            let (m, v, t) = match self.slots.get(name) {
                Some(s) => (s.m.clone(), s.v.clone(), s.t),
                None => (g.zeros_like()?, g.zeros_like()?, 0),
            };
            let t = t + 1;
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / (1.0 - self.beta1.powi(t as i32)))?;
            let v_hat = (&v / (1.0 - self.beta2.powi(t as i32)))?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.slots.insert(name.to_string(), AdamSlot { m, v, t });
        }
        Ok(())
    }

    /// Moments and step counts keyed `<prefix><param>.{m,v,t}`.
    pub fn state(&self, prefix: &str) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (n, s) in &self.slots {
            out.insert(format!("{prefix}{n}.m"), s.m.clone());
            out.insert(format!("{prefix}{n}.v"), s.v.clone());
            out.insert(format!("{prefix}{n}.t"), Tensor::new(&[s.t as f64], s.m.device())?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let mut slots = BTreeMap::new();
        for (k, t) in tensors {
            let Some(rest) = k.strip_prefix(prefix) else { continue };
            let Some(name) = rest.strip_suffix(".t") else { continue };
            let get = |suffix: &str| {
                tensors
                    .get(&format!("{prefix}{name}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("optimizer state lacks {name}.{suffix}")))
            };
            let step = t.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let step = *step
                .first()
                .ok_or_else(|| Error::Format(format!("empty step count for {name}")))?;
            slots.insert(
                name.to_string(),
                AdamSlot {
                    m: get("m")?,
                    v: get("v")?,
                    t: step as u64,
                },
            );
        }
        self.slots = slots;
        Ok(())
    }
}
