//! Decoupled-weight-decay adaptive-moment optimizer. Updates apply only to
//! parameters that received gradients this step, so untouched heads stay
//! bit-identical through training they take no part in.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::{Buf, Dtype, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: usize,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// Serialize moments as named tensors for checkpoint embedding.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(
            "opt.t".to_string(),
            Tensor::from_f64(vec![1], vec![self.t as f64]).expect("finite"),
        );
        for (k, v) in &self.m {
            out.insert(
                format!("opt.m.{k}"),
                Tensor::from_f64(vec![v.len()], v.clone()).expect("finite"),
            );
        }
        for (k, v) in &self.v {
            out.insert(
                format!("opt.v.{k}"),
                Tensor::from_f64(vec![v.len()], v.clone()).expect("finite"),
            );
        }
        out
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>) -> Result<AdamState> {
        let mut st = AdamState::default();
        if let Some(t) = map.get("opt.t") {
            st.t = t.scalar() as usize;
        }
        for (k, t) in map {
            if let Some(name) = k.strip_prefix("opt.m.") {
                st.m.insert(name.to_string(), t.to_f64_vec());
            } else if let Some(name) = k.strip_prefix("opt.v.") {
                st.v.insert(name.to_string(), t.to_f64_vec());
            }
        }
        Ok(st)
    }
}

impl AdamW {
    /// One optimizer step over the parameters present in `grads`.
    pub fn apply(
        &self,
        model: &mut ModelBundle,
        grads: &BTreeMap<String, Vec<f64>>,
        state: &mut AdamState,
    ) -> Result<()> {
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let param = model
                .get_param(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter '{name}'")))?;
            if param.len() != g.len() {
                return Err(Error::Shape {
                    op: "adam-apply",
                    lhs: param.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let m = state
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = state
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut theta = param.to_f64_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * theta[i]);
            }
            let buf = match param.dtype() {
                Dtype::F32 => Buf::F32(theta.iter().map(|x| *x as f32).collect()),
                Dtype::F64 => Buf::F64(theta),
            };
            let new = Tensor::new(param.shape().to_vec(), buf)?;
            model.set_param(name, new)?;
        }
        Ok(())
    }
}
