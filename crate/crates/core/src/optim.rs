//! Parameter updates: plain gradient descent or Adam.
//!
//! Adam keeps first and second moments per parameter group. Embedding tables
//! are updated lazily: only rows present in a gradient get their moments
//! touched, which keeps state proportional to the vocabulary actually seen
//! rather than to the hash table size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderGrad, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    dense: BTreeMap<String, Moments>,
    rows: BTreeMap<String, BTreeMap<u32, Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            dense: BTreeMap::new(),
            rows: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Starts a new update step; call once before the updates of each step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    fn adam(&self, moments: &mut Moments, params: &mut [f64], grad: &[f64], lr: f64) {
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut moments.m).zip(&mut moments.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }

    pub fn update_dense(&mut self, key: &str, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len(), "gradient shape for {key}");
        match self.kind {
            OptimizerKind::Sgd => crate::math::axpy(params, -lr, grad),
            OptimizerKind::Adam => {
                let mut moments = self
                    .dense
                    .remove(key)
                    .unwrap_or_else(|| Moments::zeros(params.len()));
                self.adam(&mut moments, params, grad, lr);
                self.dense.insert(key.to_owned(), moments);
            }
        }
    }

    /// Updates the rows of a row-major table that appear in `grads`.
    pub fn update_rows(
        &mut self,
        key: &str,
        table: &mut [f64],
        dim: usize,
        grads: &BTreeMap<u32, Vec<f64>>,
        lr: f64,
    ) {
        let mut state = self.rows.remove(key).unwrap_or_default();
        for (&row, g) in grads {
            let start = row as usize * dim;
            let params = &mut table[start..start + dim];
            match self.kind {
                OptimizerKind::Sgd => crate::math::axpy(params, -lr, g),
                OptimizerKind::Adam => {
                    let moments = state.entry(row).or_insert_with(|| Moments::zeros(dim));
                    self.adam(moments, params, g, lr);
                }
            }
        }
        if self.kind == OptimizerKind::Adam {
            self.rows.insert(key.to_owned(), state);
        }
    }

    pub fn update_encoder(&mut self, key: &str, params: &mut EncoderParams, grad: &EncoderGrad, lr: f64) {
        let dim = params.dim();
        self.update_rows(&format!("{key}.embedding"), params.embedding_mut(), dim, &grad.embedding, lr);
        self.update_dense(&format!("{key}.projection"), params.projection_mut(), &grad.projection, lr);
    }

    /// Stores the optimizer state as `opt.*` tensors plus a step counter in
    /// the checkpoint metadata.
    pub fn push_to(&self, ckpt: &mut Checkpoint) {
        for (key, mo) in &self.dense {
            ckpt.push(format!("opt.dense.{key}.m"), vec![mo.m.len()], mo.m.clone());
            ckpt.push(format!("opt.dense.{key}.v"), vec![mo.v.len()], mo.v.clone());
        }
        for (key, rows) in &self.rows {
            let dim = rows.values().next().map_or(0, |m| m.m.len());
            let ids: Vec<f64> = rows.keys().map(|&r| r as f64).collect();
            let m: Vec<f64> = rows.values().flat_map(|mo| mo.m.iter().copied()).collect();
            let v: Vec<f64> = rows.values().flat_map(|mo| mo.v.iter().copied()).collect();
            ckpt.push(format!("opt.rows.{key}.ids"), vec![ids.len()], ids);
            ckpt.push(format!("opt.rows.{key}.m"), vec![rows.len(), dim], m);
            ckpt.push(format!("opt.rows.{key}.v"), vec![rows.len(), dim], v);
        }
    }

    pub fn state_meta(&self) -> serde_json::Value {
        serde_json::json!({ "kind": self.kind, "step": self.step })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, meta: &serde_json::Value) -> Result<Self> {
        let bad = |message: String| Error::BadArtifact {
            path: Default::default(),
            message,
        };
        let kind = serde_json::from_value(meta["kind"].clone()).map_err(|e| bad(e.to_string()))?;
        let step = meta["step"].as_u64().ok_or_else(|| bad("optimizer step missing".into()))?;
        let mut opt = Self::new(kind);
        opt.step = step;
        for t in &ckpt.tensors {
            if let Some(key) = t.name.strip_prefix("opt.dense.").and_then(|k| k.strip_suffix(".m")) {
                let v = ckpt.require(&format!("opt.dense.{key}.v"))?;
                opt.dense.insert(
                    key.to_owned(),
                    Moments {
                        m: t.data.clone(),
                        v: v.data.clone(),
                    },
                );
            } else if let Some(key) = t.name.strip_prefix("opt.rows.").and_then(|k| k.strip_suffix(".ids")) {
                let m = ckpt.require(&format!("opt.rows.{key}.m"))?;
                let v = ckpt.require(&format!("opt.rows.{key}.v"))?;
                let dim = m.shape.get(1).copied().unwrap_or(0);
                let rows = t
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| {
                        (
                            id as u32,
                            Moments {
                                m: m.data[i * dim..(i + 1) * dim].to_vec(),
                                v: v.data[i * dim..(i + 1) * dim].to_vec(),
                            },
                        )
                    })
                    .collect();
                opt.rows.insert(key.to_owned(), rows);
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_plain_descent() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        opt.tick();
        let mut p = vec![1.0, 2.0];
        opt.update_dense("w", &mut p, &[0.5, -1.0], 0.1);
        assert_eq!(p, vec![0.95, 2.1]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.tick();
        let mut p = vec![1.0, 1.0, 1.0];
        opt.update_dense("w", &mut p, &[3.0, -0.01, 0.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-5);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn lazy_rows_leave_untouched_rows_alone() {
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        let mut table = vec![0.0; 6];
        let grads = BTreeMap::from([(1u32, vec![1.0, -1.0])]);
        opt.tick();
        opt.update_rows("e", &mut table, 2, &grads, 0.5);
        assert_eq!(&table[..2], &[0.0, 0.0]);
        assert!((table[2] + 0.5).abs() < 1e-6 && (table[3] - 0.5).abs() < 1e-6);
        assert_eq!(&table[4..], &[0.0, 0.0]);
    }

    #[test]
    fn state_survives_a_checkpoint() {
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        let mut table = vec![0.0; 6];
        let mut w = vec![0.0; 2];
        for _ in 0..3 {
            opt.tick();
            opt.update_rows("e", &mut table, 2, &BTreeMap::from([(2u32, vec![0.3, 0.1])]), 0.1);
            opt.update_dense("w", &mut w, &[1.0, 2.0], 0.1);
        }
        let mut ckpt = Checkpoint::new("t", "");
        opt.push_to(&mut ckpt);
        let back = Optimizer::from_checkpoint(&ckpt, &opt.state_meta()).unwrap();
        assert_eq!(back, opt);
    }
}
