//! Per-tensor mixed-precision baseline: binary32 master weights and
//! gradients beside binary16 shadow copies, updated one tensor at a time.

use crate::error::{Error, Result};
use crate::model::{FlatParams, GradSink, ParamId, ParamSource};
use crate::numerics::half::{b16_to_b32, b32_to_b16};
use crate::numerics::Half;
use crate::trainer::{Algorithm, OptimConfig, StateAccounting};

/// Textbook update of one binary32 tensor. `m` holds the first moment
/// (Adam) or the velocity (SGD); `v` is unused for SGD.
pub fn reference_trainer_step(
    params: &mut [f32],
    grads: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    cfg: &OptimConfig,
    t: u64,
) {
    match cfg.algorithm {
        Algorithm::Adam => {
            let c1 = 1.0 - cfg.beta1.powi(t as i32);
            let c2 = 1.0 - cfg.beta2.powi(t as i32);
            for i in 0..params.len() {
                let g = grads[i] / cfg.loss_scale;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let step =
                    (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps) + cfg.weight_decay * params[i];
                params[i] -= cfg.lr * step;
            }
        }
        Algorithm::Sgd => {
            for i in 0..params.len() {
                let g = grads[i] / cfg.loss_scale;
                m[i] = cfg.momentum * m[i] + g;
                params[i] -= cfg.lr * (m[i] + cfg.weight_decay * params[i]);
            }
        }
    }
}

/// One parameter with its own buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct MasterTensor {
    pub name: String,
    pub master: Vec<f32>,
    pub grad: Vec<f32>,
    pub shadow: Vec<Half>,
    pub shadow_grad: Vec<Half>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrainer {
    pub tensors: Vec<MasterTensor>,
    pub step: u64,
}

impl ReferenceTrainer {
    pub fn new(params: &FlatParams<f32>) -> Self {
        let layout = params.layout();
        let tensors = (0..layout.count())
            .map(|id| {
                let src = params.get(id);
                let n = src.len();
                let shadow: Vec<Half> = src.iter().map(|&x| b32_to_b16(x)).collect();
                MasterTensor {
                    name: layout.name(id).to_string(),
                    master: shadow.iter().map(|&h| b16_to_b32(h)).collect(),
                    grad: vec![0.0; n],
                    shadow,
                    shadow_grad: vec![Half::ZERO; n],
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self { tensors, step: 0 }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.shadow_grad.iter_mut().for_each(|g| *g = Half::ZERO);
        }
    }

    /// Copies gradients into the binary32 partners, updates each master
    /// from its shadow, and narrows the result back into the shadow.
    pub fn step(&mut self, cfg: &OptimConfig) -> Result<()> {
        let bad: usize = self
            .tensors
            .iter()
            .map(|t| t.shadow_grad.iter().filter(|g| !g.is_finite()).count())
            .sum();
        if bad > 0 {
            return Err(Error::NonFiniteGradient { count: bad });
        }
        let t = self.step + 1;
        for x in &mut self.tensors {
            for i in 0..x.master.len() {
                x.grad[i] = b16_to_b32(x.shadow_grad[i]);
                x.master[i] = b16_to_b32(x.shadow[i]);
            }
            reference_trainer_step(&mut x.master, &x.grad, &mut x.m, &mut x.v, cfg, t);
            for i in 0..x.master.len() {
                x.shadow[i] = b32_to_b16(x.master[i]);
            }
        }
        self.step = t;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.master.len()).sum()
    }

    /// Shadow params and grads in binary16; masters, binary32 grads and
    /// both moments in binary32.
    pub fn accounting(&self) -> StateAccounting {
        let p = self.param_count();
        StateAccounting {
            half_elems: 2 * p,
            single_elems: 4 * p,
        }
    }
}

impl ParamSource<f32> for ReferenceTrainer {
    fn read_into(&self, id: ParamId, out: &mut [f32]) {
        for (o, &h) in out.iter_mut().zip(&self.tensors[id].shadow) {
            *o = b16_to_b32(h);
        }
    }
}

impl GradSink<f32> for ReferenceTrainer {
    fn accumulate(&mut self, id: ParamId, grad: &[f32]) {
        for (d, &g) in self.tensors[id].shadow_grad.iter_mut().zip(grad) {
            *d = b32_to_b16(b16_to_b32(*d) + g);
        }
    }
}

/// Adam in binary64 over flat parameters, for reference trajectories.
pub struct Adam64 {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam64 {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, p: &mut [f64], g: &[f64], cfg: &OptimConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..p.len() {
            let gi = g[i] / cfg.loss_scale as f64;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
            let upd = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps as f64)
                + cfg.weight_decay as f64 * p[i];
            p[i] -= cfg.lr as f64 * upd;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_identity() {
        let mut p = vec![1.0f32, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        reference_trainer_step(
            &mut p,
            &[0.0, 0.0],
            &mut m,
            &mut v,
            &OptimConfig::adam(0.1),
            1,
        );
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn accounting_model() {
        let layout = std::sync::Arc::new(
            crate::model::ParamLayout::from_specs(&[
                crate::model::ParamSpec {
                    name: "a".into(),
                    shape: vec![3],
                },
                crate::model::ParamSpec {
                    name: "b".into(),
                    shape: vec![2, 2],
                },
            ])
            .unwrap(),
        );
        let r = ReferenceTrainer::new(&FlatParams::<f32>::zeros(layout));
        assert_eq!(r.accounting().bytes(), 7 * 2 * 2 + 4 * 7 * 4);
    }
}
