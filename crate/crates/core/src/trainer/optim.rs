//! Single-pass mixed-precision Adam and SGD over a [`Workspace`].
//!
//! Each element is widened to binary32, updated, and narrowed back with
//! RNE. The pass is split into fixed element ranges; elements are
//! independent, so results do not depend on the thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::half::{b16_to_b32, b32_to_b16};
use crate::numerics::Half;
use crate::par;

use super::workspace::{Workspace, CHUNK};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
    #[serde(default)]
    pub weight_decay: f32,
    /// SGD only.
    #[serde(default)]
    pub momentum: f32,
    /// Gradients arrive multiplied by this; must be a power of two >= 1.
    #[serde(default = "default_scale")]
    pub loss_scale: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}
fn default_scale() -> f32 {
    1.0
}

impl OptimConfig {
    pub fn adam(lr: f32) -> Self {
        Self {
            algorithm: Algorithm::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.0,
            loss_scale: 1.0,
        }
    }

    pub fn sgd(lr: f32, momentum: f32) -> Self {
        Self {
            algorithm: Algorithm::Sgd,
            momentum,
            ..Self::adam(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        for (n, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} {b} outside [0, 1)"));
            }
        }
        if !(self.eps >= 0.0 && self.weight_decay >= 0.0) {
            return bad("eps and weight_decay must be >= 0".into());
        }
        let s = self.loss_scale;
        if !(s >= 1.0 && s.is_finite() && s.to_bits() & 0x007F_FFFF == 0) {
            return bad(format!("loss_scale {s} must be a power of two >= 1"));
        }
        Ok(())
    }
}

/// Per-step scalars shared by every element of an Adam update.
#[derive(Clone, Copy, Debug)]
struct AdamScalars {
    lr: f32,
    b1: f32,
    b2: f32,
    eps: f32,
    wd: f32,
    inv_scale: f32,
    bc1: f32,
    bc2: f32,
}

#[inline]
fn adam_element(p: &mut Half, g: Half, m: &mut f32, v: &mut f32, s: &AdamScalars) {
    let mut p32 = b16_to_b32(*p);
    let g32 = b16_to_b32(g) * s.inv_scale;
    *m = s.b1 * *m + (1.0 - s.b1) * g32;
    *v = s.b2 * *v + (1.0 - s.b2) * g32 * g32;
    let m_hat = *m / s.bc1;
    let v_hat = *v / s.bc2;
    p32 -= s.lr * (m_hat / (v_hat.sqrt() + s.eps) + s.wd * p32);
    *p = b32_to_b16(p32);
}

#[inline]
fn sgd_element(p: &mut Half, g: Half, vel: &mut f32, lr: f32, mu: f32, wd: f32, inv_scale: f32) {
    let mut p32 = b16_to_b32(*p);
    let g32 = b16_to_b32(g) * inv_scale;
    *vel = mu * *vel + g32;
    p32 -= lr * (*vel + wd * p32);
    *p = b32_to_b16(p32);
}

/// Number of non-finite gradient elements. Unscaling by a power of two
/// `>= 1` cannot create or remove non-finite values.
pub fn count_non_finite(grads: &[Half]) -> usize {
    par::map_blocks(grads.len(), CHUNK, |r| {
        grads[r].iter().filter(|g| !g.is_finite()).count()
    })
    .into_iter()
    .sum()
}

fn ensure_moments(ws: &mut Workspace, second: bool) {
    let n = ws.len();
    if ws.m.len() != n {
        ws.m = vec![0.0; n];
    }
    if second && ws.v.len() != n {
        ws.v = vec![0.0; n];
    }
}

/// One Adam update with bias correction at step `t >= 1`.
/// A non-finite gradient leaves the workspace untouched.
pub fn adam_step(ws: &mut Workspace, cfg: &OptimConfig, t: u64) -> Result<()> {
    assert!(t >= 1, "Adam steps are numbered from 1");
    let bad = count_non_finite(&ws.grads16);
    if bad > 0 {
        return Err(Error::NonFiniteGradient { count: bad });
    }
    ensure_moments(ws, true);
    let s = AdamScalars {
        lr: cfg.lr,
        b1: cfg.beta1,
        b2: cfg.beta2,
        eps: cfg.eps,
        wd: cfg.weight_decay,
        inv_scale: 1.0 / cfg.loss_scale,
        bc1: 1.0 - cfg.beta1.powi(t as i32),
        bc2: 1.0 - cfg.beta2.powi(t as i32),
    };
    let grads = &ws.grads16;
    par::for_each_row3(
        &mut ws.params16,
        CHUNK,
        &mut ws.m,
        CHUNK,
        &mut ws.v,
        CHUNK,
        |c, p, m, v| {
            let g = &grads[c * CHUNK..c * CHUNK + p.len()];
            for i in 0..p.len() {
                adam_element(&mut p[i], g[i], &mut m[i], &mut v[i], &s);
            }
        },
    );
    Ok(())
}

/// One SGD-with-momentum update; the velocity lives in `ws.m`.
pub fn sgd_step(ws: &mut Workspace, cfg: &OptimConfig) -> Result<()> {
    let bad = count_non_finite(&ws.grads16);
    if bad > 0 {
        return Err(Error::NonFiniteGradient { count: bad });
    }
    ensure_moments(ws, false);
    let (lr, mu, wd, inv) = (cfg.lr, cfg.momentum, cfg.weight_decay, 1.0 / cfg.loss_scale);
    let grads = &ws.grads16;
    par::for_each_row2(&mut ws.params16, CHUNK, &mut ws.m, CHUNK, |c, p, vel| {
        let g = &grads[c * CHUNK..c * CHUNK + p.len()];
        for i in 0..p.len() {
            sgd_element(&mut p[i], g[i], &mut vel[i], lr, mu, wd, inv);
        }
    });
    Ok(())
}

/// Applies the configured algorithm at step `ws.step + 1` and advances the
/// counter on success.
pub fn optimizer_step(ws: &mut Workspace, cfg: &OptimConfig) -> Result<()> {
    match cfg.algorithm {
        Algorithm::Adam => adam_step(ws, cfg, ws.step + 1)?,
        Algorithm::Sgd => sgd_step(ws, cfg)?,
    }
    ws.step += 1;
    Ok(())
}

/// Trainer-owned state by element width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StateAccounting {
    pub half_elems: usize,
    pub single_elems: usize,
}

impl StateAccounting {
    pub fn bytes(&self) -> usize {
        2 * self.half_elems + 4 * self.single_elems
    }

    /// Workspace layout for `p` parameters: binary16 params and grads,
    /// binary32 moments.
    pub fn workspace(p: usize, algorithm: Algorithm) -> Self {
        let moments = match algorithm {
            Algorithm::Adam => 2,
            Algorithm::Sgd => 1,
        };
        Self {
            half_elems: 2 * p,
            single_elems: moments * p,
        }
    }
}

impl Workspace {
    /// What this workspace currently holds.
    pub fn accounting(&self) -> StateAccounting {
        StateAccounting {
            half_elems: self.params16.len() + self.grads16.len(),
            single_elems: self.m.len() + self.v.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::workspace_pack;

    fn scalar(p: f32, g: f32) -> Workspace {
        let mut ws = workspace_pack([("p", &[1usize][..], &[p][..])]).unwrap();
        ws.grads16[0] = b32_to_b16(g);
        ws
    }

    #[test]
    fn adam_scalar_first_step() {
        let mut ws = scalar(1.0, 0.1);
        adam_step(&mut ws, &OptimConfig::adam(0.01), 1).unwrap();
        // m_hat = g and v_hat = g^2, so the step is lr * sign(g).
        assert_eq!(ws.params16[0], b32_to_b16(0.99));
        let g = b16_to_b32(b32_to_b16(0.1)) as f64;
        assert!((ws.m[0] as f64 - 0.1 * g).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let x: Vec<f32> = (0..9000).map(|i| (i as f32).sin()).collect();
        let mut ws = workspace_pack([("x", &[9000usize][..], &x[..])]).unwrap();
        let before = ws.params16.clone();
        adam_step(&mut ws, &OptimConfig::adam(0.1), 1).unwrap();
        assert_eq!(ws.params16, before);
        assert!(ws.m.iter().chain(&ws.v).all(|&v| v == 0.0));
        sgd_step(&mut ws, &OptimConfig::sgd(0.1, 0.0)).unwrap();
        assert_eq!(ws.params16, before);
    }

    #[test]
    fn plain_sgd() {
        let mut ws = scalar(1.0, 0.5);
        sgd_step(&mut ws, &OptimConfig::sgd(0.1, 0.0)).unwrap();
        assert_eq!(ws.params16[0], b32_to_b16(0.95));
    }

    #[test]
    fn non_finite_skips() {
        let mut ws = scalar(1.0, 0.5);
        adam_step(&mut ws, &OptimConfig::adam(0.1), 1).unwrap();
        let before = ws.clone();
        ws.grads16[0] = Half::INFINITY;
        let mut expect = before.clone();
        expect.grads16[0] = Half::INFINITY;
        assert_eq!(
            adam_step(&mut ws, &OptimConfig::adam(0.1), 2),
            Err(Error::NonFiniteGradient { count: 1 })
        );
        assert_eq!(ws, expect);
        ws.grads16[0] = Half::NAN;
        assert!(sgd_step(&mut ws, &OptimConfig::sgd(0.1, 0.9)).is_err());
        assert_eq!(ws.params16, before.params16);
        assert_eq!(ws.m, before.m);
    }

    #[test]
    fn loss_scale_is_undone() {
        let mut a = scalar(1.0, 0.5);
        let mut b = scalar(1.0, 4.0);
        sgd_step(&mut a, &OptimConfig::sgd(0.1, 0.0)).unwrap();
        sgd_step(
            &mut b,
            &OptimConfig {
                loss_scale: 8.0,
                ..OptimConfig::sgd(0.1, 0.0)
            },
        )
        .unwrap();
        assert_eq!(a.params16, b.params16);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::adam(1e-3).validate().is_ok());
        assert!(OptimConfig {
            loss_scale: 3.0,
            ..OptimConfig::adam(1e-3)
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            beta2: 1.0,
            ..OptimConfig::adam(1e-3)
        }
        .validate()
        .is_err());
        assert!(OptimConfig::adam(0.0).validate().is_err());
    }

    #[test]
    fn accounting() {
        let mut ws = scalar(1.0, 0.1);
        adam_step(&mut ws, &OptimConfig::adam(0.01), 1).unwrap();
        assert_eq!(
            ws.accounting(),
            StateAccounting::workspace(1, Algorithm::Adam)
        );
        assert_eq!(ws.accounting().bytes(), 2 * 2 + 2 * 4);
    }
}
