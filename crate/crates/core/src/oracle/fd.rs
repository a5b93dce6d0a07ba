//! Central finite differences in binary64.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Step relative to `max(1, |x_i|)`.
    pub h_rel: f64,
    pub tolerance_rel: f64,
    /// Elements whose ReLU input lies within this distance of zero are not
    /// compared.
    pub kink_exclusion_radius: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h_rel: 1e-6,
            tolerance_rel: 1e-5,
            kink_exclusion_radius: 1e-4,
        }
    }
}

/// Floor on the denominator of [`rel_err`], so that gradients which are
/// zero up to rounding compare by absolute error.
pub const REL_FLOOR: f64 = 1e-3;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`, with
/// `h = h_rel * max(1, |x_i|)`.
pub fn fd_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], cfg: &FdConfig) -> Vec<f64> {
    assert!(cfg.h_rel > 0.0, "h_rel must be positive");
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = cfg.h_rel * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest [`rel_err`] over the elements where `include` holds.
pub fn max_rel_err(a: &[f64], b: &[f64], include: impl Fn(usize) -> bool) -> f64 {
    assert_eq!(a.len(), b.len());
    (0..a.len())
        .filter(|&i| include(i))
        .map(|i| rel_err(a[i], b[i]))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = fd_grad(
            |x| x.iter().map(|v| v * v).sum(),
            &[3.0],
            &FdConfig::default(),
        );
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant() {
        let g = fd_grad(|_| 4.2, &[1.0, -2.0, 1e6], &FdConfig::default());
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn floor_applies() {
        assert!(rel_err(1e-9, 2e-9) < 1e-5);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
