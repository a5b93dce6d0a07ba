//! Counter-based draws, written out again so the reference does not rely
//! on the fused path for its dropout masks.

fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform(seed: u64, index: u64) -> f64 {
    (mix(seed, index) >> 11) as f64 / 9_007_199_254_740_992.0
}

fn fork(seed: u64, site: u64) -> u64 {
    mix(seed ^ 0xD1B5_4A32_D192_ED03, site)
}

/// Seed of dropout site `site` at training step `step`.
pub fn site_seed(base: u64, step: u64, site: u64) -> u64 {
    fork(fork(base, step), site)
}

/// Multiplier per element: `1/(1-p)` where kept, `0` where dropped.
pub fn dropout_factors(seed: u64, p: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            if p == 0.0 || uniform(seed, i as u64) >= p {
                1.0 / (1.0 - p)
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::dropout::DropoutMask;
    use crate::numerics::rng::dropout_seed;

    #[test]
    fn agrees_with_fused_masks() {
        let seed = site_seed(3, 7, 10_012);
        assert_eq!(seed, dropout_seed(3, 7, 10_012));
        let f = dropout_factors(seed, 0.3, 500);
        let m = DropoutMask::generate(seed, 0.3, 500).unwrap();
        for (i, &v) in f.iter().enumerate() {
            assert_eq!(v != 0.0, m.kept(i));
        }
    }
}
