//! Stateless counter-based random numbers.
//!
//! Each draw is a pure function of `(seed, index)`, so dropout masks do not
//! depend on evaluation order or thread count.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finaliser applied to `seed + index * golden_gamma` (mod 2^64).
#[inline]
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` from the top 53 bits of [`splitmix64`].
#[inline]
pub fn rand_uniform(seed: u64, index: u64) -> f64 {
    (splitmix64(seed, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A seed with index-addressed draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CounterRng {
    pub seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    #[inline]
    pub fn uniform(&self, index: u64) -> f64 {
        rand_uniform(self.seed, index)
    }

    #[inline]
    pub fn bits(&self, index: u64) -> u64 {
        splitmix64(self.seed, index)
    }

    /// Integer in `[0, n)`. Uses the multiply-shift map, bias below 2^-32 for
    /// the small ranges used here.
    pub fn below(&self, index: u64, n: u64) -> u64 {
        ((self.bits(index) as u128 * n as u128) >> 64) as u64
    }

    /// Independent stream for a named call site (a dropout layer, a data
    /// generator). Derived by hashing the site id under this seed.
    pub fn fork(&self, site: u64) -> CounterRng {
        CounterRng::new(splitmix64(self.seed ^ 0xD1B5_4A32_D192_ED03, site))
    }
}

/// Seed for the dropout site `site` in training step `step`.
pub fn dropout_seed(base: u64, step: u64, site: u64) -> u64 {
    CounterRng::new(base).fork(step).fork(site).seed
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference evaluation with u128 arithmetic reduced mod 2^64.
    fn reference(seed: u64, index: u64) -> f64 {
        const M: u128 = 1 << 64;
        let mut z = (seed as u128 + (index as u128 * 0x9E37_79B9_7F4A_7C15u128) % M) % M;
        z = ((z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9u128) % M;
        z = ((z ^ (z >> 27)) * 0x94D0_49BB_1331_11EBu128) % M;
        z ^= z >> 31;
        ((z >> 11) as f64) / 9_007_199_254_740_992.0
    }

    #[test]
    fn matches_reference() {
        assert_eq!(rand_uniform(0, 0), 0.0);
        assert_eq!(reference(0, 0), 0.0);
        for &(s, i) in &[
            (0u64, 1u64),
            (1, 0),
            (42, 7),
            (u64::MAX, u64::MAX),
            (123_456_789, 1 << 40),
        ] {
            assert_eq!(rand_uniform(s, i), reference(s, i), "seed {s} index {i}");
        }
    }

    #[test]
    fn known_value() {
        // splitmix64 with state 0 after one increment: the canonical first
        // output 0xE220A8397B1DCDAF.
        assert_eq!(splitmix64(0, 1), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn pure_and_in_range() {
        let n = 1_000_000u64;
        let mut sum = 0.0;
        for i in 0..n {
            let u = rand_uniform(7, i);
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
        assert_eq!(rand_uniform(7, 123), rand_uniform(7, 123));
    }

    #[test]
    fn below_is_bounded() {
        let r = CounterRng::new(3);
        assert!((0..10_000).all(|i| r.below(i, 5) < 5));
    }
}
