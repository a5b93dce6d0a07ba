use crate::error::{Error, Result};
use crate::numerics::rng::rand_uniform;

/// Packed per-element bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    words: Vec<u64>,
    len: usize,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = Self {
            words: vec![u64::MAX; len.div_ceil(64)],
            len,
        };
        m.clear_tail();
        m
    }

    pub fn from_fn(len: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut words = vec![0u64; len.div_ceil(64)];
        for (w, word) in words.iter_mut().enumerate() {
            let base = w * 64;
            for b in 0..64.min(len - base) {
                if f(base + b) {
                    *word |= 1 << b;
                }
            }
        }
        Self { words, len }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::from_fn(bits.len(), |i| bits[i])
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        let (w, b) = (i / 64, i % 64);
        if v {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    fn clear_tail(&mut self) {
        if !self.len.is_multiple_of(64) {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << (self.len % 64)) - 1;
            }
        }
    }
}

/// Dropout keep-mask: bit set means the element survives.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: BitMask,
    pub p: f64,
}

pub fn check_drop_prob(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "dropout probability {p} outside [0, 1)"
        )))
    }
}

impl DropoutMask {
    /// Element `i` is kept iff `rand_uniform(seed, i) >= p`.
    pub fn generate(seed: u64, p: f64, len: usize) -> Result<Self> {
        check_drop_prob(p)?;
        let keep = if p == 0.0 {
            BitMask::ones(len)
        } else {
            BitMask::from_fn(len, |i| rand_uniform(seed, i as u64) >= p)
        };
        Ok(Self { keep, p })
    }

    pub fn keep_all(len: usize) -> Self {
        Self {
            keep: BitMask::ones(len),
            p: 0.0,
        }
    }

    pub fn from_bools(bits: &[bool], p: f64) -> Result<Self> {
        check_drop_prob(p)?;
        Ok(Self {
            keep: BitMask::from_bools(bits),
            p,
        })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    #[inline]
    pub fn kept(&self, i: usize) -> bool {
        self.keep.get(i)
    }

    /// Inverted-dropout scale 1/(1-p).
    pub fn scale(&self) -> f64 {
        1.0 / (1.0 - self.p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_zero_keeps_everything() {
        let m = DropoutMask::generate(9, 0.0, 130).unwrap();
        assert_eq!(m.keep.count_ones(), 130);
        assert_eq!(m.scale(), 1.0);
    }

    #[test]
    fn mask_follows_rng() {
        let m = DropoutMask::generate(5, 0.3, 200).unwrap();
        for i in 0..200 {
            assert_eq!(m.kept(i), rand_uniform(5, i as u64) >= 0.3);
        }
    }

    #[test]
    fn rejects_p_one() {
        assert!(DropoutMask::generate(0, 1.0, 4).is_err());
        assert!(DropoutMask::generate(0, -0.1, 4).is_err());
    }

    #[test]
    fn bitmask_ops() {
        let mut b = BitMask::zeros(70);
        b.set(69, true);
        b.set(3, true);
        assert!(b.get(69) && b.get(3) && !b.get(4));
        assert_eq!(b.count_ones(), 2);
        b.set(3, false);
        assert_eq!(b.count_ones(), 1);
        assert_eq!(BitMask::ones(70).count_ones(), 70);
    }
}
