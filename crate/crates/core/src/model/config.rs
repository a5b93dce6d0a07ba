use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::embedding::EmbeddingConfig;
use crate::kernels::layernorm::DEFAULT_EPS;

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

/// Encoder-decoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Only the pre-LayerNorm arrangement is implemented.
    #[serde(default = "default_true")]
    pub pre_ln: bool,
    /// Output projection shares the token embedding.
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub learned_positional: bool,
    /// Token embedding multiplier; `sqrt(d_model)` when absent.
    #[serde(default)]
    pub emb_scale: Option<f32>,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Small defaults for tests and examples.
    pub fn tiny(n_enc: usize, n_dec: usize, d_model: usize, vocab: usize, max_len: usize) -> Self {
        Self {
            n_enc,
            n_dec,
            d_model,
            n_heads: if d_model.is_multiple_of(2) { 2 } else { 1 },
            d_ff: 2 * d_model,
            vocab,
            max_len,
            pre_ln: true,
            tie_embeddings: true,
            learned_positional: false,
            emb_scale: None,
            ln_eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !self.pre_ln {
            return bad("only pre_ln = true is supported".into());
        }
        if self.n_enc == 0 || self.n_dec == 0 {
            return bad("n_enc and n_dec must be >= 1".into());
        }
        if self.d_model < 2 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be >= 2 and divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be >= 1".into());
        }
        if self.ln_eps < 0.0 {
            return bad(format!("ln_eps {} < 0", self.ln_eps));
        }
        self.embedding().validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn scale(&self) -> f32 {
        self.emb_scale.unwrap_or((self.d_model as f32).sqrt())
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            scale: self.scale(),
            vocab: self.vocab,
            max_len: self.max_len,
            learned_positional: self.learned_positional,
        }
    }
}

/// Fixed sinusoidal table `[max_len x d]`: even columns `sin(t / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_len * d];
    for t in 0..max_len {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            out[t * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let mut c = ModelConfig::tiny(1, 1, 8, 11, 5);
        assert!(c.validate().is_ok());
        assert_eq!(c.scale(), 8f32.sqrt());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.pre_ln = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_defaults() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"n_enc":2,"n_dec":2,"d_model":32,"n_heads":4,"d_ff":64,"vocab":32,"max_len":16}"#,
        )
        .unwrap();
        assert!(c.pre_ln && c.tie_embeddings && !c.learned_positional);
        assert_eq!(c.ln_eps, 1e-5);
    }

    #[test]
    fn positions() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(&p[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((p[4] - 1f64.sin()).abs() < 1e-15);
        assert!((p[7] - (0.01f64).cos()).abs() < 1e-15);
    }
}
