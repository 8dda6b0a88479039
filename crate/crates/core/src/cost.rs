//! Prefill cost estimates for a decoder-only transformer.
//!
//! Logical FLOPs use the 2-per-multiply-accumulate convention: per token and
//! layer the attention projections cost `8d²` and the gated feed-forward
//! `6·d·d_ff`; attention scores and the weighted value sum add `4·n²·d` per
//! layer. Softmax and normalization FLOPs are ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    /// 2 for FP16, 1 for INT8, 0.5 for INT4.
    pub bytes_per_param: f64,
    /// Overrides the parameter count derived from the shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<f64>,
}

impl ModelConfig {
    /// Vicuna-7B, the language backbone of LLaVA-1.5-7B, in FP16.
    pub fn vicuna_7b() -> Self {
        ModelConfig { layers: 32, hidden: 4096, ffn: 11008, vocab: 32000, bytes_per_param: 2.0, param_count: None }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.layers > 0
            && self.hidden > 0
            && self.ffn > 0
            && self.vocab > 0
            && self.bytes_per_param > 0.0
            && self.bytes_per_param.is_finite()
            && self.param_count.is_none_or(|p| p > 0.0 && p.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("model config fields must be positive: {self:?}")))
        }
    }

    /// Weights of the attention and gated feed-forward blocks plus input and
    /// output embeddings, unless overridden.
    pub fn params(&self) -> f64 {
        self.param_count.unwrap_or_else(|| {
            let (l, d, f, v) = (self.layers as f64, self.hidden as f64, self.ffn as f64, self.vocab as f64);
            l * (4.0 * d * d + 3.0 * d * f) + 2.0 * v * d
        })
    }

    pub fn weight_bytes(&self) -> f64 {
        self.params() * self.bytes_per_param
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillFlops {
    /// Projections and feed-forward, linear in the token count.
    pub linear: f64,
    /// Attention scores and value mixing, quadratic in the token count.
    pub attention: f64,
}

impl PrefillFlops {
    pub fn total(&self) -> f64 {
        self.linear + self.attention
    }
}

pub fn prefill_flops_breakdown(cfg: &ModelConfig, n_tokens: usize) -> PrefillFlops {
    let (l, d, f, n) = (cfg.layers as f64, cfg.hidden as f64, cfg.ffn as f64, n_tokens as f64);
    PrefillFlops { linear: n * l * (8.0 * d * d + 6.0 * d * f), attention: l * 4.0 * n * n * d }
}

/// Logical FLOPs of one prefill pass over `n_tokens` tokens.
pub fn prefill_flops(cfg: &ModelConfig, n_tokens: usize) -> f64 {
    prefill_flops_breakdown(cfg, n_tokens).total()
}

/// Bytes held by the key and value caches after prefilling `n_tokens`.
pub fn kv_cache_bytes(cfg: &ModelConfig, n_tokens: usize) -> Result<f64> {
    if n_tokens == 0 {
        return Err(Error::InvalidParams("token count must be at least 1".into()));
    }
    Ok(2.0 * cfg.layers as f64 * n_tokens as f64 * cfg.hidden as f64 * cfg.bytes_per_param)
}

/// Fraction of prefill FLOPs saved by shrinking the visual tokens from
/// `visual_before` to `visual_after`, with `text` text tokens either way.
pub fn flops_reduction(cfg: &ModelConfig, visual_before: usize, visual_after: usize, text: usize) -> f64 {
    1.0 - prefill_flops(cfg, visual_after + text) / prefill_flops(cfg, visual_before + text)
}
