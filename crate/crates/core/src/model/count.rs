//! Analytic parameter and multiply-accumulate counts.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::moe::RoutingStrategy;

/// Parameter breakdown. Per-layer fields count one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embeddings: u64,
    pub attention_per_layer: u64,
    pub layer_norms_per_layer: u64,
    /// One activated FFN (one expert for MoE).
    pub ffn_per_layer: u64,
    pub gate_per_layer: u64,
    pub heads: u64,
    pub total: u64,
}

/// Multiply-accumulates for one token. Per-layer fields count one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub attention_per_layer: u64,
    pub ffn_per_layer: u64,
    /// Gate projection charged to every token (an upper bound, since the gate
    /// runs once per sentence).
    pub gate_per_layer: u64,
    pub total: u64,
}

fn activated_width(config: &ModelConfig) -> u64 {
    config.moe.as_ref().map_or(config.ffn_hidden, |m| m.expert_dim) as u64
}

fn gate_width(config: &ModelConfig) -> u64 {
    match &config.moe {
        Some(m) if m.routing == RoutingStrategy::Gate => m.experts as u64,
        _ => 0,
    }
}

/// Parameters used to compute one token's output: embeddings, attention and
/// layer norms, one expert (or the dense FFN), the gate if any, and the heads.
pub fn count_effective_params(config: &ModelConfig) -> ParamCount {
    let d = config.embed_dim as u64;
    let e = activated_width(config);
    let embeddings = (config.vocab_size as u64 + config.max_seq_len as u64) * d + 2 * d;
    // q, k, v, o weights; q, v, o biases
    let attention_per_layer = 4 * d * d + 3 * d;
    let layer_norms_per_layer = 4 * d;
    let ffn_per_layer = 2 * d * e + e + d;
    let gate_per_layer = d * gate_width(config);
    let heads = d * d + d + d * config.num_labels as u64 + config.num_labels as u64;
    let per_layer = attention_per_layer + layer_norms_per_layer + ffn_per_layer + gate_per_layer;
    ParamCount {
        embeddings,
        attention_per_layer,
        layer_norms_per_layer,
        ffn_per_layer,
        gate_per_layer,
        heads,
        total: embeddings + config.layers as u64 * per_layer + heads,
    }
}

/// Every stored parameter, all experts included.
pub fn count_total_params(config: &ModelConfig) -> u64 {
    let eff = count_effective_params(config);
    let experts = config.moe.as_ref().map_or(1, |m| m.experts) as u64;
    eff.total + config.layers as u64 * (experts - 1) * eff.ffn_per_layer
}

/// Encoder multiply-accumulates per token at sequence length `seq_len`
/// (pooler and classifier excluded).
pub fn flops_per_token(config: &ModelConfig, seq_len: usize) -> FlopCount {
    let d = config.embed_dim as u64;
    let s = seq_len as u64;
    // four projections, then scores and context against every key
    let attention_per_layer = 4 * d * d + 2 * s * d;
    let ffn_per_layer = 2 * d * activated_width(config);
    let gate_per_layer = d * gate_width(config);
    FlopCount {
        attention_per_layer,
        ffn_per_layer,
        gate_per_layer,
        total: config.layers as u64 * (attention_per_layer + ffn_per_layer + gate_per_layer),
    }
}
