//! BERT-style encoder for sequence classification.
//!
//! Post-layernorm residual blocks: each layer computes
//! `A = LN(X + Attn(X))` then `X' = LN(A + FFN(A))`, where the FFN is either
//! dense or a mixture of experts. The hidden states `X^0..X^L` (embedding
//! output included) are exposed for layer-wise distillation.

mod count;

pub use count::{count_effective_params, count_total_params, flops_per_token, FlopCount, ParamCount};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{self, ExpertSet, FfnWeights, MoeFfn, RoutingStrategy, RoutingTable};
use crate::tensor::{Binder, Graph, HasParams, ParamId, ParamStore, Tensor, Var};

/// Standard deviation of the normal initializer for embedding tables and
/// gate weights. Projection matrices use `1/sqrt(fan_in)` instead.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub experts: usize,
    pub expert_dim: usize,
    pub shared_dim: usize,
    pub routing: RoutingStrategy,
}

impl MoeConfig {
    /// Experts of width `floor(ffn_hidden / experts)`.
    pub fn even_split(ffn_hidden: usize, experts: usize, shared_dim: usize, routing: RoutingStrategy) -> Self {
        Self {
            experts,
            expert_dim: ffn_hidden / experts.max(1),
            shared_dim,
            routing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub num_labels: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// Minutes-scale CPU defaults.
    pub fn desk(vocab_size: usize, num_labels: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            ffn_hidden: 256,
            layers: 4,
            heads: 4,
            max_seq_len: 64,
            num_labels,
            dropout: 0.1,
            moe: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.ffn_hidden == 0 || self.layers == 0 {
            return bad("vocab_size, embed_dim, ffn_hidden and layers must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.max_seq_len == 0 || self.num_labels < 2 {
            return bad("max_seq_len must be positive and num_labels at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(m) = &self.moe {
            if m.experts == 0 {
                return bad("moe.experts must be at least 1".into());
            }
            if m.expert_dim == 0 || m.expert_dim > self.ffn_hidden {
                return bad(format!("moe.expert_dim {} outside 1..={}", m.expert_dim, self.ffn_hidden));
            }
            if m.shared_dim > m.expert_dim {
                return bad(format!("moe.shared_dim {} exceeds expert_dim {}", m.shared_dim, m.expert_dim));
            }
        }
        Ok(())
    }
}

/// Parameters of one dense two-layer FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Dense(FfnParams),
    Moe(MoeFfn),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

/// Query/value/output projections carry a bias; the key projection does not,
/// since a key bias only shifts every score of a query by the same amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AttentionParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    attn: AttentionParams,
    ffn: FeedForward,
    ffn_ln: LayerNormParams,
}

/// Hidden states of one forward pass.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    /// `X^0` (embedding output) through `X^L`, each `[batch, seq, d]`.
    pub hidden: Vec<Var>,
    /// Attention sublayer output `A` of each layer (the FFN input).
    pub attention: Vec<Var>,
    /// One entry per token, 1 for real tokens and 0 for padding.
    pub mask: Vec<f64>,
}

/// A padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// Per-layer MoE structure supplied when assembling a student.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayerSpec {
    pub routing: RoutingTable,
    pub provenance: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln: LayerNormParams,
    layers: Vec<EncoderLayer>,
    pooler_w: ParamId,
    pooler_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl HasParams for EncoderModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Registers every parameter in canonical order, pulling tensors from `source`.
fn assemble(
    config: &ModelConfig,
    moe_layers: Option<&[MoeLayerSpec]>,
    source: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor>,
) -> Result<EncoderModel> {
    config.validate()?;
    let (v, d, dh, l) = (config.vocab_size, config.embed_dim, config.ffn_hidden, config.layers);
    if let Some(specs) = moe_layers {
        if specs.len() != l || config.moe.is_none() {
            return Err(Error::Config(format!("expected {l} MoE layer specs and a moe config")));
        }
    }
    let mut store = ParamStore::new();
    let mut add = |store: &mut ParamStore, name: String, shape: &[usize]| -> Result<ParamId> {
        let t = source(&name, shape)?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "assemble",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        store.insert(name, t)
    };
    let ln = |store: &mut ParamStore, add: &mut dyn FnMut(&mut ParamStore, String, &[usize]) -> Result<ParamId>, prefix: &str| -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gamma: add(store, format!("{prefix}.gamma"), &[d])?,
            beta: add(store, format!("{prefix}.beta"), &[d])?,
        })
    };

    let tok_emb = add(&mut store, "embeddings.token".into(), &[v, d])?;
    let pos_emb = add(&mut store, "embeddings.position".into(), &[config.max_seq_len, d])?;
    let emb_ln = ln(&mut store, &mut add, "embeddings.ln")?;
    let mut layers = Vec::with_capacity(l);
    for li in 0..l {
        let p = format!("layers.{li}");
        let attn = AttentionParams {
            wq: add(&mut store, format!("{p}.attn.q.weight"), &[d, d])?,
            bq: add(&mut store, format!("{p}.attn.q.bias"), &[d])?,
            wk: add(&mut store, format!("{p}.attn.k.weight"), &[d, d])?,
            wv: add(&mut store, format!("{p}.attn.v.weight"), &[d, d])?,
            bv: add(&mut store, format!("{p}.attn.v.bias"), &[d])?,
            wo: add(&mut store, format!("{p}.attn.o.weight"), &[d, d])?,
            bo: add(&mut store, format!("{p}.attn.o.bias"), &[d])?,
            ln: ln(&mut store, &mut add, &format!("{p}.attn.ln"))?,
        };
        let ffn = match (moe_layers, &config.moe) {
            (Some(specs), Some(mc)) => {
                let spec = &specs[li];
                let e = mc.expert_dim;
                let mut experts = Vec::with_capacity(mc.experts);
                for ei in 0..mc.experts {
                    let q = format!("{p}.experts.{ei}");
                    experts.push(FfnParams {
                        w1: add(&mut store, format!("{q}.w1"), &[d, e])?,
                        b1: add(&mut store, format!("{q}.b1"), &[e])?,
                        w2: add(&mut store, format!("{q}.w2"), &[e, d])?,
                        b2: add(&mut store, format!("{q}.b2"), &[d])?,
                    });
                }
                let gate = match spec.routing {
                    RoutingTable::Gate => Some(add(&mut store, format!("{p}.gate.weight"), &[d, mc.experts])?),
                    _ => None,
                };
                spec.routing.validate(v, mc.experts)?;
                if spec.routing.strategy() != mc.routing {
                    return Err(Error::Config(format!(
                        "layer {li} routing {:?} disagrees with config {:?}",
                        spec.routing.strategy(),
                        mc.routing
                    )));
                }
                FeedForward::Moe(MoeFfn {
                    experts,
                    gate,
                    routing: spec.routing.clone(),
                    provenance: spec.provenance.clone(),
                })
            }
            _ => FeedForward::Dense(FfnParams {
                w1: add(&mut store, format!("{p}.ffn.w1"), &[d, dh])?,
                b1: add(&mut store, format!("{p}.ffn.b1"), &[dh])?,
                w2: add(&mut store, format!("{p}.ffn.w2"), &[dh, d])?,
                b2: add(&mut store, format!("{p}.ffn.b2"), &[d])?,
            }),
        };
        let ffn_ln = ln(&mut store, &mut add, &format!("{p}.ffn.ln"))?;
        layers.push(EncoderLayer { attn, ffn, ffn_ln });
    }
    let pooler_w = add(&mut store, "pooler.weight".into(), &[d, d])?;
    let pooler_b = add(&mut store, "pooler.bias".into(), &[d])?;
    let cls_w = add(&mut store, "classifier.weight".into(), &[d, config.num_labels])?;
    let cls_b = add(&mut store, "classifier.bias".into(), &[config.num_labels])?;
    Ok(EncoderModel {
        config: config.clone(),
        params: store,
        tok_emb,
        pos_emb,
        emb_ln,
        layers,
        pooler_w,
        pooler_b,
        cls_w,
        cls_b,
    })
}

fn random_init(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with(".gamma") {
        Tensor::ones(shape)
    } else if shape.len() == 1 {
        Tensor::zeros(shape)
    } else if name.starts_with("embeddings.") {
        Tensor::randn(shape, INIT_STD, rng)
    } else {
        Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng)
    }
}

/// Input to [`ffn_forward`]: the attention output `A` and the FFN weights.
pub fn ffn_forward(g: &mut Graph, a: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.matmul(a, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = (0..g.value(x).len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

impl EncoderModel {
    /// Dense model with seeded random initialization.
    pub fn new_dense(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.moe = None;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assemble(&config, None, &mut |name, shape| Ok(random_init(name, shape, &mut rng)))
    }

    /// Rebuilds a model from named tensors (checkpoint loading).
    pub fn from_tensors(
        config: &ModelConfig,
        moe_layers: Option<&[MoeLayerSpec]>,
        mut tensors: std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let model = assemble(config, moe_layers, &mut |name, _| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        })?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    /// Student whose FFNs are replaced by the given expert sets. All other
    /// parameters are copied from `self`. Gate weights are drawn from `seed`.
    pub fn with_experts(&self, moe_config: &MoeConfig, layers: Vec<(ExpertSet, RoutingTable)>, seed: u64) -> Result<Self> {
        if !self.is_dense() {
            return Err(Error::Invalid("model is already a mixture of experts".into()));
        }
        if layers.len() != self.config.layers {
            return Err(Error::Invalid(format!("{} expert sets for {} layers", layers.len(), self.config.layers)));
        }
        let mut config = self.config.clone();
        config.moe = Some(moe_config.clone());
        let specs: Vec<MoeLayerSpec> = layers
            .iter()
            .map(|(set, routing)| MoeLayerSpec {
                routing: routing.clone(),
                provenance: set.provenance.clone(),
            })
            .collect();
        for (set, _) in &layers {
            if set.experts.len() != moe_config.experts || set.expert_dim != moe_config.expert_dim {
                return Err(Error::Invalid("expert set does not match moe config".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assemble(&config, Some(&specs), &mut |name, shape| {
            if let Some(id) = self.params.id(name) {
                return Ok(self.params.get(id).clone());
            }
            let (layer, rest) = parse_layer_name(name)?;
            if rest == "gate.weight" {
                return Ok(moe::init_gate(shape, &mut rng));
            }
            let set = &layers[layer].0;
            let mut parts = rest.splitn(3, '.');
            let (Some("experts"), Some(e), Some(which)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Invalid(format!("unexpected parameter {name}")));
            };
            let e: usize = e.parse().map_err(|_| Error::Invalid(format!("bad expert index in {name}")))?;
            let w = &set.experts[e];
            Ok(match which {
                "w1" => w.w1.clone(),
                "b1" => w.b1.clone(),
                "w2" => w.w2.clone(),
                "b2" => w.b2.clone(),
                _ => return Err(Error::Invalid(format!("unexpected parameter {name}"))),
            })
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_dense(&self) -> bool {
        self.layers.iter().all(|l| matches!(l.ffn, FeedForward::Dense(_)))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn ffn(&self, layer: usize) -> &FeedForward {
        &self.layers[layer].ffn
    }

    /// Copy of the dense FFN weights of `layer`.
    pub fn dense_ffn(&self, layer: usize) -> Result<FfnWeights> {
        let f = self.dense_ffn_params(layer)?;
        Ok(FfnWeights {
            w1: self.params.get(f.w1).clone(),
            b1: self.params.get(f.b1).clone(),
            w2: self.params.get(f.w2).clone(),
            b2: self.params.get(f.b2).clone(),
        })
    }

    pub fn dense_ffn_params(&self, layer: usize) -> Result<FfnParams> {
        match self.layers.get(layer).map(|l| &l.ffn) {
            Some(FeedForward::Dense(f)) => Ok(*f),
            _ => Err(Error::Invalid(format!("layer {layer} has no dense FFN"))),
        }
    }

    pub fn moe_layers(&self) -> Vec<&MoeFfn> {
        self.layers
            .iter()
            .filter_map(|l| match &l.ffn {
                FeedForward::Moe(m) => Some(m),
                FeedForward::Dense(_) => None,
            })
            .collect()
    }

    /// MoE structure of each layer, `None` for a dense model.
    pub fn moe_specs(&self) -> Option<Vec<MoeLayerSpec>> {
        if self.is_dense() {
            return None;
        }
        Some(
            self.moe_layers()
                .into_iter()
                .map(|m| MoeLayerSpec {
                    routing: m.routing.clone(),
                    provenance: m.provenance.clone(),
                })
                .collect(),
        )
    }

    pub fn position_embedding_id(&self) -> ParamId {
        self.pos_emb
    }

    pub fn classifier_weight_id(&self) -> ParamId {
        self.cls_w
    }

    /// Full forward pass. `rng` enables dropout (training); `None` is eval mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, LayerOutputs)> {
        let cfg = &self.config;
        let (b, s, h) = (batch.batch, batch.seq, cfg.heads);
        if s > cfg.max_seq_len {
            return Err(Error::Invalid(format!("sequence length {s} exceeds max_seq_len {}", cfg.max_seq_len)));
        }
        if batch.ids.len() != b * s || batch.mask.len() != b * s {
            return Err(Error::ShapeMismatch {
                op: "encoder_forward",
                lhs: vec![b, s],
                rhs: vec![batch.ids.len(), batch.mask.len()],
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let p = cfg.dropout;
        let store = &self.params;

        let tok = binder.var(g, store, self.tok_emb);
        let pos = binder.var(g, store, self.pos_emb);
        let te = g.embedding(tok, &batch.ids, &[b, s])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pe = g.embedding(pos, &positions, &[b, s])?;
        let x = g.add(te, pe)?;
        let mut x = self.layer_norm(g, binder, x, self.emb_ln)?;

        // additive key mask shared by every head and query
        let mut key_bias = Vec::with_capacity(b * h * s * s);
        for bi in 0..b {
            for _ in 0..h * s {
                key_bias.extend(batch.mask[bi * s..(bi + 1) * s].iter().map(|&m| if m > 0.0 { 0.0 } else { -1e9 }));
            }
        }

        let mut hidden = vec![x];
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let attn_out = self.attention(g, binder, x, &layer.attn, &key_bias, b, s, rng.as_deref_mut())?;
            let attn_out = dropout(g, attn_out, p, rng.as_deref_mut())?;
            let res = g.add(x, attn_out)?;
            let a = self.layer_norm(g, binder, res, layer.attn.ln)?;
            attention.push(a);

            let ffn_out = match &layer.ffn {
                FeedForward::Dense(f) => {
                    let (w1, b1, w2, b2) = self.bind_ffn(g, binder, f);
                    ffn_forward(g, a, w1, b1, w2, b2)?
                }
                FeedForward::Moe(m) => moe::moe_forward(g, binder, store, m, a, &batch.ids, &batch.mask)?,
            };
            let ffn_out = dropout(g, ffn_out, p, rng.as_deref_mut())?;
            let res = g.add(a, ffn_out)?;
            x = self.layer_norm(g, binder, res, layer.ffn_ln)?;
            hidden.push(x);
        }

        let cls_rows: Vec<usize> = (0..b).map(|bi| bi * s).collect();
        let cls = g.gather_rows(x, &cls_rows)?;
        let pw = binder.var(g, store, self.pooler_w);
        let pb = binder.var(g, store, self.pooler_b);
        let pooled = g.matmul(cls, pw)?;
        let pooled = g.add_row(pooled, pb)?;
        let pooled = g.tanh(pooled)?;
        let cw = binder.var(g, store, self.cls_w);
        let cb = binder.var(g, store, self.cls_b);
        let logits = g.matmul(pooled, cw)?;
        let logits = g.add_row(logits, cb)?;
        Ok((
            logits,
            LayerOutputs {
                hidden,
                attention,
                mask: batch.mask.clone(),
            },
        ))
    }

    pub(crate) fn bind_ffn(&self, g: &mut Graph, binder: &mut Binder, f: &FfnParams) -> (Var, Var, Var, Var) {
        let s = &self.params;
        (
            binder.var(g, s, f.w1),
            binder.var(g, s, f.b1),
            binder.var(g, s, f.w2),
            binder.var(g, s, f.b2),
        )
    }

    fn layer_norm(&self, g: &mut Graph, binder: &mut Binder, x: Var, ln: LayerNormParams) -> Result<Var> {
        let gamma = binder.var(g, &self.params, ln.gamma);
        let beta = binder.var(g, &self.params, ln.beta);
        g.layer_norm(x, gamma, beta)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        p: &AttentionParams,
        key_bias: &[f64],
        b: usize,
        s: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let store = &self.params;
        let (d, h) = (self.config.embed_dim, self.config.heads);
        let dh = d / h;
        let mut split = |g: &mut Graph, w: ParamId, bias: Option<ParamId>| -> Result<Var> {
            let wv = binder.var(g, store, w);
            let mut y = g.matmul(x, wv)?;
            if let Some(bias) = bias {
                let bv = binder.var(g, store, bias);
                y = g.add_row(y, bv)?;
            }
            let y = g.reshape(y, &[b, s, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * h, s, dh])
        };
        let q = split(g, p.wq, Some(p.bq))?;
        let k = split(g, p.wk, None)?;
        let v = split(g, p.wv, Some(p.bv))?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = g.add_const(scores, key_bias)?;
        let probs = g.softmax(scores)?;
        let probs = dropout(g, probs, self.config.dropout, rng)?;
        let ctx = g.bmm(probs, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, s, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, s, d])?;
        let wo = binder.var(g, store, p.wo);
        let bo = binder.var(g, store, p.bo);
        let out = g.matmul(ctx, wo)?;
        g.add_row(out, bo)
    }

    /// Eval-mode logits `[batch, num_labels]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let mut binder = Binder::new(&self.params);
        let (logits, _) = self.forward(&mut g, &mut binder, batch, None)?;
        Ok(g.tensor(logits))
    }

    /// Eval-mode argmax predictions (ties resolve to the lowest label).
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let c = self.config.num_labels;
        Ok(logits.data().chunks(c).map(argmax).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn parse_layer_name(name: &str) -> Result<(usize, &str)> {
    let rest = name
        .strip_prefix("layers.")
        .ok_or_else(|| Error::Invalid(format!("unexpected parameter {name}")))?;
    let (idx, rest) = rest
        .split_once('.')
        .ok_or_else(|| Error::Invalid(format!("unexpected parameter {name}")))?;
    let idx = idx
        .parse()
        .map_err(|_| Error::Invalid(format!("bad layer index in {name}")))?;
    Ok((idx, rest))
}
