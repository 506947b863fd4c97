//! Dense FFN to mixture-of-experts adaptation, routing tables and the MoE
//! sublayer forward pass (top-1 activation).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, ffn_forward, FfnParams, INIT_STD};
use crate::tensor::{Binder, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingStrategy {
    HashRandom,
    HashBalanced,
    Gate,
}

impl std::str::FromStr for RoutingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash_random" | "hash-r" => Ok(Self::HashRandom),
            "hash_balanced" | "hash-b" => Ok(Self::HashBalanced),
            "gate" => Ok(Self::Gate),
            other => Err(Error::Config(format!("unknown routing strategy {other:?}"))),
        }
    }
}

/// How the importance ordering is turned into a column order before splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptStrategy {
    /// Descending importance.
    Import,
    /// Uniformly shuffled.
    Random,
    /// Ascending importance.
    Inverse,
}

impl std::str::FromStr for AdaptStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "import" => Ok(Self::Import),
            "random" => Ok(Self::Random),
            "inverse" => Ok(Self::Inverse),
            other => Err(Error::Config(format!("unknown adaptation strategy {other:?}"))),
        }
    }
}

/// Token-to-expert rule of one MoE layer. Gate weights live in the model's
/// parameter store as `layers.{l}.gate.weight`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum RoutingTable {
    HashRandom { table: Vec<usize> },
    HashBalanced { table: Vec<usize> },
    Gate,
}

impl RoutingTable {
    pub fn strategy(&self) -> RoutingStrategy {
        match self {
            Self::HashRandom { .. } => RoutingStrategy::HashRandom,
            Self::HashBalanced { .. } => RoutingStrategy::HashBalanced,
            Self::Gate => RoutingStrategy::Gate,
        }
    }

    pub fn table(&self) -> Option<&[usize]> {
        match self {
            Self::HashRandom { table } | Self::HashBalanced { table } => Some(table),
            Self::Gate => None,
        }
    }

    /// Expert of `token` under a hash table; `None` for gate routing.
    pub fn route(&self, token: usize) -> Option<Result<usize>> {
        self.table().map(|t| {
            t.get(token)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("token id {token} outside routing table of {}", t.len())))
        })
    }

    pub fn validate(&self, vocab_size: usize, experts: usize) -> Result<()> {
        if let Some(t) = self.table() {
            if t.len() != vocab_size {
                return Err(Error::Config(format!("routing table covers {} tokens, vocabulary has {vocab_size}", t.len())));
            }
            if let Some(&bad) = t.iter().find(|&&e| e >= experts) {
                return Err(Error::Config(format!("routing table names expert {bad} of {experts}")));
            }
        }
        Ok(())
    }
}

/// Builds a routing table over a vocabulary of `freqs.len()` tokens.
///
/// Balanced hashing visits tokens by descending frequency (ties by id) and
/// gives each to the expert with the least accumulated frequency (ties to the
/// lowest expert id).
pub fn build_routing(strategy: RoutingStrategy, freqs: &[u64], experts: usize, seed: u64) -> Result<RoutingTable> {
    if freqs.is_empty() {
        return Err(Error::Invalid("cannot route an empty vocabulary".into()));
    }
    if experts == 0 {
        return Err(Error::Invalid("need at least one expert".into()));
    }
    Ok(match strategy {
        RoutingStrategy::HashRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            RoutingTable::HashRandom {
                table: (0..freqs.len()).map(|_| rng.random_range(0..experts)).collect(),
            }
        }
        RoutingStrategy::HashBalanced => {
            let mut order: Vec<usize> = (0..freqs.len()).collect();
            order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
            let mut loads = vec![0u64; experts];
            let mut table = vec![0; freqs.len()];
            for tok in order {
                let e = (0..experts).min_by_key(|&e| (loads[e], e)).expect("experts > 0");
                table[tok] = e;
                loads[e] += freqs[tok];
            }
            RoutingTable::HashBalanced { table }
        }
        RoutingStrategy::Gate => RoutingTable::Gate,
    })
}

/// Total frequency routed to each expert by a hash table.
pub fn expert_loads(table: &[usize], freqs: &[u64], experts: usize) -> Vec<u64> {
    let mut loads = vec![0; experts];
    for (tok, &e) in table.iter().enumerate() {
        loads[e] += freqs.get(tok).copied().unwrap_or(0);
    }
    loads
}

/// Small random gate weight `[d, N]`.
pub fn init_gate(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, INIT_STD, rng)
}

/// Weights of one dense two-layer FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnWeights {
    pub fn hidden(&self) -> usize {
        self.b1.numel()
    }

    pub fn embed_dim(&self) -> usize {
        self.b2.numel()
    }

    fn check(&self) -> Result<()> {
        let (d, dh) = (self.embed_dim(), self.hidden());
        if self.w1.shape() != [d, dh] || self.w2.shape() != [dh, d] || self.b1.shape() != [dh] {
            return Err(Error::ShapeMismatch {
                op: "adapt_ffn",
                lhs: self.w1.shape().to_vec(),
                rhs: self.w2.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Neurons `cols` (W1 columns, b1 entries, W2 rows) in the given order.
    pub fn select(&self, cols: &[usize]) -> FfnWeights {
        let (d, dh) = (self.embed_dim(), self.hidden());
        let e = cols.len();
        let mut w1 = vec![0.0; d * e];
        for r in 0..d {
            for (k, &c) in cols.iter().enumerate() {
                w1[r * e + k] = self.w1.data()[r * dh + c];
            }
        }
        let b1 = cols.iter().map(|&c| self.b1.data()[c]).collect();
        let w2 = cols
            .iter()
            .flat_map(|&c| self.w2.data()[c * d..(c + 1) * d].iter().copied())
            .collect();
        FfnWeights {
            w1: Tensor::new(vec![d, e], w1).expect("shape"),
            b1: Tensor::new(vec![e], b1).expect("shape"),
            w2: Tensor::new(vec![e, d], w2).expect("shape"),
            b2: self.b2.clone(),
        }
    }
}

/// The experts of one adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet {
    pub experts: Vec<FfnWeights>,
    /// Original column index of every slot of every expert.
    pub provenance: Vec<Vec<usize>>,
    pub shared_dim: usize,
    pub expert_dim: usize,
}

impl ExpertSet {
    /// Original columns referenced by no expert, ascending.
    pub fn discarded(&self, ffn_hidden: usize) -> Vec<usize> {
        let mut used = vec![false; ffn_hidden];
        for c in self.provenance.iter().flatten() {
            used[*c] = true;
        }
        (0..ffn_hidden).filter(|&c| !used[c]).collect()
    }
}

/// Ordering positions held by each expert: the first `shared` positions, then
/// `shared + e`, `shared + e + N`, ... until `expert_dim` slots are filled.
pub fn expert_positions(ffn_hidden: usize, experts: usize, shared: usize, expert_dim: usize) -> Result<Vec<Vec<usize>>> {
    if experts == 0 || experts > ffn_hidden {
        return Err(Error::Invalid(format!("{experts} experts for hidden width {ffn_hidden}")));
    }
    if shared > expert_dim {
        return Err(Error::Invalid(format!("shared dimension {shared} exceeds expert dimension {expert_dim}")));
    }
    let needed = shared + experts * (expert_dim - shared);
    if needed > ffn_hidden {
        return Err(Error::Invalid(format!(
            "{experts} experts of width {expert_dim} sharing {shared} need {needed} columns, only {ffn_hidden} exist"
        )));
    }
    Ok((0..experts)
        .map(|e| {
            (0..shared)
                .chain((0..expert_dim - shared).map(|k| shared + e + k * experts))
                .collect()
        })
        .collect())
}

/// Splits a dense FFN into `experts` experts of width `floor(d_h / N)`.
pub fn adapt_ffn(ffn: &FfnWeights, ordering: &[usize], experts: usize, shared: usize) -> Result<ExpertSet> {
    if experts == 0 {
        return Err(Error::Invalid("need at least one expert".into()));
    }
    adapt_ffn_with_dim(ffn, ordering, experts, shared, ffn.hidden() / experts)
}

/// [`adapt_ffn`] with an explicit expert width.
pub fn adapt_ffn_with_dim(
    ffn: &FfnWeights,
    ordering: &[usize],
    experts: usize,
    shared: usize,
    expert_dim: usize,
) -> Result<ExpertSet> {
    ffn.check()?;
    let dh = ffn.hidden();
    check_permutation(ordering, dh)?;
    let positions = expert_positions(dh, experts, shared, expert_dim)?;
    let provenance: Vec<Vec<usize>> = positions
        .iter()
        .map(|p| p.iter().map(|&k| ordering[k]).collect())
        .collect();
    Ok(ExpertSet {
        experts: provenance.iter().map(|cols| ffn.select(cols)).collect(),
        provenance,
        shared_dim: shared,
        expert_dim,
    })
}

/// Same procedure on a uniformly shuffled ordering.
pub fn adapt_random(ffn: &FfnWeights, ordering: &[usize], experts: usize, shared: usize, expert_dim: usize, seed: u64) -> Result<ExpertSet> {
    let mut shuffled = ordering.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    adapt_ffn_with_dim(ffn, &shuffled, experts, shared, expert_dim)
}

/// Same procedure on the reversed ordering (least important first).
pub fn adapt_inverse(ffn: &FfnWeights, ordering: &[usize], experts: usize, shared: usize, expert_dim: usize) -> Result<ExpertSet> {
    let reversed: Vec<usize> = ordering.iter().rev().copied().collect();
    adapt_ffn_with_dim(ffn, &reversed, experts, shared, expert_dim)
}

pub fn adapt_with_strategy(
    strategy: AdaptStrategy,
    ffn: &FfnWeights,
    ordering: &[usize],
    experts: usize,
    shared: usize,
    expert_dim: usize,
    seed: u64,
) -> Result<ExpertSet> {
    match strategy {
        AdaptStrategy::Import => adapt_ffn_with_dim(ffn, ordering, experts, shared, expert_dim),
        AdaptStrategy::Random => adapt_random(ffn, ordering, experts, shared, expert_dim, seed),
        AdaptStrategy::Inverse => adapt_inverse(ffn, ordering, experts, shared, expert_dim),
    }
}

fn check_permutation(ordering: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if ordering.len() != n {
        return Err(Error::Invalid(format!("ordering has {} entries, expected {n}", ordering.len())));
    }
    for &c in ordering {
        if c >= n || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Invalid(format!("ordering is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Parameter handles of one MoE sublayer inside an [`crate::model::EncoderModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoeFfn {
    pub experts: Vec<FfnParams>,
    pub gate: Option<ParamId>,
    pub routing: RoutingTable,
    pub provenance: Vec<Vec<usize>>,
}

/// Row-wise `softmax(repr · W_g)`.
pub fn gate_probs(g: &mut Graph, repr: Var, wg: Var) -> Result<Var> {
    let logits = g.matmul(repr, wg)?;
    g.softmax(logits)
}

/// MoE sublayer output before the residual connection, `[batch, seq, d]`.
///
/// Hash routing sends each token to its table entry with weight 1. Gate
/// routing sends every token of a sentence to the argmax expert of the gate
/// over the masked mean of `a`, scaled by that expert's probability.
pub fn moe_forward(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    layer: &MoeFfn,
    a: Var,
    token_ids: &[usize],
    mask: &[f64],
) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    let &[b, s, d] = shape.as_slice() else {
        return Err(Error::ShapeMismatch {
            op: "moe_forward",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    };
    let rows = b * s;
    if token_ids.len() != rows || mask.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "moe_forward",
            lhs: vec![b, s],
            rhs: vec![token_ids.len()],
        });
    }
    let n = layer.experts.len();
    let (assign, weight) = match &layer.routing {
        RoutingTable::Gate => {
            let wg_id = layer
                .gate
                .ok_or_else(|| Error::Invalid("gate routing without gate weight".into()))?;
            let wg = binder.var(g, store, wg_id);
            let repr = g.masked_mean_tokens(a, mask)?;
            let probs = gate_probs(g, repr, wg)?;
            let choice: Vec<usize> = g.value(probs).chunks(n).map(argmax).collect();
            let flat = g.reshape(probs, &[b * n, 1])?;
            let pick: Vec<usize> = (0..rows).map(|r| (r / s) * n + choice[r / s]).collect();
            let w = g.gather_rows(flat, &pick)?;
            ((0..rows).map(|r| choice[r / s]).collect::<Vec<_>>(), Some(w))
        }
        table => {
            let assign = token_ids
                .iter()
                .map(|&t| table.route(t).expect("hash table"))
                .collect::<Result<Vec<_>>>()?;
            (assign, None)
        }
    };

    let x = g.reshape(a, &[rows, d])?;
    let mut parts = Vec::new();
    let mut position = vec![0; rows];
    let mut offset = 0;
    for (e, params) in layer.experts.iter().enumerate() {
        let idx: Vec<usize> = (0..rows).filter(|&r| assign[r] == e).collect();
        if idx.is_empty() {
            continue;
        }
        for (k, &r) in idx.iter().enumerate() {
            position[r] = offset + k;
        }
        offset += idx.len();
        let xe = g.gather_rows(x, &idx)?;
        let w1 = binder.var(g, store, params.w1);
        let b1 = binder.var(g, store, params.b1);
        let w2 = binder.var(g, store, params.w2);
        let b2 = binder.var(g, store, params.b2);
        parts.push(ffn_forward(g, xe, w1, b1, w2, b2)?);
    }
    let cat = g.concat_rows(&parts)?;
    let mut out = g.gather_rows(cat, &position)?;
    if let Some(w) = weight {
        out = g.mul_col(out, w)?;
    }
    g.reshape(out, &[b, s, d])
}

#[cfg(test)]
mod tests;
