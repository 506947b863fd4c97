//! First-order neuron importance for dense FFN layers.
//!
//! For neuron `j` (column `j` of `W1`, row `j` of `W2`) the score is
//! `I_j = sum_x |w1_j . dL/dw1_j + w2_j . dL/dw2_j|` with one gradient per
//! example, so the absolute value sits inside the dataset sum.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::data::{make_batch, Dataset, Example};
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::tensor::{Binder, Graph, HasParams};

/// Fixed shard count so the floating-point reduction order never depends on
/// the machine.
const SHARDS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub scores: Vec<Vec<f64>>,
    /// Examples accumulated; not persisted in the JSON form.
    pub dataset_size: usize,
    pub ordering: Vec<Vec<usize>>,
}

impl ImportanceTable {
    pub fn from_scores(scores: Vec<Vec<f64>>, dataset_size: usize) -> Self {
        let ordering = scores.iter().map(|s| rank_neurons(s)).collect();
        Self {
            scores,
            dataset_size,
            ordering,
        }
    }

    pub fn layers(&self) -> usize {
        self.scores.len()
    }

    /// `{"0": [scores...], "1": [...]}`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<usize, &Vec<f64>> = self.scores.iter().enumerate().collect();
        let map: serde_json::Map<String, serde_json::Value> = map
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::to_value(v).expect("finite scores")))
            .collect();
        serde_json::to_string_pretty(&map).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(text)?;
        let mut layers: Vec<(usize, Vec<f64>)> = map
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|l| (l, v))
                    .map_err(|_| Error::Data(format!("importance layer key {k:?} is not an index")))
            })
            .collect::<Result<_>>()?;
        layers.sort_by_key(|(l, _)| *l);
        if layers.iter().enumerate().any(|(i, (l, _))| i != *l) {
            return Err(Error::Data("importance layers are not 0..L".into()));
        }
        if layers.iter().flat_map(|(_, v)| v).any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Data("importance scores must be finite and non-negative".into()));
        }
        Ok(Self::from_scores(layers.into_iter().map(|(_, v)| v).collect(), 0))
    }

    /// Hex sha256 of the JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Stable descending order: ties keep ascending index.
pub fn rank_neurons(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn example_scores(model: &EncoderModel, example: &Example, out: &mut [Vec<f64>]) -> Result<()> {
    let batch = make_batch(&[example]);
    let mut g = Graph::new();
    let mut binder = Binder::new(model.params());
    let (logits, _) = model.forward(&mut g, &mut binder, &batch, None)?;
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let grads = g.backward(loss)?;
    let d = model.config().embed_dim;
    for (l, acc) in out.iter_mut().enumerate() {
        let f = model.dense_ffn_params(l)?;
        let dh = acc.len();
        let w1 = model.params().get(f.w1).data();
        let w2 = model.params().get(f.w2).data();
        let g1 = binder.grad_of(&grads, model.params(), f.w1);
        let g2 = binder.grad_of(&grads, model.params(), f.w2);
        let mut s = vec![0.0; dh];
        for i in 0..d {
            for (j, sj) in s.iter_mut().enumerate() {
                *sj += w1[i * dh + j] * g1[i * dh + j];
            }
        }
        for (j, sj) in s.iter_mut().enumerate() {
            for k in 0..d {
                *sj += w2[j * d + k] * g2[j * d + k];
            }
        }
        for (a, sj) in acc.iter_mut().zip(s) {
            *a += sj.abs();
        }
    }
    Ok(())
}

/// Scores every FFN neuron of a dense model over `dataset` (dropout off).
pub fn accumulate_importance(model: &EncoderModel, dataset: &Dataset) -> Result<ImportanceTable> {
    if dataset.is_empty() {
        return Err(Error::Data("importance needs a non-empty dataset".into()));
    }
    if !model.is_dense() {
        return Err(Error::Invalid("importance needs dense FFN layers".into()));
    }
    let (layers, dh) = (model.config().layers, model.config().ffn_hidden);
    let chunk = dataset.len().div_ceil(SHARDS);
    let partials: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = dataset
            .examples
            .chunks(chunk)
            .map(|shard| {
                scope.spawn(move || {
                    let mut acc = vec![vec![0.0; dh]; layers];
                    for e in shard {
                        example_scores(model, e, &mut acc)?;
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("importance shard panicked")).collect()
    });
    let mut scores = vec![vec![0.0; dh]; layers];
    for part in partials {
        for (s, p) in scores.iter_mut().zip(part?) {
            for (a, b) in s.iter_mut().zip(p) {
                *a += b;
            }
        }
    }
    Ok(ImportanceTable::from_scores(scores, dataset.len()))
}

/// Sum of per-example cross-entropy over the dataset (eval mode).
pub fn total_loss(model: &EncoderModel, dataset: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for batch in dataset.batches(64, None) {
        let mut g = Graph::no_grad();
        let mut binder = Binder::new(model.params());
        let (logits, _) = model.forward(&mut g, &mut binder, &batch, None)?;
        let loss = g.cross_entropy(logits, &batch.labels)?;
        total += g.scalar(loss) * batch.batch as f64;
    }
    Ok(total)
}

/// Copy of `model` with the given neurons of `layer` removed (W1 column,
/// b1 entry and W2 row set to zero).
pub fn zero_neurons(model: &EncoderModel, layer: usize, neurons: &[usize]) -> Result<EncoderModel> {
    let f = model.dense_ffn_params(layer)?;
    let (d, dh) = (model.config().embed_dim, model.config().ffn_hidden);
    if let Some(&j) = neurons.iter().find(|&&j| j >= dh) {
        return Err(Error::Invalid(format!("neuron {j} outside hidden width {dh}")));
    }
    let mut m = model.clone();
    let p = m.params_mut();
    for &j in neurons {
        for i in 0..d {
            p.get_mut(f.w1).data_mut()[i * dh + j] = 0.0;
        }
        p.get_mut(f.b1).data_mut()[j] = 0.0;
        p.get_mut(f.w2).data_mut()[j * d..(j + 1) * d].fill(0.0);
    }
    Ok(m)
}

/// Exact loss change from removing neuron `j` of `layer`.
pub fn importance_oracle(model: &EncoderModel, dataset: &Dataset, layer: usize, j: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("importance needs a non-empty dataset".into()));
    }
    let base = total_loss(model, dataset)?;
    let without = total_loss(&zero_neurons(model, layer, &[j])?, dataset)?;
    Ok((base - without).abs())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}
