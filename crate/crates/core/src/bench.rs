//! Inference benchmarking: analytic FLOPs and parameters plus wall-clock
//! throughput at batch size 1.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CLS;
use crate::error::{Error, Result};
use crate::model::{count_effective_params, count_total_params, flops_per_token, Batch, EncoderModel, FlopCount};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub seq_len: usize,
    /// Timed passes; the median is reported.
    pub repeats: usize,
    pub warmup: usize,
    /// Batch-1 inputs per pass.
    pub examples: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            seq_len: 64,
            repeats: 5,
            warmup: 2,
            examples: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub examples_per_sec: f64,
    pub flops_per_token: FlopCount,
    pub effective_params: u64,
    pub total_params: u64,
    pub seq_len: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchComparison {
    pub dense: BenchReport,
    pub moe: BenchReport,
    pub speedup: f64,
}

/// Full-length batch-1 inputs drawn from non-reserved ids.
pub fn bench_inputs(vocab_size: usize, seq_len: usize, n: usize, seed: u64) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ids = std::iter::once(CLS)
                .chain((1..seq_len).map(|_| rng.random_range(CLS + 1..vocab_size.max(CLS + 2))))
                .collect();
            Batch {
                ids,
                mask: vec![1.0; seq_len],
                labels: vec![0],
                batch: 1,
                seq: seq_len,
            }
        })
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times eval-mode forward passes over `inputs` on the calling thread.
pub fn bench_inference(model: &EncoderModel, inputs: &[Batch], repeats: usize, warmup: usize) -> Result<BenchReport> {
    if inputs.is_empty() || repeats == 0 {
        return Err(Error::Config("bench needs at least one input and one repeat".into()));
    }
    let seq_len = inputs[0].seq;
    let pass = || -> Result<f64> {
        let start = Instant::now();
        for batch in inputs {
            std::hint::black_box(model.logits(batch)?);
        }
        Ok(inputs.len() as f64 / start.elapsed().as_secs_f64().max(1e-12))
    };
    for _ in 0..warmup {
        pass()?;
    }
    let rates = (0..repeats).map(|_| pass()).collect::<Result<Vec<_>>>()?;
    let config = model.config();
    Ok(BenchReport {
        examples_per_sec: median(rates),
        flops_per_token: flops_per_token(config, seq_len),
        effective_params: count_effective_params(config).total,
        total_params: count_total_params(config),
        seq_len,
        repeats,
    })
}

/// Dense and MoE timed on the same inputs, passes interleaved so drift in
/// machine load affects both alike.
pub fn bench_compare(dense: &EncoderModel, moe: &EncoderModel, settings: &BenchSettings) -> Result<BenchComparison> {
    if dense.config().vocab_size != moe.config().vocab_size {
        return Err(Error::Config("bench models have different vocabularies".into()));
    }
    let seq = settings.seq_len.min(dense.config().max_seq_len).min(moe.config().max_seq_len);
    let inputs = bench_inputs(dense.config().vocab_size, seq, settings.examples, settings.seed);
    bench_inference(dense, &inputs, 1, settings.warmup)?;
    bench_inference(moe, &inputs, 1, settings.warmup)?;
    let mut d_rates = Vec::with_capacity(settings.repeats);
    let mut m_rates = Vec::with_capacity(settings.repeats);
    let (mut d_last, mut m_last) = (None, None);
    for _ in 0..settings.repeats.max(1) {
        let d = bench_inference(dense, &inputs, 1, 0)?;
        let m = bench_inference(moe, &inputs, 1, 0)?;
        d_rates.push(d.examples_per_sec);
        m_rates.push(m.examples_per_sec);
        d_last = Some(d);
        m_last = Some(m);
    }
    let mut dense_report = d_last.expect("at least one repeat");
    let mut moe_report = m_last.expect("at least one repeat");
    dense_report.examples_per_sec = median(d_rates);
    moe_report.examples_per_sec = median(m_rates);
    dense_report.repeats = settings.repeats.max(1);
    moe_report.repeats = settings.repeats.max(1);
    Ok(BenchComparison {
        speedup: moe_report.examples_per_sec / dense_report.examples_per_sec,
        dense: dense_report,
        moe: moe_report,
    })
}
