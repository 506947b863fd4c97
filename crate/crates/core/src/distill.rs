//! Layer-wise distillation losses and the teacher/student training loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Batch, EncoderModel, ModelConfig};
use crate::optim::{clip_grad_norm, AdamW};
use crate::tensor::{Binder, Graph, HasParams, Tensor, Var};

/// Hidden states that enter the layer loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSet {
    /// Embedding output and every layer.
    All,
    /// Last layer only.
    Last,
    /// Embedding output and every second layer: 0, 2, 4, ...
    Skip,
}

impl LayerSet {
    /// Indices into the `L + 1` hidden states.
    pub fn indices(self, layers: usize) -> Vec<usize> {
        match self {
            Self::All => (0..=layers).collect(),
            Self::Last => vec![layers],
            Self::Skip => (0..=layers).step_by(2).collect(),
        }
    }
}

impl std::str::FromStr for LayerSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "last" => Ok(Self::Last),
            "skip" => Ok(Self::Skip),
            other => Err(Error::Config(format!("unknown layer set {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("lr must be positive and batch_size at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and grad_clip_norm > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub lambda_distill: f64,
    pub layer_set: LayerSet,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            lambda_distill: 1.0,
            layer_set: LayerSet::All,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.lambda_distill >= 0.0 && self.lambda_distill.is_finite()) {
            return Err(Error::Config(format!("lambda_distill {} must be finite and >= 0", self.lambda_distill)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillBatchLoss {
    pub ce: f64,
    pub trm: f64,
    pub pred: f64,
    pub total: f64,
}

/// One JSON-lines metrics record, written at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub ce: f64,
    pub trm: f64,
    pub pred: f64,
    pub total: f64,
    pub eval_acc: Option<f64>,
}

/// Sum over the selected layers of the masked MSE (mean over real tokens and
/// hidden dims).
pub fn loss_trm(g: &mut Graph, student: &[Var], teacher: &[Var], mask: &[f64], layer_set: LayerSet) -> Result<Var> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "loss_trm",
            lhs: vec![student.len()],
            rhs: vec![teacher.len()],
        });
    }
    let idx = layer_set.indices(student.len() - 1);
    let mut total: Option<Var> = None;
    for l in idx {
        let mse = g.masked_mse(student[l], teacher[l], mask)?;
        total = Some(match total {
            Some(t) => g.add(t, mse)?,
            None => mse,
        });
    }
    total.ok_or_else(|| Error::Invalid("empty layer set".into()))
}

/// `(KL(p || q) + KL(q || p)) / 2`, batch mean.
pub fn loss_pred(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let pq = g.kl_div(p, q)?;
    let qp = g.kl_div(q, p)?;
    let s = g.add(pq, qp)?;
    g.scale(s, 0.5)
}

pub fn loss_distill(g: &mut Graph, trm: Var, pred: Var) -> Result<Var> {
    g.add(trm, pred)
}

/// Eval-mode accuracy.
pub fn evaluate(model: &EncoderModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    for batch in dataset.batches(64, None) {
        let preds = model.predict(&batch)?;
        correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Teacher signals for one batch, computed without gradient tracking.
struct TeacherSignals {
    hidden: Vec<Tensor>,
    probs: Tensor,
}

fn teacher_signals(teacher: &EncoderModel, batch: &Batch) -> Result<TeacherSignals> {
    let mut g = Graph::no_grad();
    let mut binder = Binder::new(teacher.params());
    let (logits, outs) = teacher.forward(&mut g, &mut binder, batch, None)?;
    let probs = g.softmax(logits)?;
    Ok(TeacherSignals {
        hidden: outs.hidden.iter().map(|&h| g.tensor(h)).collect(),
        probs: g.tensor(probs),
    })
}

/// Records the full objective for `batch` on `g` and returns the total and
/// its components. With `lambda = 0` the distillation terms are computed but
/// kept off the loss path.
pub fn student_objective(
    g: &mut Graph,
    binder: &mut Binder,
    student: &EncoderModel,
    teacher: &EncoderModel,
    batch: &Batch,
    config: &DistillConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var, Var, Var)> {
    let signals = teacher_signals(teacher, batch)?;
    let (logits, outs) = student.forward(g, binder, batch, rng)?;
    let ce = g.cross_entropy(logits, &batch.labels)?;
    let teacher_hidden: Vec<Var> = signals.hidden.iter().map(|t| g.constant(t)).collect();
    let trm = loss_trm(g, &outs.hidden, &teacher_hidden, &outs.mask, config.layer_set)?;
    let p = g.softmax(logits)?;
    let q = g.constant(&signals.probs);
    let pred = loss_pred(g, p, q)?;
    let total = if config.lambda_distill == 0.0 {
        ce
    } else {
        let kd = loss_distill(g, trm, pred)?;
        let kd = g.scale(kd, config.lambda_distill)?;
        g.add(ce, kd)?
    };
    Ok((total, ce, trm, pred))
}

struct Phase<'a> {
    name: &'a str,
    train: &'a Dataset,
    eval: Option<&'a Dataset>,
}

fn diverged(phase: &str, epoch: usize, step: u64, source: Error) -> Error {
    Error::Diverged {
        phase: phase.to_string(),
        epoch,
        step,
        source: Box::new(source),
    }
}

/// Shared loop: shuffle, forward with dropout, backward, clip, AdamW.
fn run<F>(model: &mut EncoderModel, cfg: &TrainConfig, phase: Phase, mut objective: F) -> Result<Vec<MetricRecord>>
where
    F: FnMut(&mut Graph, &mut Binder, &EncoderModel, &Batch, &mut ChaCha8Rng) -> Result<(Var, DistillBatchLoss)>,
{
    cfg.validate()?;
    if phase.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params(), cfg.lr, cfg.weight_decay);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0; 4];
        let mut seen = 0usize;
        for batch in phase.train.batches(cfg.batch_size, Some(&mut rng)) {
            let step = opt.steps() + 1;
            let mut g = Graph::new();
            let mut binder = Binder::new(model.params());
            let (loss, parts) =
                objective(&mut g, &mut binder, model, &batch, &mut rng).map_err(|e| diverged(phase.name, epoch, step, e))?;
            let grads = g.backward(loss)?;
            binder.write_grads(&grads, model.params_mut());
            let norm = clip_grad_norm(model.params_mut(), cfg.grad_clip_norm);
            if !norm.is_finite() {
                return Err(diverged(phase.name, epoch, step, Error::NonFinite { op: "gradient" }));
            }
            opt.step(model.params_mut());
            let w = batch.batch as f64;
            for (s, v) in sums.iter_mut().zip([parts.ce, parts.trm, parts.pred, parts.total]) {
                *s += v * w;
            }
            seen += batch.batch;
        }
        let eval_acc = phase.eval.map(|d| evaluate(model, d)).transpose()?;
        let n = seen as f64;
        records.push(MetricRecord {
            phase: phase.name.to_string(),
            epoch,
            step: opt.steps(),
            ce: sums[0] / n,
            trm: sums[1] / n,
            pred: sums[2] / n,
            total: sums[3] / n,
            eval_acc,
        });
    }
    model.params_mut().zero_grad();
    Ok(records)
}

/// Cross-entropy fine-tuning of an existing model.
pub fn fine_tune(model: &mut EncoderModel, cfg: &TrainConfig, phase: &str, train: &Dataset, eval: Option<&Dataset>) -> Result<Vec<MetricRecord>> {
    let phase = Phase { name: phase, train, eval };
    run(model, cfg, phase, |g, binder, m, batch, rng| {
        let (logits, _) = m.forward(g, binder, batch, Some(rng))?;
        let ce = g.cross_entropy(logits, &batch.labels)?;
        let v = g.scalar(ce);
        Ok((
            ce,
            DistillBatchLoss {
                ce: v,
                trm: 0.0,
                pred: 0.0,
                total: v,
            },
        ))
    })
}

/// Builds a dense model from `seed` and trains it with cross-entropy.
pub fn train_teacher(
    config: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
) -> Result<(EncoderModel, Vec<MetricRecord>)> {
    let mut model = EncoderModel::new_dense(config, cfg.seed)?;
    let records = fine_tune(&mut model, cfg, "teacher", train, eval)?;
    Ok((model, records))
}

/// Trains `student` on `CE + lambda * (trm + pred)` against a frozen teacher.
pub fn train_student(
    student: &mut EncoderModel,
    teacher: &EncoderModel,
    cfg: &DistillConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    if student.config().layers != teacher.config().layers || student.config().embed_dim != teacher.config().embed_dim {
        return Err(Error::Config("student and teacher hidden states differ in shape".into()));
    }
    let phase = Phase {
        name: "student",
        train,
        eval,
    };
    run(student, &cfg.train, phase, |g, binder, m, batch, rng| {
        let (total, ce, trm, pred) = student_objective(g, binder, m, teacher, batch, cfg, Some(rng))?;
        Ok((
            total,
            DistillBatchLoss {
                ce: g.scalar(ce),
                trm: g.scalar(trm),
                pred: g.scalar(pred),
                total: g.scalar(total),
            },
        ))
    })
}

/// Objective components on one batch in eval mode.
pub fn batch_loss(student: &EncoderModel, teacher: &EncoderModel, batch: &Batch, cfg: &DistillConfig) -> Result<DistillBatchLoss> {
    let mut g = Graph::no_grad();
    let mut binder = Binder::new(student.params());
    let (total, ce, trm, pred) = student_objective(&mut g, &mut binder, student, teacher, batch, cfg, None)?;
    Ok(DistillBatchLoss {
        ce: g.scalar(ce),
        trm: g.scalar(trm),
        pred: g.scalar(pred),
        total: g.scalar(total),
    })
}

/// JSON-lines text of `records`, one object per line.
pub fn metrics_jsonl(records: &[MetricRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metrics serialize") + "\n")
        .collect()
}
