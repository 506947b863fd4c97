//! Run configuration and the staged pipeline: data, teacher, importance,
//! adaptation, distillation, evaluation and benchmarking. Every stage reads
//! and writes named artifacts inside `out_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{bench_compare, BenchComparison, BenchSettings};
use crate::checkpoint::{load_checkpoint, save_checkpoint, sha256_hex, ArtifactRef, CheckpointMeta};
use crate::data::{load_tsv, Dataset, SyntheticSpec, TextDataset, Vocab};
use crate::distill::{metrics_jsonl, train_student, train_teacher, DistillConfig, MetricRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::importance::{accumulate_importance, ImportanceTable};
use crate::model::{EncoderModel, ModelConfig, MoeConfig};
use crate::moe::{adapt_with_strategy, build_routing, AdaptStrategy, RoutingStrategy};

pub const VOCAB_FILE: &str = "vocab.json";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_METRICS: &str = "teacher_metrics.jsonl";
pub const IMPORTANCE_FILE: &str = "importance.json";
pub const STUDENT_INIT_CKPT: &str = "student_init.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const STUDENT_METRICS: &str = "student_metrics.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const BENCH_FILE: &str = "bench.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Tsv {
        train: PathBuf,
        eval: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Encoder shape; vocabulary size and label count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(0, 0);
        Self {
            embed_dim: desk.embed_dim,
            ffn_hidden: desk.ffn_hidden,
            layers: desk.layers,
            heads: desk.heads,
            max_seq_len: desk.max_seq_len,
            dropout: desk.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeSettings {
    pub experts: usize,
    /// Defaults to `ffn_hidden / experts`.
    pub expert_dim: Option<usize>,
    pub shared_dim: usize,
    pub routing: RoutingStrategy,
    pub adaptation: AdaptStrategy,
}

impl Default for MoeSettings {
    fn default() -> Self {
        Self {
            experts: 4,
            expert_dim: None,
            shared_dim: 32,
            routing: RoutingStrategy::HashRandom,
            adaptation: AdaptStrategy::Import,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random choice after data generation. The `seed` fields
    /// inside `teacher` and `distill` are overwritten from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub min_freq: u64,
    pub model: ArchConfig,
    pub moe: MoeSettings,
    pub teacher: TrainConfig,
    pub distill: DistillConfig,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSource::default(),
            min_freq: 1,
            model: ArchConfig::default(),
            moe: MoeSettings::default(),
            teacher: TrainConfig::default(),
            distill: DistillConfig::default(),
            bench: BenchSettings::default(),
        }
    }
}

const TEACHER_STREAM: u64 = 1;
const STUDENT_STREAM: u64 = 2;
const GATE_STREAM: u64 = 3;
const ROUTING_STREAM: u64 = 100;
const ADAPT_STREAM: u64 = 200;

/// Independent seed for one consumer of randomness.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.distill.validate()?;
        if let DataSource::Tsv { train, eval, .. } = &self.data {
            for p in [train, eval] {
                if !p.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        let m = &self.moe;
        if m.experts == 0 {
            return Err(Error::Config("moe.experts must be at least 1".into()));
        }
        let e = self.expert_dim();
        if m.shared_dim > e || m.shared_dim + m.experts * (e - m.shared_dim) > self.model.ffn_hidden {
            return Err(Error::Config(format!(
                "{} experts of width {e} sharing {} columns do not fit in ffn_hidden {}",
                m.experts, m.shared_dim, self.model.ffn_hidden
            )));
        }
        Ok(())
    }

    pub fn expert_dim(&self) -> usize {
        self.moe.expert_dim.unwrap_or(self.model.ffn_hidden / self.moe.experts.max(1))
    }

    pub fn model_config(&self, vocab_size: usize, num_labels: usize) -> ModelConfig {
        let a = &self.model;
        ModelConfig {
            vocab_size,
            embed_dim: a.embed_dim,
            ffn_hidden: a.ffn_hidden,
            layers: a.layers,
            heads: a.heads,
            max_seq_len: a.max_seq_len,
            num_labels,
            dropout: a.dropout,
            moe: None,
        }
    }

    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            experts: self.moe.experts,
            expert_dim: self.expert_dim(),
            shared_dim: self.moe.shared_dim,
            routing: self.moe.routing,
        }
    }

    pub fn teacher_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, TEACHER_STREAM),
            ..self.teacher.clone()
        }
    }

    pub fn student_train(&self) -> DistillConfig {
        let mut d = self.distill.clone();
        d.train.seed = derive_seed(self.seed, STUDENT_STREAM);
        d
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Raw text splits before encoding.
pub fn load_text(cfg: &RunConfig) -> Result<(TextDataset, TextDataset)> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let task = spec.generate()?;
            Ok((task.train, task.eval))
        }
        DataSource::Tsv { train, eval, has_header } => {
            let train = load_tsv(train, *has_header, None)?;
            let eval = load_tsv(eval, *has_header, Some(&train.labels))?;
            Ok((train, eval))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Builds the vocabulary from the training split and encodes both splits.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (train, eval) = load_text(cfg)?;
    let texts: Vec<&str> = train.texts().collect();
    let vocab = Vocab::build(&texts, cfg.min_freq)?;
    encode_with(cfg, vocab, &train, &eval)
}

fn encode_with(cfg: &RunConfig, vocab: Vocab, train: &TextDataset, eval: &TextDataset) -> Result<PreparedData> {
    let max_len = cfg.model.max_seq_len;
    Ok(PreparedData {
        train: train.encode(&vocab, max_len),
        eval: eval.encode(&vocab, max_len),
        vocab,
    })
}

/// Dense model trained with cross-entropy.
pub fn run_teacher(cfg: &RunConfig, data: &PreparedData) -> Result<(EncoderModel, Vec<MetricRecord>)> {
    let model_cfg = cfg.model_config(data.vocab.len(), data.train.num_labels);
    train_teacher(&model_cfg, &cfg.teacher_train(), &data.train, Some(&data.eval))
}

/// Splits every FFN of `teacher` into experts and attaches routing.
pub fn adapt_student(cfg: &RunConfig, teacher: &EncoderModel, table: &ImportanceTable, freqs: &[u64]) -> Result<EncoderModel> {
    cfg.validate()?;
    let layers = teacher.num_layers();
    if table.layers() != layers {
        return Err(Error::Invalid(format!("importance table has {} layers, model has {layers}", table.layers())));
    }
    let moe = cfg.moe_config();
    let experts = (0..layers)
        .map(|l| {
            let set = adapt_with_strategy(
                cfg.moe.adaptation,
                &teacher.dense_ffn(l)?,
                &table.ordering[l],
                moe.experts,
                moe.shared_dim,
                moe.expert_dim,
                derive_seed(cfg.seed, ADAPT_STREAM + l as u64),
            )?;
            let routing = build_routing(moe.routing, freqs, moe.experts, derive_seed(cfg.seed, ROUTING_STREAM + l as u64))?;
            Ok((set, routing))
        })
        .collect::<Result<Vec<_>>>()?;
    teacher.with_experts(&moe, experts, derive_seed(cfg.seed, GATE_STREAM))
}

pub fn run_distill(
    cfg: &RunConfig,
    student: &mut EncoderModel,
    teacher: &EncoderModel,
    data: &PreparedData,
) -> Result<Vec<MetricRecord>> {
    train_student(student, teacher, &cfg.student_train(), &data.train, Some(&data.eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub examples: usize,
    pub correct: usize,
    pub accuracy: f64,
}

// ---- file-backed stages ----

fn write(cfg: &RunConfig, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.path(name), contents)?;
    Ok(())
}

fn read_artifact(cfg: &RunConfig, name: &str) -> Result<Vec<u8>> {
    std::fs::read(cfg.path(name)).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(cfg.path(name).display().to_string()),
        _ => Error::Io(e),
    })
}

fn vocab_ref(cfg: &RunConfig) -> Result<ArtifactRef> {
    Ok(ArtifactRef {
        path: VOCAB_FILE.to_string(),
        sha256: sha256_hex(&read_artifact(cfg, VOCAB_FILE)?),
    })
}

/// Data encoded with the vocabulary stored in `out_dir`.
pub fn load_prepared(cfg: &RunConfig) -> Result<PreparedData> {
    let bytes = read_artifact(cfg, VOCAB_FILE)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let vocab = Vocab::from_json(&value)?;
    let (train, eval) = load_text(cfg)?;
    encode_with(cfg, vocab, &train, &eval)
}

fn load_model(cfg: &RunConfig, name: &str) -> Result<(EncoderModel, CheckpointMeta)> {
    load_checkpoint(&cfg.path(name)).map_err(|e| match e {
        Error::MissingArtifact(_) => Error::MissingArtifact(cfg.path(name).display().to_string()),
        other => other,
    })
}

/// Writes vocab.json, teacher.ckpt and teacher_metrics.jsonl.
pub fn stage_train_teacher(cfg: &RunConfig) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    write(cfg, VOCAB_FILE, serde_json::to_vec(&data.vocab.to_json())?)?;
    let (teacher, records) = run_teacher(cfg, &data)?;
    let meta = CheckpointMeta {
        vocab: Some(vocab_ref(cfg)?),
        importance_digest: None,
    };
    save_checkpoint(&teacher, &meta, &cfg.path(TEACHER_CKPT))?;
    write(cfg, TEACHER_METRICS, metrics_jsonl(&records))?;
    Ok(records)
}

/// Scores the teacher's FFN neurons over the training split.
pub fn stage_importance(cfg: &RunConfig) -> Result<ImportanceTable> {
    cfg.validate()?;
    let (teacher, _) = load_model(cfg, TEACHER_CKPT)?;
    let data = load_prepared(cfg)?;
    let table = accumulate_importance(&teacher, &data.train)?;
    write(cfg, IMPORTANCE_FILE, table.to_json())?;
    Ok(table)
}

/// Builds student_init.ckpt from the teacher and importance.json.
pub fn stage_adapt(cfg: &RunConfig) -> Result<EncoderModel> {
    cfg.validate()?;
    let (teacher, _) = load_model(cfg, TEACHER_CKPT)?;
    let table_bytes = read_artifact(cfg, IMPORTANCE_FILE)?;
    let table = ImportanceTable::from_json(std::str::from_utf8(&table_bytes).map_err(|e| Error::Data(e.to_string()))?)?;
    let data = load_prepared(cfg)?;
    let student = adapt_student(cfg, &teacher, &table, data.vocab.freqs())?;
    let meta = CheckpointMeta {
        vocab: Some(vocab_ref(cfg)?),
        importance_digest: Some(table.digest()),
    };
    save_checkpoint(&student, &meta, &cfg.path(STUDENT_INIT_CKPT))?;
    Ok(student)
}

/// Trains the adapted student against the teacher.
pub fn stage_distill(cfg: &RunConfig) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let (teacher, _) = load_model(cfg, TEACHER_CKPT)?;
    let (mut student, meta) = load_model(cfg, STUDENT_INIT_CKPT)?;
    let data = load_prepared(cfg)?;
    let records = run_distill(cfg, &mut student, &teacher, &data)?;
    save_checkpoint(&student, &meta, &cfg.path(STUDENT_CKPT))?;
    write(cfg, STUDENT_METRICS, metrics_jsonl(&records))?;
    Ok(records)
}

/// Accuracy of a checkpoint from `out_dir` on the eval split.
pub fn stage_eval(cfg: &RunConfig, checkpoint: &str) -> Result<EvalReport> {
    let (model, _) = load_model(cfg, checkpoint)?;
    let data = load_prepared(cfg)?;
    let mut correct = 0;
    for batch in data.eval.batches(64, None) {
        correct += model.predict(&batch)?.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    let examples = data.eval.len();
    if examples == 0 {
        return Err(Error::Data("eval split is empty".into()));
    }
    let report = EvalReport {
        checkpoint: checkpoint.to_string(),
        examples,
        correct,
        accuracy: correct as f64 / examples as f64,
    };
    write(cfg, EVAL_FILE, serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Times the teacher against the distilled student.
pub fn stage_bench(cfg: &RunConfig) -> Result<BenchComparison> {
    let (teacher, _) = load_model(cfg, TEACHER_CKPT)?;
    let (student, _) = load_model(cfg, STUDENT_CKPT)?;
    let report = bench_compare(&teacher, &student, &cfg.bench)?;
    write(cfg, BENCH_FILE, serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub teacher_eval_acc: f64,
    pub student_eval_acc: f64,
    pub bench: BenchComparison,
}

/// All stages in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    stage_train_teacher(cfg)?;
    stage_importance(cfg)?;
    stage_adapt(cfg)?;
    stage_distill(cfg)?;
    let teacher = stage_eval(cfg, TEACHER_CKPT)?;
    let student = stage_eval(cfg, STUDENT_CKPT)?;
    let bench = stage_bench(cfg)?;
    Ok(PipelineReport {
        teacher_eval_acc: teacher.accuracy,
        student_eval_acc: student.accuracy,
        bench,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(dir: &Path) -> RunConfig {
        RunConfig {
            out_dir: dir.to_path_buf(),
            data: DataSource::Synthetic(SyntheticSpec {
                n_train: 48,
                n_eval: 16,
                vocab_size: 80,
                signal_per_class: 4,
                ..SyntheticSpec::default()
            }),
            model: ArchConfig {
                embed_dim: 8,
                ffn_hidden: 16,
                layers: 1,
                heads: 2,
                max_seq_len: 24,
                dropout: 0.1,
            },
            moe: MoeSettings {
                experts: 2,
                shared_dim: 2,
                ..MoeSettings::default()
            },
            teacher: TrainConfig {
                epochs: 1,
                batch_size: 16,
                ..TrainConfig::default()
            },
            distill: DistillConfig {
                train: TrainConfig {
                    epochs: 1,
                    batch_size: 16,
                    ..TrainConfig::default()
                },
                ..DistillConfig::default()
            },
            bench: BenchSettings {
                seq_len: 8,
                repeats: 1,
                warmup: 0,
                examples: 2,
                seed: 0,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.expert_dim(), 64);
        let err = RunConfig::from_json(r#"{"sede": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("sede")));
        let err = RunConfig::from_json(r#"{"moe": {"routing": "nearest"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn validate_rejects_bad_moe_and_missing_paths() {
        let mut cfg = RunConfig::default();
        cfg.moe.shared_dim = 65;
        assert!(cfg.validate().is_err());
        cfg.moe.shared_dim = 0;
        cfg.moe.expert_dim = Some(65);
        assert!(cfg.validate().is_err());
        cfg.moe.expert_dim = Some(70);
        cfg.moe.shared_dim = 20;
        assert!(cfg.validate().is_ok());
        cfg.data = DataSource::Tsv {
            train: "/nonexistent/train.tsv".into(),
            eval: "/nonexistent/eval.tsv".into(),
            has_header: false,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("train.tsv")));
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..4 {
            for stream in [TEACHER_STREAM, STUDENT_STREAM, GATE_STREAM, ROUTING_STREAM, ROUTING_STREAM + 1, ADAPT_STREAM] {
                assert!(seen.insert(derive_seed(seed, stream)));
            }
        }
    }

    #[test]
    fn adapt_before_importance_names_the_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        stage_train_teacher(&cfg).unwrap();
        match stage_adapt(&cfg) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with(IMPORTANCE_FILE)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pipeline_writes_every_artifact_and_records_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let report = run_pipeline(&cfg).unwrap();
        for name in [VOCAB_FILE, TEACHER_CKPT, TEACHER_METRICS, IMPORTANCE_FILE, STUDENT_INIT_CKPT, STUDENT_CKPT, STUDENT_METRICS, EVAL_FILE, BENCH_FILE] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let (student, meta) = load_checkpoint(&dir.path().join(STUDENT_CKPT)).unwrap();
        let table = ImportanceTable::from_json(&std::fs::read_to_string(dir.path().join(IMPORTANCE_FILE)).unwrap()).unwrap();
        assert_eq!(meta.importance_digest, Some(table.digest()));
        assert_eq!(meta.vocab.unwrap().sha256, sha256_hex(&std::fs::read(dir.path().join(VOCAB_FILE)).unwrap()));
        assert!(!student.is_dense());
        assert!(report.bench.moe.effective_params < report.bench.dense.effective_params);
        assert!((0.0..=1.0).contains(&report.student_eval_acc));
    }
}
