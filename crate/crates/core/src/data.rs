//! Whitespace vocabulary, TSV ingestion, batching and the synthetic task.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    freqs: Vec<u64>,
}

impl Vocab {
    /// Counts whitespace tokens; tokens seen at least `min_freq` times get ids
    /// by descending frequency, then lexicographically. The rest count as UNK.
    pub fn build<S: AsRef<str>>(lines: &[S], min_freq: u64) -> Result<Self> {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, u64)> = counts.iter().filter(|(_, &c)| c >= min_freq).map(|(&t, &c)| (t, c)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let unk: u64 = counts.values().filter(|&&c| c < min_freq).sum();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0, unk, 0];
        for (t, c) in kept {
            tokens.push(t.to_string());
            freqs.push(c);
        }
        Self::from_parts(tokens, freqs)
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Result<Self> {
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Data("duplicate token in vocabulary".into()));
        }
        Ok(Self { tokens, index, freqs })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Corpus frequency of every id (PAD and CLS are always 0).
    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    /// `[CLS]` followed by token ids, truncated to `max_len` positions.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        std::iter::once(CLS)
            .chain(text.split_whitespace().map(|t| self.id(t)))
            .take(max_len.max(1))
            .collect()
    }

    /// Space-joined tokens, skipping PAD and CLS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != CLS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `{token: [id, freq]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, (usize, u64)> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), (i, self.freqs[i])))
            .collect();
        serde_json::to_value(map).expect("vocab serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, (usize, u64)> = serde_json::from_value(value.clone())?;
        let n = map.len();
        let mut tokens = vec![None; n];
        let mut freqs = vec![0; n];
        for (t, (id, f)) in map {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| Error::Data(format!("vocabulary id {id} not dense in 0..{n}")))?;
            if slot.replace(t).is_some() {
                return Err(Error::Data(format!("vocabulary id {id} used twice")));
            }
            freqs[id] = f;
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense ids")).collect();
        if tokens.len() < 3 || tokens[..3] != RESERVED {
            return Err(Error::Data("vocabulary lacks reserved tokens".into()));
        }
        Self::from_parts(tokens, freqs)
    }
}

/// Labelled text rows plus the frozen, sorted label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextDataset {
    pub rows: Vec<(String, usize)>,
    pub labels: Vec<String>,
}

impl TextDataset {
    /// Assigns label ids from the sorted set of distinct label strings.
    pub fn from_labelled(rows: Vec<(String, String)>) -> Self {
        let labels: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let rows = rows
            .into_iter()
            .map(|(t, l)| {
                let id = labels.binary_search(&l).expect("label in set");
                (t, id)
            })
            .collect();
        Self { rows, labels }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|(t, _)| t.as_str())
    }

    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> Dataset {
        Dataset {
            examples: self
                .rows
                .iter()
                .map(|(t, l)| Example {
                    ids: vocab.encode(t, max_len),
                    label: *l,
                })
                .collect(),
            num_labels: self.labels.len(),
        }
    }
}

/// Reads `text<TAB>label` lines. With `labels`, rows must use those labels
/// (evaluation); otherwise the label set is inferred and sorted.
pub fn load_tsv(path: &Path, has_header: bool, labels: Option<&[String]>) -> Result<TextDataset> {
    let content = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate().skip(usize::from(has_header)) {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let (text, label) = line
            .rsplit_once('\t')
            .ok_or_else(|| parse_err("expected text<TAB>label".into()))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(parse_err("empty label".into()));
        }
        if let Some(known) = labels {
            if !known.iter().any(|l| l == label) {
                return Err(parse_err(format!("unknown label {label:?}")));
            }
        }
        rows.push((text.to_string(), label.to_string()));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} holds no examples", path.display())));
    }
    match labels {
        Some(known) => Ok(TextDataset {
            rows: rows
                .into_iter()
                .map(|(t, l)| {
                    let id = known.iter().position(|k| *k == l).expect("checked");
                    (t, id)
                })
                .collect(),
            labels: known.to_vec(),
        }),
        None => Ok(TextDataset::from_labelled(rows)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_labels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Consecutive batches, shuffled first when `rng` is given.
    pub fn batches(&self, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order
            .chunks(batch_size.max(1))
            .map(|idx| make_batch(&idx.iter().map(|&i| &self.examples[i]).collect::<Vec<_>>()))
            .collect()
    }
}

/// Pads to the longest example of the batch.
pub fn make_batch(examples: &[&Example]) -> Batch {
    let seq = examples.iter().map(|e| e.ids.len()).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(examples.len() * seq);
    let mut mask = Vec::with_capacity(examples.len() * seq);
    for e in examples {
        ids.extend_from_slice(&e.ids);
        mask.extend(std::iter::repeat_n(1.0, e.ids.len()));
        ids.extend(std::iter::repeat_n(PAD, seq - e.ids.len()));
        mask.extend(std::iter::repeat_n(0.0, seq - e.ids.len()));
    }
    Batch {
        ids,
        mask,
        labels: examples.iter().map(|e| e.label).collect(),
        batch: examples.len(),
        seq,
    }
}

/// Parameters of the synthetic classification task.
///
/// Every class owns `signal_per_class` tokens. A sentence holds Zipf
/// background tokens, `k` signal tokens of its class and fewer than `k`
/// signal tokens of one other class, so the majority signal class is always
/// the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_classes: usize,
    /// Distinct word types, signal and background together.
    pub vocab_size: usize,
    pub signal_per_class: usize,
    pub min_signal: usize,
    pub max_signal: usize,
    pub min_background: usize,
    pub max_background: usize,
    pub zipf_exponent: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_eval: 500,
            n_classes: 4,
            vocab_size: 400,
            signal_per_class: 12,
            min_signal: 2,
            max_signal: 3,
            min_background: 6,
            max_background: 14,
            zipf_exponent: 1.1,
        }
    }
}

pub struct SyntheticTask {
    pub train: TextDataset,
    pub eval: TextDataset,
    /// Training texts, the corpus the vocabulary is built from.
    pub corpus: Vec<String>,
}

impl SyntheticSpec {
    pub fn signal_token(&self, class: usize, j: usize) -> String {
        format!("s{class}_{j}")
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("synthetic task needs at least 2 classes".into()));
        }
        if self.signal_per_class == 0 || self.vocab_size <= self.n_classes * self.signal_per_class {
            return Err(Error::Config(format!(
                "vocab_size {} too small for {} classes of {} signal tokens plus background",
                self.vocab_size, self.n_classes, self.signal_per_class
            )));
        }
        if self.min_signal < 2 || self.max_signal < self.min_signal || self.max_background < self.min_background {
            return Err(Error::Config("synthetic length ranges invalid (need 2 <= min_signal <= max_signal)".into()));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::Config("zipf_exponent must be positive".into()));
        }
        Ok(())
    }

    /// Train/eval splits with exactly balanced classes, shuffled.
    pub fn generate(&self) -> Result<SyntheticTask> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let background = self.vocab_size - self.n_classes * self.signal_per_class;
        let zipf = Zipf::new(background as f64, self.zipf_exponent).map_err(|e| Error::Config(e.to_string()))?;
        let split = |n: usize, rng: &mut ChaCha8Rng| {
            let mut classes: Vec<usize> = (0..n).map(|i| i % self.n_classes).collect();
            classes.shuffle(rng);
            let rows: Vec<(String, usize)> = classes
                .into_iter()
                .map(|c| (self.sentence(c, &zipf, rng), c))
                .collect();
            TextDataset {
                rows,
                labels: (0..self.n_classes).map(|c| c.to_string()).collect(),
            }
        };
        let train = split(self.n_train, &mut rng);
        let eval = split(self.n_eval, &mut rng);
        let corpus = train.texts().map(str::to_string).collect();
        Ok(SyntheticTask { train, eval, corpus })
    }

    fn sentence(&self, class: usize, zipf: &Zipf<f64>, rng: &mut ChaCha8Rng) -> String {
        let k = rng.random_range(self.min_signal..=self.max_signal);
        let other = (class + rng.random_range(1..self.n_classes)) % self.n_classes;
        let distractors = rng.random_range(0..k);
        let n_bg = rng.random_range(self.min_background..=self.max_background);
        let mut words: Vec<String> = Vec::with_capacity(k + distractors + n_bg);
        for _ in 0..k {
            words.push(self.signal_token(class, rng.random_range(0..self.signal_per_class)));
        }
        for _ in 0..distractors {
            words.push(self.signal_token(other, rng.random_range(0..self.signal_per_class)));
        }
        for _ in 0..n_bg {
            let rank = zipf.sample(rng) as usize;
            words.push(format!("w{}", rank - 1));
        }
        words.shuffle(rng);
        words.join(" ")
    }

    /// Majority vote over signal tokens (ties to the lowest class).
    pub fn majority_signal_class(&self, text: &str) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for tok in text.split_whitespace() {
            if let Some((c, _)) = tok.strip_prefix('s').and_then(|r| r.split_once('_')) {
                if let Ok(c) = c.parse::<usize>() {
                    if c < self.n_classes {
                        votes[c] += 1;
                    }
                }
            }
        }
        crate::model::argmax(&votes.iter().map(|&v| v as f64).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    #[test]
    fn vocab_orders_by_frequency() {
        let v = Vocab::build(&["a a b"], 1).unwrap();
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.freqs(), &[0, 0, 0, 2, 1]);
        let v = Vocab::build(&["a a b"], 2).unwrap();
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.len(), 4);
        assert_eq!(v.freqs()[UNK], 1);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build(&["z y x", "x y z"], 1).unwrap();
        assert_eq!((v.id("x"), v.id("y"), v.id("z")), (3, 4, 5));
    }

    #[test]
    fn frequency_table_matches_recount() {
        let task = SyntheticSpec {
            n_train: 300,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let v = Vocab::build(&task.corpus, 1).unwrap();
        let mut recount: HashMap<&str, u64> = HashMap::new();
        let mut total = 0;
        for line in &task.corpus {
            for t in line.split_whitespace() {
                *recount.entry(t).or_default() += 1;
                total += 1;
            }
        }
        for (t, c) in recount {
            assert_eq!(v.freqs()[v.id(t)], c);
        }
        assert_eq!(v.freqs().iter().sum::<u64>(), total);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(Vocab::build(&["", "  "], 1), Err(Error::Data(_))));
    }

    #[test]
    fn encode_and_decode() {
        let v = Vocab::build(&["the cat sat"], 1).unwrap();
        assert_eq!(v.encode("", 8), vec![CLS]);
        let ids = v.encode("the cat sat", 8);
        assert_eq!(ids.len(), 4);
        assert_eq!(v.decode(&ids), "the cat sat");
        assert_eq!(v.encode("the cat sat", 3), ids[..3].to_vec());
        assert_eq!(v.encode("dog", 8), vec![CLS, UNK]);
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocab::build(&["b a a c c c"], 1).unwrap();
        let j = v.to_json();
        assert_eq!(j["a"], serde_json::json!([4, 2]));
        assert_eq!(Vocab::from_json(&j).unwrap(), v);
    }

    #[test]
    fn batch_pads_to_longest() {
        let a = Example { ids: vec![2, 5, 6], label: 1 };
        let b = Example { ids: vec![2], label: 0 };
        let batch = make_batch(&[&a, &b]);
        assert_eq!(batch.seq, 3);
        assert_eq!(batch.ids, vec![2, 5, 6, 2, 0, 0]);
        assert_eq!(batch.mask, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(batch.labels, vec![1, 0]);
    }

    fn write(content: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content).unwrap();
        f
    }

    #[test]
    fn tsv_parses_lines_and_headers() {
        let f = write(b"good movie\t1\nbad film\t0\n");
        let d = load_tsv(f.path(), false, None).unwrap();
        assert_eq!(d.rows[0], ("good movie".to_string(), 1));
        assert_eq!(d.labels, vec!["0", "1"]);
        let f = write(b"sentence\tlabel\ngood movie\t1\n");
        assert_eq!(load_tsv(f.path(), true, None).unwrap().rows.len(), 1);
    }

    #[test]
    fn crlf_and_lf_parse_identically() {
        let lf = write(b"a b\tx\nc\ty\n");
        let crlf = write(b"a b\tx\r\nc\ty\r\n");
        assert_eq!(load_tsv(lf.path(), false, None).unwrap(), load_tsv(crlf.path(), false, None).unwrap());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write(b"ok\t1\nno label here\n");
        match load_tsv(f.path(), false, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_eval_label_is_rejected() {
        let f = write(b"x\t2\n");
        let known = vec!["0".to_string(), "1".to_string()];
        assert!(matches!(load_tsv(f.path(), false, Some(&known)), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn synthetic_signal_sets_are_disjoint() {
        let spec = SyntheticSpec::default();
        let mut all = BTreeSet::new();
        for c in 0..spec.n_classes {
            for j in 0..spec.signal_per_class {
                assert!(all.insert(spec.signal_token(c, j)));
            }
        }
    }

    #[test]
    fn synthetic_majority_classifier_is_perfect() {
        let spec = SyntheticSpec::default();
        let task = spec.generate().unwrap();
        for d in [&task.train, &task.eval] {
            for (text, label) in &d.rows {
                assert_eq!(spec.majority_signal_class(text), *label);
            }
        }
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let spec = SyntheticSpec {
            n_train: 1000,
            ..Default::default()
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        for c in 0..spec.n_classes {
            let frac = a.train.rows.iter().filter(|r| r.1 == c).count() as f64 / 1000.0;
            assert!((frac - 0.25).abs() <= 0.02);
        }
        let other = SyntheticSpec { seed: 1, ..spec }.generate().unwrap();
        assert_ne!(other.train, a.train);
    }

    #[test]
    fn synthetic_rejects_tiny_vocab() {
        let spec = SyntheticSpec {
            vocab_size: 48,
            ..Default::default()
        };
        assert!(matches!(spec.generate(), Err(Error::Config(_))));
        assert!(SyntheticSpec { n_classes: 1, ..Default::default() }.generate().is_err());
    }
}
