//! Report corpora: tokenization, JSON-lines loading, vocabulary, splits and
//! deterministic stand-in image features.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kift::KiftMatrix;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const PERIOD: &str = ".";

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Path(PathBuf),
    Seed(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub drop_deid: bool,
    pub min_freq: usize,
    /// train:val:test ratio for records without an explicit split.
    pub split_ratio: [u32; 3],
    pub split_seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            drop_deid: true,
            min_freq: 3,
            split_ratio: [7, 1, 2],
            split_seed: 42,
        }
    }
}

/// Lowercases, strips punctuation and keeps sentence-final periods as `"."`
/// tokens. Periods between two alphanumerics (`1.5`) are removed like other
/// punctuation; runs of periods collapse to one.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    tokenize_keeping(text, config, &[])
}

/// Like [`tokenize`] but emits each char in `keep` as its own token instead
/// of stripping it. Used to retain clause boundaries such as `;`.
pub fn tokenize_keeping(text: &str, config: &TokenizerConfig, keep: &[char]) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens: Vec<String> = Vec::new();
    let mut word = String::new();

    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            if !(config.drop_deid && is_deid_placeholder(word)) {
                tokens.push(std::mem::take(word));
            }
            word.clear();
        }
    };

    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase().filter(|l| l.is_alphanumeric()));
        } else if c == '.' {
            let prev = i > 0 && chars[i - 1].is_alphanumeric();
            let next = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if prev && next {
                continue;
            }
            flush(&mut word, &mut tokens);
            if tokens.last().is_some_and(|t| t != PERIOD) {
                tokens.push(PERIOD.to_string());
            }
        } else if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if keep.contains(&c) {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn is_deid_placeholder(word: &str) -> bool {
    word.len() >= 3 && word.chars().all(|c| c == 'x')
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub split: Split,
    pub feature_source: FeatureSource,
}

impl Report {
    pub fn new(id: impl Into<String>, text: impl Into<String>, split: Split, feature_source: FeatureSource, config: &TokenizerConfig) -> Self {
        let text = text.into();
        let tokens = tokenize(&text, config);
        Report {
            id: id.into(),
            text,
            tokens,
            split,
            feature_source,
        }
    }

    /// Tokens joined by single spaces; the form used for references.
    pub fn normalized(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Token ↔ index map with `<pad>`, `<bos>`, `<eos>`, `<unk>` at 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// count then lexicographically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Builds from the non-reserved tokens in index order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Ids to text, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    reports: Vec<Report>,
    vocab: Vocab,
    config: TokenizerConfig,
    by_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_source: Option<FeatureSource>,
}

impl Corpus {
    /// Builds a corpus; the vocabulary comes from the train split.
    pub fn new(reports: Vec<Report>, config: TokenizerConfig) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(reports.len());
        for (i, r) in reports.iter().enumerate() {
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let vocab = Vocab::build(
            reports
                .iter()
                .filter(|r| r.split == Split::Train)
                .flat_map(|r| r.tokens.iter().map(String::as_str)),
            config.min_freq,
        );
        Ok(Corpus {
            reports,
            vocab,
            config,
            by_id,
        })
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn get(&self, id: &str) -> Option<&Report> {
        self.by_id.get(id).map(|&i| &self.reports[i])
    }

    pub fn require(&self, id: &str) -> Result<&Report> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Report> {
        self.reports.iter().filter(move |r| r.split == split)
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.split(split).map(|r| r.id.clone()).collect()
    }

    /// The reports of one split as a corpus of their own, sharing this
    /// corpus's vocabulary.
    pub fn subset(&self, split: Split) -> Corpus {
        let reports: Vec<Report> = self.split(split).cloned().collect();
        let by_id = reports.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Corpus {
            reports,
            vocab: self.vocab.clone(),
            config: self.config.clone(),
            by_id,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            let rec = Record {
                id: r.id.clone(),
                text: r.text.clone(),
                split: Some(r.split),
                feature_source: Some(r.feature_source.clone()),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses JSON-lines. Records without `split` are assigned one by a seeded
    /// shuffle at the configured ratio; records without `feature_source` get
    /// a seed derived from their id.
    pub fn from_jsonl(text: &str, config: &TokenizerConfig) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::DuplicateId(rec.id));
            }
            records.push(rec);
        }
        let unsplit: Vec<usize> = (0..records.len()).filter(|&i| records[i].split.is_none()).collect();
        let assigned = assign_splits(unsplit.len(), config.split_ratio, config.split_seed);
        for (&i, s) in unsplit.iter().zip(assigned) {
            records[i].split = Some(s);
        }
        let reports = records
            .into_iter()
            .map(|r| {
                let source = r.feature_source.unwrap_or_else(|| FeatureSource::Seed(stable_seed(&r.id)));
                Report::new(r.id, r.text, r.split.expect("assigned"), source, config)
            })
            .collect();
        Corpus::new(reports, config.clone())
    }
}

pub fn load_corpus(path: &Path, config: &TokenizerConfig) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_jsonl(&text, config)
}

/// Split labels for `n` items at `ratio`, in item order after a seeded
/// shuffle.
pub fn assign_splits(n: usize, ratio: [u32; 3], seed: u64) -> Vec<Split> {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum::<u64>().max(1);
    let n_train = ((n as u64 * ratio[0] as u64 + total / 2) / total) as usize;
    let n_val = (((n as u64 * ratio[1] as u64 + total / 2) / total) as usize).min(n - n_train.min(n));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// FNV-1a; stable across platforms and releases.
pub fn stable_seed(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Uniform `[-1, 1]` features from a seed; stands in for a CNN patch grid.
pub fn synth_image_features(seed: u64, n_patches: usize, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n_patches * d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::matrix(n_patches, d, data).expect("shape matches")
}

/// Patch features for `report`: read from its KIFT file (relative paths
/// resolve against `base_dir`) or synthesized from its seed.
pub fn load_features(report: &Report, base_dir: &Path, n_patches: usize, d: usize) -> Result<Tensor> {
    match &report.feature_source {
        FeatureSource::Seed(seed) => Ok(synth_image_features(*seed, n_patches, d)),
        FeatureSource::Path(p) => {
            let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            let m = KiftMatrix::read(&path)?;
            if m.cols != d {
                return Err(Error::Format(format!("{}: feature width {} but model expects {d}", path.display(), m.cols)));
            }
            Tensor::matrix(m.rows, m.cols, m.to_f64())
        }
    }
}
