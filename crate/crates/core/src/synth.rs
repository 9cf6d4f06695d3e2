//! Synthetic corpora.
//!
//! The knowledge-planted corpus assigns each report a finding class. Image
//! features are seeded noise and carry no label; only the retrieval
//! embeddings cluster by class. A model can therefore recover the finding
//! sentence only through retrieved knowledge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{assign_splits, stable_seed, Corpus, FeatureSource, Report, Split, TokenizerConfig};
use crate::error::Result;
use crate::retrieval::EmbeddingStore;

const TOY_REPORTS: [&str; 8] = [
    "the heart size is normal . the lungs are clear .",
    "the cardiac silhouette is enlarged . no pleural effusion .",
    "there is opacity in the right lower lobe .",
    "small left pleural effusion . no pneumothorax .",
    "the lungs are hyperinflated . no focal consolidation .",
    "there is atelectasis in the left lower lobe .",
    "stable calcified granuloma in the right upper lobe .",
    "no acute cardiopulmonary abnormality .",
];

/// Eight short distinct reports, all in the train split, every token kept.
pub fn toy_corpus() -> Corpus {
    let cfg = TokenizerConfig {
        min_freq: 1,
        ..Default::default()
    };
    let reports = TOY_REPORTS
        .iter()
        .enumerate()
        .map(|(i, t)| Report::new(format!("toy{i}"), *t, Split::Train, FeatureSource::Seed(1000 + i as u64), &cfg))
        .collect();
    Corpus::new(reports, cfg).expect("toy ids are unique")
}

/// Finding classes: (slot replaced, sentence). Class 0 is normal.
const FINDINGS: [(usize, &str); 6] = [
    (usize::MAX, ""),
    (0, "the cardiac silhouette is enlarged ."),
    (2, "there is a small pleural effusion in the right base ."),
    (1, "there is opacity in the right lower lobe ."),
    (2, "there is a small pneumothorax at the left apex ."),
    (1, "there is atelectasis in the left lower lobe ."),
];

const NORMAL_SLOTS: [&str; 3] = [
    "the heart size is normal .",
    "the lungs are clear .",
    "no pleural effusion or pneumothorax .",
];

const OPTIONAL_TAIL: &str = "the osseous structures are unremarkable .";

pub fn n_classes() -> usize {
    FINDINGS.len()
}

pub fn class_report(class: usize, tail: bool) -> String {
    let (slot, sentence) = FINDINGS[class];
    let mut parts: Vec<&str> = NORMAL_SLOTS.to_vec();
    if slot != usize::MAX {
        parts[slot] = sentence;
    }
    if tail {
        parts.push(OPTIONAL_TAIL);
    }
    parts.join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeCorpusConfig {
    pub n_reports: usize,
    pub embedding_dim: usize,
    /// Uniform noise amplitude added to each class centre.
    pub noise: f64,
    /// Probability that a report is normal.
    pub p_normal: f64,
    pub seed: u64,
}

impl Default for KnowledgeCorpusConfig {
    fn default() -> Self {
        KnowledgeCorpusConfig {
            n_reports: 240,
            embedding_dim: 16,
            noise: 0.25,
            p_normal: 0.35,
            seed: 7,
        }
    }
}

pub struct KnowledgeCorpus {
    pub corpus: Corpus,
    pub embeddings: EmbeddingStore,
    pub labels: Vec<usize>,
}

pub fn knowledge_corpus(cfg: &KnowledgeCorpusConfig) -> Result<KnowledgeCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.embedding_dim;
    let centers: Vec<Vec<f64>> = (0..n_classes()).map(|_| (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect()).collect();
    let tok = TokenizerConfig::default();
    let splits = assign_splits(cfg.n_reports, tok.split_ratio, cfg.seed);
    let mut reports = Vec::with_capacity(cfg.n_reports);
    let mut rows = Vec::with_capacity(cfg.n_reports);
    let mut labels = Vec::with_capacity(cfg.n_reports);
    for (i, split) in splits.into_iter().enumerate() {
        let class = if rng.gen_bool(cfg.p_normal) { 0 } else { rng.gen_range(1..n_classes()) };
        let text = class_report(class, rng.gen_bool(0.5));
        let id = format!("k{i:04}");
        let source = FeatureSource::Seed(stable_seed(&id) ^ cfg.seed);
        reports.push(Report::new(id, text, split, source, &tok));
        rows.push(centers[class].iter().map(|c| c + rng.gen_range(-cfg.noise..=cfg.noise)).collect::<Vec<f64>>());
        labels.push(class);
    }
    let ids = reports.iter().map(|r| r.id.clone()).collect();
    Ok(KnowledgeCorpus {
        corpus: Corpus::new(reports, tok)?,
        embeddings: EmbeddingStore::new(ids, &rows)?,
        labels,
    })
}
