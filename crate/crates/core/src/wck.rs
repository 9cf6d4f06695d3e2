//! Weighted concept knowledge: per-report TF-IDF word scores, per-concept
//! weights, and the weighted concept matrix fed to the fusion module.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, Split, TokenizerConfig, PERIOD};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

const DEFAULT_CONCEPTS: &str = include_str!("../assets/concepts.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Noun,
    Adjective,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub name: String,
    pub tokens: Vec<String>,
    pub category: Category,
}

#[derive(Serialize, Deserialize)]
struct ConceptEntry {
    name: String,
    category: Category,
}

/// Ordered list of clinical concepts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptPackage {
    concepts: Vec<Concept>,
}

impl ConceptPackage {
    pub fn new(entries: impl IntoIterator<Item = (String, Category)>) -> Result<Self> {
        let cfg = TokenizerConfig::default();
        let mut seen = HashSet::new();
        let mut concepts = Vec::new();
        for (name, category) in entries {
            let tokens: Vec<String> = tokenize(&name, &cfg).into_iter().filter(|t| t != PERIOD).collect();
            if tokens.is_empty() {
                return Err(Error::InvalidArgument(format!("concept {name:?} has no tokens")));
            }
            let name = tokens.join(" ");
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateId(name));
            }
            concepts.push(Concept { name, tokens, category });
        }
        Ok(ConceptPackage { concepts })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<ConceptEntry> = serde_json::from_str(text)?;
        Self::new(entries.into_iter().map(|e| (e.name, e.category)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The shipped 76-entry lesion package.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_CONCEPTS).expect("bundled concept package is valid")
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<ConceptEntry> = self
            .concepts
            .iter()
            .map(|c| ConceptEntry {
                name: c.name.clone(),
                category: c.category,
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("serializable")
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }
}

/// Per-report word scores together with the corpus statistics they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfTable {
    pub n_reports: usize,
    pub doc_freq: BTreeMap<String, usize>,
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
}

impl TfIdfTable {
    pub fn score(&self, report_id: &str, word: &str) -> Option<f64> {
        self.scores.get(report_id)?.get(word).copied()
    }

    pub fn report(&self, report_id: &str) -> Result<&BTreeMap<String, f64>> {
        self.scores.get(report_id).ok_or_else(|| Error::UnknownId(report_id.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

fn words(tokens: &[String]) -> impl Iterator<Item = &str> {
    tokens.iter().map(String::as_str).filter(|t| *t != PERIOD)
}

/// `score(w, r) = n(w, r) / |r| · ln(|R| / (1 + df(w)))` for every word of
/// every report. Period tokens are not words and are skipped. Scores are
/// raw; clamping happens at the concept level.
pub fn compute_tfidf(corpus: &Corpus) -> Result<TfIdfTable> {
    if corpus.is_empty() {
        return Err(Error::Empty("compute_tfidf: corpus has no reports"));
    }
    let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
    for r in corpus.reports() {
        let distinct: BTreeSet<&str> = words(&r.tokens).collect();
        for w in distinct {
            *doc_freq.entry(w.to_string()).or_default() += 1;
        }
    }
    let n_reports = corpus.len();
    let per_report = par::map(corpus.reports(), |r| {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words(&r.tokens) {
            *counts.entry(w).or_default() += 1;
        }
        let total: usize = counts.values().sum();
        let scores: BTreeMap<String, f64> = counts
            .into_iter()
            .map(|(w, n)| {
                let tf = n as f64 / total as f64;
                let idf = (n_reports as f64 / (1.0 + doc_freq[w] as f64)).ln();
                (w.to_string(), tf * idf)
            })
            .collect();
        (r.id.clone(), scores)
    });
    Ok(TfIdfTable {
        n_reports,
        doc_freq,
        scores: per_report.into_iter().collect(),
    })
}

/// Concept weights aligned with a [`ConceptPackage`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn ones(n: usize) -> Self {
        WeightVector(vec![1.0; n])
    }

    pub fn zeros(n: usize) -> Self {
        WeightVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn occurs(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// `s_k` for one report: the mean TF-IDF score of concept `k`'s tokens when
/// they occur contiguously in the report, else 0. With `clamp`, negative
/// means become 0.
pub fn concept_weights(report_id: &str, table: &TfIdfTable, pkg: &ConceptPackage, corpus: &Corpus, clamp: bool) -> Result<WeightVector> {
    let report = corpus.require(report_id)?;
    let scores = table.report(report_id)?;
    let s = pkg
        .concepts()
        .iter()
        .map(|c| {
            if !occurs(&report.tokens, &c.tokens) {
                return 0.0;
            }
            let mean = c.tokens.iter().map(|t| scores.get(t).copied().unwrap_or(0.0)).sum::<f64>() / c.tokens.len() as f64;
            if clamp {
                mean.max(0.0)
            } else {
                mean
            }
        })
        .collect();
    Ok(WeightVector(s))
}

/// Test-time weights: the element-wise mean of the per-report weight vectors
/// of the retrieved training reports.
pub fn merge_test_weights(topk_ids: &[String], table: &TfIdfTable, pkg: &ConceptPackage, corpus: &Corpus, clamp: bool) -> Result<WeightVector> {
    if topk_ids.is_empty() {
        return Err(Error::Empty("merge_test_weights: no retrieved reports"));
    }
    let mut acc = vec![0.0; pkg.len()];
    for id in topk_ids {
        if corpus.require(id)?.split != Split::Train {
            return Err(Error::InvalidArgument(format!("retrieved report {id:?} is not in the train split")));
        }
        let w = concept_weights(id, table, pkg, corpus, clamp)?;
        acc.iter_mut().zip(w.0).for_each(|(a, x)| *a += x);
    }
    let k = topk_ids.len() as f64;
    Ok(WeightVector(acc.into_iter().map(|a| a / k).collect()))
}

/// `K_c[k, :] = s_k · F_c[k, :]`.
pub fn weighted_concept_knowledge(features: &Tensor, weights: &WeightVector) -> Result<Tensor> {
    if features.shape().len() != 2 || features.rows() != weights.len() {
        return Err(Error::shape("weighted_concept_knowledge", features.shape(), &[weights.len()]));
    }
    let d = features.cols();
    let data = features.data().iter().enumerate().map(|(i, &x)| x * weights.0[i / d]).collect();
    Tensor::matrix(features.rows(), d, data)
}
