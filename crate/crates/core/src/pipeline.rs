//! End-to-end composition: features, concept weights, retrieval, triplet
//! prompts, fusion and decoding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, load_features, Corpus, Report, Split, TokenizerConfig};
use crate::error::{Error, Result};
use crate::model::{generate, train, Example, GenerationOutput, Model, ModelConfig, ModelInput, TrainConfig, TrainReport};
use crate::par;
use crate::retrieval::{topk, EmbeddingStore, Encoder, Hit, SyntheticEncoder};
use crate::tensor::Tensor;
use crate::triplet::{encode_triplets, extract_triplets, load_triplets, Lexicons, Prompt, Triplet};
use crate::wck::{compute_tfidf, concept_weights, merge_test_weights, weighted_concept_knowledge, ConceptPackage, TfIdfTable, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeFlags {
    pub use_concepts: bool,
    pub use_weights: bool,
    pub use_triplets: bool,
}

impl Default for KnowledgeFlags {
    fn default() -> Self {
        KnowledgeFlags::ALL
    }
}

impl KnowledgeFlags {
    pub const NONE: Self = KnowledgeFlags {
        use_concepts: false,
        use_weights: false,
        use_triplets: false,
    };
    pub const ALL: Self = KnowledgeFlags {
        use_concepts: true,
        use_weights: true,
        use_triplets: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.use_weights && !self.use_concepts {
            return Err(Error::Config("use_weights requires use_concepts".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub concepts: Option<PathBuf>,
    pub lexicons: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Pre-extracted triplets (JSON-lines); replaces rule extraction.
    pub triplets: Option<PathBuf>,
    /// Base directory for relative feature paths.
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: None,
            concepts: None,
            lexicons: None,
            embeddings: None,
            triplets: None,
            features: None,
            checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Retrieved neighbours per query.
    pub k: usize,
    /// Patch rows synthesized for seed-based features.
    pub n_patches: usize,
    /// Clamp negative concept scores to zero.
    pub clamp_weights: bool,
    pub paths: Paths,
    pub tokenizer: TokenizerConfig,
    pub knowledge: KnowledgeFlags,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            k: 3,
            n_patches: 8,
            clamp_weights: true,
            paths: Paths::default(),
            tokenizer: TokenizerConfig::default(),
            knowledge: KnowledgeFlags::ALL,
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.n_patches == 0 {
            return Err(Error::Config("n_patches must be at least 1".into()));
        }
        self.knowledge.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Whether concept weights come from the sample's own report or are
/// merged over its retrieved neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

impl Mode {
    pub fn for_split(split: Split) -> Self {
        match split {
            Split::Train => Mode::Train,
            Split::Val | Split::Test => Mode::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Knowledge {
    pub k_c: Tensor,
    pub k_t: Tensor,
    pub retrieved: Vec<Hit>,
    pub weights: WeightVector,
    pub prompts: Vec<Prompt>,
}

/// Everything the per-sample pipeline reads, loaded once.
pub struct Assets {
    pub corpus: Corpus,
    pub concepts: ConceptPackage,
    /// Encoded concept names `F_c`, one row per concept.
    pub concept_features: Tensor,
    pub lexicons: Lexicons,
    pub tfidf: TfIdfTable,
    /// Query embeddings by id; when absent, queries come from image features.
    pub embeddings: Option<EmbeddingStore>,
    pub train_store: EmbeddingStore,
    pub triplets: BTreeMap<String, Vec<Triplet>>,
    pub encoder: SyntheticEncoder,
    pub features_dir: PathBuf,
    pub n_patches: usize,
    pub k: usize,
    pub clamp: bool,
}

impl Assets {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let p = &config.paths;
        let corpus_path = p.corpus.as_ref().ok_or_else(|| Error::Config("paths.corpus is not set".into()))?;
        let corpus = load_corpus(corpus_path, &config.tokenizer)?;
        let concepts = match &p.concepts {
            Some(path) => ConceptPackage::load(path)?,
            None => ConceptPackage::builtin(),
        };
        let lexicons = match &p.lexicons {
            Some(path) => Lexicons::load(path)?,
            None => Lexicons::builtin(),
        };
        let embeddings = p.embeddings.as_deref().map(EmbeddingStore::load).transpose()?;
        let imported = p.triplets.as_deref().map(load_triplets).transpose()?;
        let features_dir = p
            .features
            .clone()
            .or_else(|| corpus_path.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        Self::build(corpus, concepts, lexicons, embeddings, imported, features_dir, config)
    }

    pub fn build(
        corpus: Corpus,
        concepts: ConceptPackage,
        lexicons: Lexicons,
        embeddings: Option<EmbeddingStore>,
        imported_triplets: Option<BTreeMap<String, Vec<Triplet>>>,
        features_dir: PathBuf,
        config: &PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model.d_feature;
        let encoder = SyntheticEncoder { dim: d };
        let rows = concepts.concepts().iter().map(|c| encoder.encode_text(&c.name)).collect::<Result<Vec<_>>>()?;
        let concept_features = Tensor::from_rows(&rows)?;
        let tfidf = compute_tfidf(&corpus)?;
        let train_ids = corpus.split_ids(Split::Train);
        if train_ids.is_empty() {
            return Err(Error::Empty("train split"));
        }
        let train_store = match &embeddings {
            Some(store) => store.subset(&train_ids)?,
            None => {
                let reports: Vec<&Report> = corpus.split(Split::Train).collect();
                let rows = par::try_map(&reports, |r| encoder.encode_text(&r.text))?;
                EmbeddingStore::new(train_ids.clone(), &rows)?
            }
        };
        let triplets = match imported_triplets {
            Some(map) => map,
            None => {
                let reports: Vec<&Report> = corpus.split(Split::Train).collect();
                let extracted = par::map(&reports, |r| (r.id.clone(), extract_triplets(r, &lexicons)));
                extracted.into_iter().collect()
            }
        };
        Ok(Assets {
            corpus,
            concepts,
            concept_features,
            lexicons,
            tfidf,
            embeddings,
            train_store,
            triplets,
            encoder,
            features_dir,
            n_patches: config.n_patches,
            k: config.k,
            clamp: config.clamp_weights,
        })
    }

    /// `base` with vocabulary and concept counts filled from the assets.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.corpus.vocab().len(),
            n_concepts: self.concepts.len(),
            ..base.clone()
        }
    }

    pub fn features(&self, report: &Report) -> Result<Tensor> {
        load_features(report, &self.features_dir, self.n_patches, self.encoder.dim)
    }

    pub fn query(&self, report: &Report, features: &Tensor) -> Result<Vec<f64>> {
        match &self.embeddings {
            Some(store) => store.vector(&report.id).ok_or_else(|| Error::UnknownId(report.id.clone())),
            None => self.encoder.encode_image(features),
        }
    }

    pub fn knowledge(&self, report: &Report, features: &Tensor, flags: KnowledgeFlags, mode: Mode, max_triplets: usize) -> Result<Knowledge> {
        flags.validate()?;
        let d = self.encoder.dim;
        let query = self.query(report, features)?;
        let hits = topk(&self.train_store, &query, self.k, Some(&report.id))?;
        let ids = hits.ids();
        let n_c = self.concepts.len();
        let weights = if !flags.use_concepts {
            WeightVector::zeros(n_c)
        } else if !flags.use_weights {
            WeightVector::ones(n_c)
        } else {
            match mode {
                Mode::Train => concept_weights(&report.id, &self.tfidf, &self.concepts, &self.corpus, self.clamp)?,
                Mode::Test => merge_test_weights(&ids, &self.tfidf, &self.concepts, &self.corpus, self.clamp)?,
            }
        };
        let k_c = if flags.use_concepts {
            weighted_concept_knowledge(&self.concept_features, &weights)?
        } else {
            Tensor::zeros(&[n_c, d])
        };
        let (k_t, prompts) = if flags.use_triplets {
            let groups: Vec<Vec<Triplet>> = ids.iter().map(|id| self.triplets.get(id).cloned().unwrap_or_default()).collect();
            let enc = encode_triplets(&groups, &self.encoder, max_triplets)?;
            (enc.matrix, enc.prompts)
        } else {
            (Tensor::zeros(&[1, d]), Vec::new())
        };
        Ok(Knowledge {
            k_c,
            k_t,
            retrieved: hits.hits,
            weights,
            prompts,
        })
    }

    pub fn model_input(&self, report: &Report, flags: KnowledgeFlags, mode: Mode, max_triplets: usize) -> Result<ModelInput> {
        let features = self.features(report)?;
        let k = self.knowledge(report, &features, flags, mode, max_triplets)?;
        Ok(ModelInput {
            features,
            k_c: k.k_c,
            k_t: k.k_t,
        })
    }

    /// Examples for every report of `split`, in corpus order.
    pub fn examples(&self, split: Split, flags: KnowledgeFlags, max_triplets: usize) -> Result<Vec<Example>> {
        let reports: Vec<&Report> = self.corpus.split(split).collect();
        let vocab = self.corpus.vocab();
        par::try_map(&reports, |r| {
            Ok(Example {
                id: r.id.clone(),
                input: self.model_input(r, flags, Mode::for_split(split), max_triplets)?,
                target: vocab.encode(&r.tokens),
            })
        })
    }
}

/// Generates a report for one corpus sample.
pub fn run_pipeline(assets: &Assets, report: &Report, config: &PipelineConfig, model: &Model) -> Result<GenerationOutput> {
    config.knowledge.validate()?;
    let mode = Mode::for_split(report.split);
    let input = assets.model_input(report, config.knowledge, mode, model.config().max_triplets)?;
    generate(model, &input, model.config().decode, assets.corpus.vocab())
}

/// Generations for a whole split, in corpus order.
pub fn generate_split(assets: &Assets, model: &Model, split: Split, flags: KnowledgeFlags) -> Result<Vec<(String, GenerationOutput)>> {
    let reports: Vec<&Report> = assets.corpus.split(split).collect();
    par::try_map(&reports, |r| {
        let input = assets.model_input(r, flags, Mode::for_split(split), model.config().max_triplets)?;
        Ok((r.id.clone(), generate(model, &input, model.config().decode, assets.corpus.vocab())?))
    })
}

/// Trains a fresh model on the train split, validating on the val split.
pub fn train_pipeline(assets: &Assets, config: &PipelineConfig, out_dir: Option<&Path>) -> Result<(Model, TrainReport)> {
    let model_cfg = assets.model_config(&config.model);
    let mut model = Model::new(model_cfg.clone(), config.seed)?;
    let train_set = assets.examples(Split::Train, config.knowledge, model_cfg.max_triplets)?;
    let val_set = assets.examples(Split::Val, config.knowledge, model_cfg.max_triplets)?;
    let tc = TrainConfig {
        seed: config.seed,
        ..config.train.clone()
    };
    let report = train(&mut model, &train_set, &val_set, &tc, out_dir)?;
    let best = Model::from_params(model_cfg, report.best_params.clone())?;
    Ok((best, report))
}

#[derive(Serialize, Deserialize)]
struct GeneratedLine {
    id: String,
    text: String,
}

pub fn generations_to_jsonl(rows: &[(String, String)]) -> String {
    let mut out = String::new();
    for (id, text) in rows {
        let line = GeneratedLine {
            id: id.clone(),
            text: text.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Reads `{id, text}` JSON-lines.
pub fn read_generations(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: GeneratedLine = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((g.id, g.text));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_dependency() {
        let bad = KnowledgeFlags {
            use_concepts: false,
            use_weights: true,
            use_triplets: false,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(KnowledgeFlags::NONE.validate().is_ok());
    }

    #[test]
    fn toml_roundtrip_and_hash() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.k = 5;
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn toml_rejects_bad_values() {
        assert!(matches!(PipelineConfig::from_toml("k = 0"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        let partial = PipelineConfig::from_toml("seed = 9\n[knowledge]\nuse_triplets = false\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert!(partial.knowledge.use_concepts && !partial.knowledge.use_triplets);
    }

    #[test]
    fn generations_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![("a".to_string(), "no effusion .".to_string()), ("b".into(), "".into())];
        let path = dir.path().join("g.jsonl");
        fs::write(&path, generations_to_jsonl(&rows)).unwrap();
        assert_eq!(read_generations(&path).unwrap(), rows);
    }
}
