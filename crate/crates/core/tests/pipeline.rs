use std::path::PathBuf;

use kinject::corpus::Split;
use kinject::model::{generate, train, DecodeStrategy, Model, ModelConfig, ModelInput, TrainConfig};
use kinject::pipeline::{run_pipeline, Assets, KnowledgeFlags, Mode, PipelineConfig};
use kinject::synth::{knowledge_corpus, toy_corpus, KnowledgeCorpusConfig};
use kinject::tensor::{AdamConfig, Tensor};
use kinject::triplet::Lexicons;
use kinject::wck::{concept_weights, ConceptPackage};

fn knowledge_assets(cfg: &PipelineConfig) -> Assets {
    let kc = knowledge_corpus(&KnowledgeCorpusConfig {
        n_reports: 50,
        ..Default::default()
    })
    .unwrap();
    Assets::build(kc.corpus, ConceptPackage::builtin(), Lexicons::builtin(), Some(kc.embeddings), None, PathBuf::new(), cfg).unwrap()
}

fn flags(c: bool, w: bool, t: bool) -> KnowledgeFlags {
    KnowledgeFlags {
        use_concepts: c,
        use_weights: w,
        use_triplets: t,
    }
}

#[test]
fn disabling_a_branch_equals_zeroing_its_matrix() {
    let cfg = PipelineConfig {
        model: ModelConfig::micro(0),
        ..Default::default()
    };
    let assets = knowledge_assets(&cfg);
    let mc = assets.model_config(&cfg.model);
    let model = Model::new(mc.clone(), 4).unwrap();
    let vocab = assets.corpus.vocab();
    for r in assets.corpus.split(Split::Test).take(4) {
        let full = assets.model_input(r, KnowledgeFlags::ALL, Mode::Test, mc.max_triplets).unwrap();
        let no_concepts = assets.model_input(r, flags(false, false, true), Mode::Test, mc.max_triplets).unwrap();
        let no_triplets = assets.model_input(r, flags(true, true, false), Mode::Test, mc.max_triplets).unwrap();
        assert_eq!(no_concepts.k_c, Tensor::zeros(full.k_c.shape()));
        assert_eq!(no_concepts.k_t, full.k_t);
        assert_eq!(no_triplets.k_c, full.k_c);

        let zeroed_c = ModelInput {
            k_c: Tensor::zeros(full.k_c.shape()),
            ..full.clone()
        };
        let zeroed_t = ModelInput {
            k_t: Tensor::zeros(full.k_t.shape()),
            ..full.clone()
        };
        let run = |i: &ModelInput| generate(&model, i, DecodeStrategy::Greedy, vocab).unwrap();
        assert_eq!(run(&no_concepts), run(&zeroed_c));
        assert_eq!(run(&no_triplets), run(&zeroed_t));

        let base = assets.model_input(r, KnowledgeFlags::NONE, Mode::Test, mc.max_triplets).unwrap();
        let fused = kinject::model::mok_fuse_values(&base.features, &base.k_c, &base.k_t).unwrap();
        assert_eq!(fused, base.features);
    }
}

#[test]
fn unweighted_concepts_use_all_ones() {
    let cfg = PipelineConfig::default();
    let assets = knowledge_assets(&cfg);
    let r = assets.corpus.split(Split::Train).next().unwrap();
    let features = assets.features(r).unwrap();
    let k = assets.knowledge(r, &features, flags(true, false, false), Mode::Train, 8).unwrap();
    assert!(k.weights.as_slice().iter().all(|&w| w == 1.0));
    assert_eq!(k.k_c, assets.concept_features);
    assert!(assets.knowledge(r, &features, flags(false, true, false), Mode::Train, 8).is_err());
}

#[test]
fn test_mode_weights_are_the_mean_over_neighbours() {
    let cfg = PipelineConfig::default();
    let assets = knowledge_assets(&cfg);
    let r = assets.corpus.split(Split::Test).next().unwrap();
    let features = assets.features(r).unwrap();
    let k = assets.knowledge(r, &features, KnowledgeFlags::ALL, Mode::Test, 8).unwrap();
    assert_eq!(k.retrieved.len(), cfg.k);
    assert!(k.retrieved.iter().all(|h| h.id != r.id));
    let per: Vec<Vec<f64>> = k
        .retrieved
        .iter()
        .map(|h| concept_weights(&h.id, &assets.tfidf, &assets.concepts, &assets.corpus, true).unwrap().0)
        .collect();
    for (j, w) in k.weights.as_slice().iter().enumerate() {
        let mean = per.iter().map(|p| p[j]).sum::<f64>() / per.len() as f64;
        assert!((w - mean).abs() < 1e-12);
    }
    assert!(!k.prompts.is_empty());
    // one encoded row per prompt
    assert_eq!(k.k_t.rows(), k.prompts.len());
}

#[test]
fn missing_asset_names_the_path() {
    let mut cfg = PipelineConfig::default();
    cfg.paths.corpus = Some(PathBuf::from("/nonexistent/reports.jsonl"));
    let err = Assets::load(&cfg).err().expect("missing corpus");
    assert!(err.to_string().contains("/nonexistent/reports.jsonl"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    toy_corpus().save(&corpus).unwrap();
    cfg.paths.corpus = Some(corpus);
    cfg.paths.embeddings = Some(dir.path().join("missing.kift"));
    let err = Assets::load(&cfg).err().expect("missing embeddings");
    assert!(err.to_string().contains("missing.kift"), "{err}");

    cfg.paths.embeddings = None;
    cfg.knowledge = flags(false, true, true);
    assert!(Assets::load(&cfg).is_err());
}

#[test]
fn full_pipeline_reproduces_memorized_report() {
    let cfg = PipelineConfig {
        n_patches: 4,
        model: ModelConfig::micro(0),
        ..Default::default()
    };
    let assets = Assets::build(toy_corpus(), ConceptPackage::builtin(), Lexicons::builtin(), None, None, PathBuf::new(), &cfg).unwrap();
    let mc = assets.model_config(&cfg.model);
    let mut model = Model::new(mc.clone(), 1).unwrap();
    let examples = assets.examples(Split::Train, KnowledgeFlags::ALL, mc.max_triplets).unwrap();
    let tc = TrainConfig {
        epochs: 300,
        batch_size: 1,
        adam: AdamConfig {
            lr: 3e-3,
            weight_decay: 0.0,
            ..Default::default()
        },
        seed: 1,
        shuffle: true,
    };
    train(&mut model, &examples, &[], &tc, None).unwrap();
    let r = assets.corpus.get("toy2").unwrap();
    let out = run_pipeline(&assets, r, &cfg, &model).unwrap();
    assert_eq!(out.text, r.normalized());
}
