//! The five-variant knowledge ablation ladder.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::par;
use crate::pipeline::{generate_split, generations_to_jsonl, train_pipeline, Assets, KnowledgeFlags, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    Base,
    Concepts,
    WeightedConcepts,
    Triplet,
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Base, Variant::Concepts, Variant::WeightedConcepts, Variant::Triplet, Variant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::Concepts => "+Concepts",
            Variant::WeightedConcepts => "+We_Conp",
            Variant::Triplet => "+Triplet",
            Variant::Ours => "Ours",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Concepts => "concepts",
            Variant::WeightedConcepts => "weighted_concepts",
            Variant::Triplet => "triplet",
            Variant::Ours => "ours",
        }
    }

    /// `+Triplet` enables the retrieval branch alone.
    pub fn flags(self) -> KnowledgeFlags {
        let (c, w, t) = match self {
            Variant::Base => (false, false, false),
            Variant::Concepts => (true, false, false),
            Variant::WeightedConcepts => (true, true, false),
            Variant::Triplet => (false, false, true),
            Variant::Ours => (true, true, true),
        };
        KnowledgeFlags {
            use_concepts: c,
            use_weights: w,
            use_triplets: t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: std::result::Result<MetricReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub config_hash: String,
}

impl AblationTable {
    /// Mean metrics per variant over the seeds that succeeded.
    pub fn means(&self) -> Vec<(Variant, Option<MetricReport>)> {
        Variant::ALL
            .iter()
            .map(|&v| {
                let ok: Vec<MetricReport> = self.rows.iter().filter(|r| r.variant == v).filter_map(|r| r.outcome.clone().ok()).collect();
                (v, MetricReport::mean(&ok).ok())
            })
            .collect()
    }

    pub fn mean_bleu4(&self, v: Variant) -> Option<f64> {
        self.means().into_iter().find(|(x, _)| *x == v).and_then(|(_, m)| m.map(|m| m.bleu[3]))
    }

    pub fn errors(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| format!("{} seed {}: {e}", r.variant.name(), r.seed)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("variant,seed,{},config_hash\n", MetricReport::CSV_HEADER);
        let empty = ",".repeat(7);
        for r in &self.rows {
            let body = r.outcome.as_ref().map(|m| m.csv_row()).unwrap_or_else(|_| empty.clone());
            let _ = writeln!(s, "{},{},{},{}", r.variant.name(), r.seed, body, self.config_hash);
        }
        for (v, m) in self.means() {
            let body = m.map(|m| m.csv_row()).unwrap_or_else(|| empty.clone());
            let _ = writeln!(s, "{},mean,{},{}", v.name(), body, self.config_hash);
        }
        s
    }
}

fn run_leg(assets: &Assets, config: &PipelineConfig, variant: Variant, seed: u64, out_dir: Option<&Path>) -> Result<MetricReport> {
    let cfg = PipelineConfig {
        seed,
        knowledge: variant.flags(),
        ..config.clone()
    };
    let leg_dir = out_dir.map(|d| d.join(format!("seed{seed}")).join(variant.slug()));
    let (model, _) = train_pipeline(assets, &cfg, leg_dir.as_deref())?;
    let generated = generate_split(assets, &model, Split::Test, cfg.knowledge)?;
    let refs: Vec<String> = assets.corpus.split(Split::Test).map(|r| r.normalized()).collect();
    let cands: Vec<String> = generated.iter().map(|(_, g)| g.text.clone()).collect();
    if let Some(dir) = &leg_dir {
        let rows: Vec<(String, String)> = generated.into_iter().map(|(id, g)| (id, g.text)).collect();
        let path = dir.join("generated.jsonl");
        fs::write(&path, generations_to_jsonl(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    MetricReport::compute(&cands, &refs)
}

/// Trains and evaluates every variant for every seed in
/// `config.ablation.seeds`. Failed legs appear as error rows.
pub fn ablate(assets: &Assets, config: &PipelineConfig, out_dir: Option<&Path>) -> Result<AblationTable> {
    config.validate()?;
    if config.ablation.seeds.is_empty() {
        return Err(Error::Config("ablation.seeds is empty".into()));
    }
    if assets.corpus.split(Split::Test).next().is_none() {
        return Err(Error::Empty("test split"));
    }
    let legs: Vec<(u64, Variant)> = config.ablation.seeds.iter().flat_map(|&s| Variant::ALL.map(|v| (s, v))).collect();
    let outcomes = par::map(&legs, |&(seed, variant)| {
        log::info!("ablation leg {} seed {seed}", variant.name());
        run_leg(assets, config, variant, seed, out_dir).map_err(|e| e.to_string())
    });
    let table = AblationTable {
        rows: legs
            .into_iter()
            .zip(outcomes)
            .map(|((seed, variant), outcome)| AblationRow { variant, seed, outcome })
            .collect(),
        config_hash: config.hash(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ablation.csv");
        fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}
