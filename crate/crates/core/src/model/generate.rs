//! Greedy and beam decoding.

use serde::{Deserialize, Serialize};

use super::{Model, ModelInput};
use crate::corpus::{Vocab, BOS, EOS};
use crate::error::Result;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    #[default]
    Greedy,
    Beam {
        width: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    /// Emitted ids, end token included when reached.
    pub ids: Vec<usize>,
    pub text: String,
    pub log_probs: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lz).collect()
}

/// Highest log-prob first; lower id wins ties.
fn ranked(lp: &[f64], n: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<(usize, f64)> = lp.iter().copied().enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(n);
    idx
}

#[derive(Debug, Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    log_probs: Vec<f64>,
    total: f64,
    done: bool,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        if self.ids.is_empty() {
            0.0
        } else {
            self.total / self.ids.len() as f64
        }
    }
}

pub fn generate(model: &Model, input: &ModelInput, strategy: DecodeStrategy, vocab: &Vocab) -> Result<GenerationOutput> {
    let memory = model.encode_input(input)?;
    let max_len = model.config().max_len;
    let width = match strategy {
        DecodeStrategy::Greedy => 1,
        DecodeStrategy::Beam { width } => width.max(1),
    };
    let mut beams = vec![Hypothesis {
        ids: Vec::new(),
        log_probs: Vec::new(),
        total: 0.0,
        done: false,
    }];
    while beams.iter().any(|h| !h.done) {
        let mut next: Vec<Hypothesis> = Vec::new();
        for h in &beams {
            if h.done {
                next.push(h.clone());
                continue;
            }
            let mut prefix = Vec::with_capacity(h.ids.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&h.ids);
            let lp = log_softmax(&model.decode_step(&memory, &prefix)?);
            for (tok, l) in ranked(&lp, width) {
                let mut c = h.clone();
                c.ids.push(tok);
                c.log_probs.push(l);
                c.total += l;
                c.done = tok == EOS || c.ids.len() >= max_len;
                next.push(c);
            }
        }
        // stable: earlier candidates win equal scores
        next.sort_by(|a, b| b.score().total_cmp(&a.score()));
        next.truncate(width);
        beams = next;
    }
    let best = beams.into_iter().next().expect("at least one hypothesis");
    Ok(GenerationOutput {
        text: vocab.decode(&best.ids),
        ids: best.ids,
        log_probs: best.log_probs,
    })
}

/// Decodes each input independently; order of results follows `inputs`.
pub fn generate_batch(model: &Model, inputs: &[ModelInput], strategy: DecodeStrategy, vocab: &Vocab) -> Result<Vec<GenerationOutput>> {
    par::try_map(inputs, |inp| generate(model, inp, strategy, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_image_features;
    use crate::model::ModelConfig;

    fn setup() -> (Model, ModelInput, Vocab) {
        let vocab = Vocab::from_tokens(["a", "b", "c", "d", "e", "f"].map(String::from));
        let cfg = ModelConfig::micro(vocab.len());
        let m = Model::new(cfg.clone(), 11).unwrap();
        let inp = ModelInput {
            features: synth_image_features(1, 4, cfg.d_feature),
            k_c: synth_image_features(2, 3, cfg.d_feature),
            k_t: synth_image_features(3, 2, cfg.d_feature),
        };
        (m, inp, vocab)
    }

    #[test]
    fn beam_one_is_greedy() {
        let (m, inp, vocab) = setup();
        let g = generate(&m, &inp, DecodeStrategy::Greedy, &vocab).unwrap();
        let b = generate(&m, &inp, DecodeStrategy::Beam { width: 1 }, &vocab).unwrap();
        assert_eq!(g, b);
    }

    #[test]
    fn output_contract() {
        let (m, inp, vocab) = setup();
        for s in [DecodeStrategy::Greedy, DecodeStrategy::Beam { width: 3 }] {
            let out = generate(&m, &inp, s, &vocab).unwrap();
            assert_eq!(out.ids.len(), out.log_probs.len());
            assert!(out.ids.len() <= m.config().max_len);
            assert!(out.ids.iter().all(|&i| i < vocab.len()));
            assert!(out.log_probs.iter().all(|&l| l <= 0.0));
            let eos_at = out.ids.iter().position(|&i| i == EOS);
            assert!(eos_at.is_none_or(|p| p == out.ids.len() - 1));
        }
    }

    #[test]
    fn greedy_is_argmax_chain() {
        let (m, inp, vocab) = setup();
        let out = generate(&m, &inp, DecodeStrategy::Greedy, &vocab).unwrap();
        let mem = m.encode_input(&inp).unwrap();
        let mut prefix = vec![BOS];
        for &tok in &out.ids {
            let lp = log_softmax(&m.decode_step(&mem, &prefix).unwrap());
            assert_eq!(ranked(&lp, 1)[0].0, tok);
            prefix.push(tok);
        }
    }

    #[test]
    fn strategy_serde() {
        let s: DecodeStrategy = serde_json::from_str(r#"{"beam":{"width":3}}"#).unwrap();
        assert_eq!(s, DecodeStrategy::Beam { width: 3 });
        let g: DecodeStrategy = serde_json::from_str(r#""greedy""#).unwrap();
        assert_eq!(g, DecodeStrategy::Greedy);
    }
}
