//! Knowledge fusion plus a post-norm transformer encoder-decoder.

pub mod attention;
pub mod generate;
pub mod train;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::kift::Dtype;
use crate::tensor::{load_params, save_params, ParamStore, Tape, Tensor, Var};

pub use attention::{attention, attention_masked, attention_values, concat_views, mok_fuse, mok_fuse_projected, mok_fuse_values, BranchProjections};
pub use generate::{generate, generate_batch, DecodeStrategy, GenerationOutput};
pub use train::{train, EpochLog, TrainConfig, TrainReport};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of image features and knowledge rows.
    pub d_feature: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest generated sequence, end token included.
    pub max_len: usize,
    pub n_concepts: usize,
    pub max_triplets: usize,
    pub decode: DecodeStrategy,
    pub mok_projections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_feature: 512,
            d_model: 512,
            n_heads: 8,
            n_layers: 3,
            ffn_dim: 2048,
            vocab_size: 0,
            max_len: 60,
            n_concepts: 76,
            max_triplets: 32,
            decode: DecodeStrategy::Greedy,
            mok_projections: false,
        }
    }
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_feature: 32,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            vocab_size,
            max_len: 40,
            ..Default::default()
        }
    }

    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            d_feature: 8,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: 32,
            vocab_size,
            max_len: 24,
            max_triplets: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_feature", self.d_feature),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("n_concepts", self.n_concepts),
            ("max_triplets", self.max_triplets),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab_size must cover the reserved tokens".into()));
        }
        if let DecodeStrategy::Beam { width: 0 } = self.decode {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mha {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Mha,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Mha,
    norm1: Norm,
    cross_attn: Mha,
    norm2: Norm,
    ffn: Ffn,
    norm3: Norm,
}

#[derive(Debug, Clone, Copy)]
struct MokProj {
    q: usize,
    k: usize,
    v: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    mok: Option<[MokProj; 2]>,
    input: Linear,
    encoder: Vec<EncoderLayer>,
    embed: usize,
    decoder: Vec<DecoderLayer>,
    output: Linear,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> usize {
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.store.add(name, Tensor::matrix(rows, cols, data).expect("sized"))
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, fan_in, fan_out, bound)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.weight(format!("{name}.w"), fan_in, fan_out);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.store.add(format!("{name}.g"), Tensor::full(&[d], 1.0));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[d]));
        Norm { g, b }
    }

    fn mha(&mut self, name: &str, d: usize) -> Mha {
        Mha {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

fn build_layout(config: &ModelConfig, seed: u64) -> (Layout, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let (df, d) = (config.d_feature, config.d_model);
    let mok = config.mok_projections.then(|| {
        ["mok.concepts", "mok.triplets"].map(|n| MokProj {
            q: b.weight(format!("{n}.q"), df, df),
            k: b.weight(format!("{n}.k"), df, df),
            v: b.weight(format!("{n}.v"), df, df),
        })
    });
    let input = b.linear("input", df, d);
    let encoder = (0..config.n_layers)
        .map(|i| EncoderLayer {
            attn: b.mha(&format!("enc.{i}.attn"), d),
            norm1: b.norm(&format!("enc.{i}.norm1"), d),
            ffn: b.ffn(&format!("enc.{i}.ffn"), d, config.ffn_dim),
            norm2: b.norm(&format!("enc.{i}.norm2"), d),
        })
        .collect();
    let embed = b.uniform("embed".into(), config.vocab_size, d, (1.0 / d as f64).sqrt());
    let decoder = (0..config.n_layers)
        .map(|i| DecoderLayer {
            self_attn: b.mha(&format!("dec.{i}.self"), d),
            norm1: b.norm(&format!("dec.{i}.norm1"), d),
            cross_attn: b.mha(&format!("dec.{i}.cross"), d),
            norm2: b.norm(&format!("dec.{i}.norm2"), d),
            ffn: b.ffn(&format!("dec.{i}.ffn"), d, config.ffn_dim),
            norm3: b.norm(&format!("dec.{i}.norm3"), d),
        })
        .collect();
    let output = b.linear("output", d, config.vocab_size);
    let layout = Layout {
        mok,
        input,
        encoder,
        embed,
        decoder,
        output,
    };
    (layout, b.store)
}

/// Sinusoidal position table `[n × d]`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(n, d, data).expect("sized")
}

/// Per-sample model inputs: image features and the two knowledge matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub features: Tensor,
    pub k_c: Tensor,
    pub k_t: Tensor,
}

/// A training pair: inputs and target token ids (no reserved tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: ModelInput,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build_layout(&config, seed);
        let positions = positional_encoding(config.max_len, config.d_model);
        Ok(Model {
            config,
            layout,
            params,
            positions,
        })
    }

    /// Wraps stored parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, config expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_input(&self, input: &ModelInput) -> Result<()> {
        let df = self.config.d_feature;
        for (name, t) in [("features", &input.features), ("K_c", &input.k_c), ("K_t", &input.k_t)] {
            if t.shape().len() != 2 || t.cols() != df || t.rows() == 0 {
                return Err(Error::shape(name, t.shape(), &[0, df]));
            }
        }
        if input.k_t.rows() > self.config.max_triplets.max(1) {
            return Err(Error::InvalidArgument(format!(
                "{} triplet rows exceed max_triplets {}",
                input.k_t.rows(),
                self.config.max_triplets
            )));
        }
        Ok(())
    }

    fn linear<'t>(&self, p: &[Var<'t>], x: &Var<'t>, l: Linear) -> Result<Var<'t>> {
        x.matmul(&p[l.w])?.add_row(&p[l.b])
    }

    fn norm<'t>(&self, p: &[Var<'t>], x: &Var<'t>, n: Norm) -> Result<Var<'t>> {
        x.layer_norm(LN_EPS).mul_row(&p[n.g])?.add_row(&p[n.b])
    }

    fn mha<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xq: &Var<'t>, xkv: &Var<'t>, m: Mha, causal: bool) -> Result<Var<'t>> {
        let q = self.linear(p, xq, m.q)?;
        let k = self.linear(p, xkv, m.k)?;
        let v = self.linear(p, xkv, m.v)?;
        let (nq, nk) = (q.shape()[0], k.shape()[0]);
        let mask: Option<Vec<bool>> = causal.then(|| (0..nq * nk).map(|i| i % nk > i / nk).collect());
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let heads = (0..h)
            .map(|i| {
                let (a, b) = (i * dh, (i + 1) * dh);
                attention_masked(&q.slice_cols(a, b)?, &k.slice_cols(a, b)?, &v.slice_cols(a, b)?, mask.as_deref())
            })
            .collect::<Result<Vec<_>>>()?;
        let joined = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.linear(p, &joined, m.o)
    }

    fn ffn<'t>(&self, p: &[Var<'t>], x: &Var<'t>, f: Ffn) -> Result<Var<'t>> {
        self.linear(p, &self.linear(p, x, f.up)?.gelu(), f.down)
    }

    /// Knowledge fusion `F_I′`.
    pub fn fuse<'t>(&self, p: &[Var<'t>], f_i: &Var<'t>, k_c: &Var<'t>, k_t: &Var<'t>) -> Result<Var<'t>> {
        match &self.layout.mok {
            None => mok_fuse(f_i, k_c, k_t),
            Some([c, t]) => {
                let pc = BranchProjections {
                    q: &p[c.q],
                    k: &p[c.k],
                    v: &p[c.v],
                };
                let pt = BranchProjections {
                    q: &p[t.q],
                    k: &p[t.k],
                    v: &p[t.v],
                };
                mok_fuse_projected(f_i, k_c, k_t, Some(pc), Some(pt))
            }
        }
    }

    /// Encoder memory from fused features.
    pub fn encode<'t>(&self, tape: &'t Tape, p: &[Var<'t>], fused: &Var<'t>) -> Result<Var<'t>> {
        let mut x = self.linear(p, fused, self.layout.input)?;
        for l in &self.layout.encoder {
            let a = self.mha(tape, p, &x, &x, l.attn, false)?;
            x = self.norm(p, &x.add(&a)?, l.norm1)?;
            let f = self.ffn(p, &x, l.ffn)?;
            x = self.norm(p, &x.add(&f)?, l.norm2)?;
        }
        Ok(x)
    }

    /// Logits `[len(prefix) × vocab]`; row `t` depends on `prefix[..=t]` only.
    pub fn decode<'t>(&self, tape: &'t Tape, p: &[Var<'t>], memory: &Var<'t>, prefix: &[usize]) -> Result<Var<'t>> {
        let n = prefix.len();
        if n == 0 {
            return Err(Error::Empty("decoder prefix"));
        }
        if n > self.config.max_len {
            return Err(Error::InvalidArgument(format!("prefix length {n} exceeds max_len {}", self.config.max_len)));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token {bad} out of vocab range {}", self.config.vocab_size)));
        }
        let d = self.config.d_model;
        let pos = tape.constant(Tensor::matrix(n, d, self.positions.data()[..n * d].to_vec())?);
        let mut x = tape.embedding(p[self.layout.embed], prefix)?.add(&pos)?;
        for l in &self.layout.decoder {
            let a = self.mha(tape, p, &x, &x, l.self_attn, true)?;
            x = self.norm(p, &x.add(&a)?, l.norm1)?;
            let c = self.mha(tape, p, &x, memory, l.cross_attn, false)?;
            x = self.norm(p, &x.add(&c)?, l.norm2)?;
            let f = self.ffn(p, &x, l.ffn)?;
            x = self.norm(p, &x.add(&f)?, l.norm3)?;
        }
        self.linear(p, &x, self.layout.output)
    }

    /// Memory for `input`, built on `tape` from the bound parameters.
    pub fn memory<'t>(&self, tape: &'t Tape, p: &[Var<'t>], input: &ModelInput) -> Result<Var<'t>> {
        self.check_input(input)?;
        let f = tape.constant(input.features.clone());
        let kc = tape.constant(input.k_c.clone());
        let kt = tape.constant(input.k_t.clone());
        let fused = self.fuse(p, &f, &kc, &kt)?;
        self.encode(tape, p, &fused)
    }

    /// Teacher-forced token cross-entropy for one example.
    pub fn loss<'t>(&self, tape: &'t Tape, p: &[Var<'t>], input: &ModelInput, target: &[usize]) -> Result<Var<'t>> {
        let memory = self.memory(tape, p, input)?;
        let (dec_in, dec_out) = self.teacher_forcing(target);
        self.decode(tape, p, &memory, &dec_in)?.cross_entropy(&dec_out, Some(PAD))
    }

    /// Decoder input `[BOS, y..]` and shifted targets `[y.., EOS]`, with the
    /// report clipped so the pair fits `max_len`.
    pub fn teacher_forcing(&self, target: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let body = &target[..target.len().min(self.config.max_len - 1)];
        let mut dec_in = Vec::with_capacity(body.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(body);
        let mut dec_out = body.to_vec();
        dec_out.push(EOS);
        (dec_in, dec_out)
    }

    /// Encoder memory as a plain tensor (inference).
    pub fn encode_input(&self, input: &ModelInput) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.memory(&tape, &p, input)?.value())
    }

    /// Next-token logits after `prefix`.
    pub fn decode_step(&self, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let m = tape.constant(memory.clone());
        let logits = self.decode(&tape, &p, &m, prefix)?.value();
        Ok(logits.row(prefix.len() - 1).to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_params(dir, &self.params, Dtype::F64)?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.config)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        Model::from_params(config, load_params(dir)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_image_features;

    fn input(cfg: &ModelConfig, seed: u64) -> ModelInput {
        ModelInput {
            features: synth_image_features(seed, 5, cfg.d_feature),
            k_c: synth_image_features(seed + 1, 7, cfg.d_feature),
            k_t: synth_image_features(seed + 2, 3, cfg.d_feature),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::micro(10);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::micro(10);
        c.ffn_dim = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk(50).validate().is_ok());
        assert_eq!(ModelConfig::default().n_layers, 3);
    }

    #[test]
    fn causal_mask_contract() {
        let cfg = ModelConfig::micro(12);
        let m = Model::new(cfg.clone(), 3).unwrap();
        let mem = m.encode_input(&input(&cfg, 1)).unwrap();
        let tape = Tape::new();
        let p = m.params().bind_frozen(&tape);
        let mv = tape.constant(mem.clone());
        let a = m.decode(&tape, &p, &mv, &[BOS, 5, 6, 7]).unwrap().value();
        let b = m.decode(&tape, &p, &mv, &[BOS, 5, 9, 11]).unwrap().value();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn decode_is_pure_and_bounded() {
        let cfg = ModelConfig::micro(12);
        let m = Model::new(cfg.clone(), 3).unwrap();
        let mem = m.encode_input(&input(&cfg, 1)).unwrap();
        let x = m.decode_step(&mem, &[BOS, 4]).unwrap();
        let y = m.decode_step(&mem, &[BOS, 4]).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.len(), 12);
        let long = vec![BOS; cfg.max_len + 1];
        assert!(m.decode_step(&mem, &long).is_err());
    }

    #[test]
    fn projections_change_parameter_set() {
        let mut cfg = ModelConfig::micro(12);
        let plain = Model::new(cfg.clone(), 0).unwrap().params().len();
        cfg.mok_projections = true;
        let m = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.params().len(), plain + 6);
        m.encode_input(&input(&cfg, 2)).unwrap();
    }

    #[test]
    fn knowledge_gradients_nonzero() {
        let cfg = ModelConfig::micro(12);
        let m = Model::new(cfg.clone(), 5).unwrap();
        let inp = input(&cfg, 4);
        let tape = Tape::new();
        let p = m.params().bind(&tape);
        let f = tape.constant(inp.features.clone());
        let kc = tape.leaf(inp.k_c.clone());
        let kt = tape.leaf(inp.k_t.clone());
        let fused = m.fuse(&p, &f, &kc, &kt).unwrap();
        let mem = m.encode(&tape, &p, &fused).unwrap();
        let loss = m.decode(&tape, &p, &mem, &[BOS, 4, 5]).unwrap().cross_entropy(&[4, 5, EOS], Some(PAD)).unwrap();
        let g = loss.backward().unwrap();
        assert!(g.wrt(&kc).unwrap().data().iter().any(|&x| x != 0.0));
        assert!(g.wrt(&kt).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::micro(12);
        let m = Model::new(cfg.clone(), 9).unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        let inp = input(&cfg, 3);
        assert_eq!(m.encode_input(&inp).unwrap(), back.encode_input(&inp).unwrap());

        let mut other = cfg.clone();
        other.ffn_dim = 16;
        assert!(matches!(Model::from_params(other, back.params().clone()), Err(Error::Format(_))));
    }

    #[test]
    fn teacher_forcing_clips() {
        let mut cfg = ModelConfig::micro(12);
        cfg.max_len = 4;
        let m = Model::new(cfg, 0).unwrap();
        let (i, o) = m.teacher_forcing(&[5, 6, 7, 8, 9]);
        assert_eq!(i, vec![BOS, 5, 6, 7]);
        assert_eq!(o, vec![5, 6, 7, EOS]);
    }
}
