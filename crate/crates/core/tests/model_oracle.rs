//! The tape-based model against a straight-line scalar re-implementation.

use kinject::model::{DecodeStrategy, Model, ModelConfig, ModelInput};
use kinject::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

struct Oracle<'a> {
    model: &'a Model,
}

impl Oracle<'_> {
    fn mat(&self, name: &str) -> M {
        let t = &self.model.params().by_name(name).unwrap_or_else(|| panic!("{name}")).value;
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.model.params().by_name(name).unwrap().value.data().to_vec()
    }

    fn linear(&self, x: &M, name: &str) -> M {
        let (w, b) = (self.mat(&format!("{name}.w")), self.vec(&format!("{name}.b")));
        x.iter()
            .map(|row| (0..b.len()).map(|j| b[j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>()).collect())
            .collect()
    }

    fn norm(&self, x: &M, name: &str) -> M {
        let (g, b) = (self.vec(&format!("{name}.g")), self.vec(&format!("{name}.b")));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
            })
            .collect()
    }

    fn mha(&self, xq: &M, xkv: &M, name: &str, causal: bool) -> M {
        let q = self.linear(xq, &format!("{name}.q"));
        let k = self.linear(xkv, &format!("{name}.k"));
        let v = self.linear(xkv, &format!("{name}.v"));
        let cfg = self.model.config();
        let dh = cfg.d_model / cfg.n_heads;
        let mut joined = vec![vec![0.0; cfg.d_model]; q.len()];
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let pick = |m: &M| -> M { m.iter().map(|r| r[cols.clone()].to_vec()).collect() };
            let mask = |i: usize, j: usize| causal && j > i;
            let out = attend(&pick(&q), &pick(&k), &pick(&v), &mask);
            for (i, row) in out.iter().enumerate() {
                joined[i][cols.clone()].copy_from_slice(row);
            }
        }
        self.linear(&joined, &format!("{name}.o"))
    }

    fn ffn(&self, x: &M, name: &str) -> M {
        let up = self.linear(x, &format!("{name}.up"));
        let gelu: M = up
            .iter()
            .map(|r| r.iter().map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())).collect())
            .collect();
        self.linear(&gelu, &format!("{name}.down"))
    }

    fn logits(&self, input: &ModelInput, prefix: &[usize]) -> M {
        let rows = |t: &Tensor| -> M { (0..t.rows()).map(|r| t.row(r).to_vec()).collect() };
        let (f, kc, kt) = (rows(&input.features), rows(&input.k_c), rows(&input.k_t));
        let none = |_: usize, _: usize| false;
        let branch = |k: &M, name: &str| -> M {
            if self.model.config().mok_projections {
                let wq = self.mat(&format!("{name}.q"));
                let wk = self.mat(&format!("{name}.k"));
                let wv = self.mat(&format!("{name}.v"));
                attend(&matmul(&f, &wq), &matmul(k, &wk), &matmul(k, &wv), &none)
            } else {
                attend(&f, k, k, &none)
            }
        };
        let a = branch(&kc, "mok.concepts");
        let b = branch(&kt, "mok.triplets");
        let fused: M = (0..f.len()).map(|i| (0..f[i].len()).map(|j| f[i][j] + a[i][j] + b[i][j]).collect()).collect();

        let mut x = self.linear(&fused, "input");
        x = self.norm(&add(&x, &self.mha(&x, &x, "enc.0.attn", false)), "enc.0.norm1");
        let memory = self.norm(&add(&x, &self.ffn(&x, "enc.0.ffn")), "enc.0.norm2");

        let embed = self.mat("embed");
        let d = self.model.config().d_model;
        let mut y: M = prefix
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                (0..d)
                    .map(|i| {
                        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                        embed[t][i] + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect();
        y = self.norm(&add(&y, &self.mha(&y, &y, "dec.0.self", true)), "dec.0.norm1");
        y = self.norm(&add(&y, &self.mha(&y, &memory, "dec.0.cross", false)), "dec.0.norm2");
        y = self.norm(&add(&y, &self.ffn(&y, "dec.0.ffn")), "dec.0.norm3");
        self.linear(&y, "output")
    }
}

fn matmul(a: &M, b: &M) -> M {
    a.iter().map(|r| (0..b[0].len()).map(|j| (0..r.len()).map(|i| r[i] * b[i][j]).sum()).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn attend(q: &M, k: &M, v: &M, masked: &dyn Fn(usize, usize) -> bool) -> M {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let s: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| if masked(i, j) { -1e9 } else { qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| (0..v.len()).map(|j| e[j] / z * v[j][c]).sum()).collect()
        })
        .collect()
}

fn config(projections: bool) -> ModelConfig {
    ModelConfig {
        d_feature: 4,
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 8,
        vocab_size: 7,
        max_len: 6,
        n_concepts: 3,
        max_triplets: 4,
        decode: DecodeStrategy::Greedy,
        mok_projections: projections,
    }
}

fn random_input(seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r: usize| Tensor::matrix(r, 4, (0..r * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    ModelInput {
        features: m(3),
        k_c: m(3),
        k_t: m(2),
    }
}

#[test]
fn forward_matches_scalar_oracle() {
    for projections in [false, true] {
        for seed in 0..5 {
            let model = Model::new(config(projections), seed).unwrap();
            let input = random_input(100 + seed);
            let prefix = [1, 4, 6, 3, 5];
            let tape = Tape::new();
            let p = model.params().bind_frozen(&tape);
            let memory = model.memory(&tape, &p, &input).unwrap();
            let got = model.decode(&tape, &p, &memory, &prefix).unwrap().value();
            let want = Oracle { model: &model }.logits(&input, &prefix);
            for (r, row) in want.iter().enumerate() {
                for (c, w) in row.iter().enumerate() {
                    let g = got.get(r, c);
                    assert!((g - w).abs() <= 1e-9, "projections {projections} seed {seed} [{r},{c}]: {g} vs {w}");
                }
            }
            let last = model.decode_step(&model.encode_input(&input).unwrap(), &prefix).unwrap();
            for (c, w) in want[prefix.len() - 1].iter().enumerate() {
                assert!((last[c] - w).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn loss_matches_scalar_cross_entropy() {
    let model = Model::new(config(false), 9).unwrap();
    let input = random_input(9);
    let target = [4, 5, 6];
    let (dec_in, dec_out) = model.teacher_forcing(&target);
    let logits = Oracle { model: &model }.logits(&input, &dec_in);
    let mut want = 0.0;
    for (row, &t) in logits.iter().zip(&dec_out) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        want += lse - row[t];
    }
    want /= dec_out.len() as f64;
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape);
    let got = model.loss(&tape, &p, &input, &target).unwrap().value().item();
    assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
}
