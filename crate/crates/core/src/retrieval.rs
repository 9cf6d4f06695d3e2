//! Embedding store, exact cosine top-k, and the deterministic synthetic
//! encoder used when no external embeddings are supplied.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{tokenize, TokenizerConfig, PERIOD};
use crate::error::{Error, Result};
use crate::kift::KiftMatrix;
use crate::par;
use crate::tensor::Tensor;

const NORM_TOLERANCE: f64 = 1e-6;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0) + 0.0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize vector with norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Image and text entry points of an embedding model.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<Vec<f64>>;
    fn encode_image(&self, features: &Tensor) -> Result<Vec<f64>>;
}

/// Hash-seeded bag-of-tokens text vectors and mean-pooled image vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticEncoder {
    pub dim: usize,
}

impl Encoder for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        synth_text_encode(text, self.dim)
    }

    fn encode_image(&self, features: &Tensor) -> Result<Vec<f64>> {
        if features.cols() != self.dim || features.rows() == 0 {
            return Err(Error::shape("encode_image", features.shape(), &[self.dim]));
        }
        let mut mean = vec![0.0; self.dim];
        for r in 0..features.rows() {
            mean.iter_mut().zip(features.row(r)).for_each(|(m, x)| *m += x);
        }
        normalized(&mean)
    }
}

/// Unit vector for a single token, seeded from SHA-256 of the token.
pub fn token_vector(token: &str, d: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    normalized(&raw).unwrap_or_else(|_| {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    })
}

/// Normalized mean of the token vectors of `text`.
pub fn synth_text_encode(text: &str, d: usize) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::InvalidArgument("encoder dimension must be >= 1".into()));
    }
    let tokens: Vec<String> = tokenize(text, &TokenizerConfig::default())
        .into_iter()
        .filter(|t| t != PERIOD)
        .collect();
    if tokens.is_empty() {
        return Err(Error::Empty("synth_text_encode: text has no tokens"));
    }
    let mut acc = vec![0.0; d];
    for t in &tokens {
        acc.iter_mut().zip(token_vector(t, d)).for_each(|(a, x)| *a += x);
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    normalized(&acc)
}

/// Unit-normalized rows keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::shape("embedding store", &[ids.len()], &[rows.len()]));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape("embedding store", &[dim], &[r.len()]));
            }
            data.extend(normalized(r)?.into_iter().map(|x| x as f32));
        }
        Self::from_parts(ids, dim, data)
    }

    fn from_parts(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(EmbeddingStore { ids, dim, data })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn vector(&self, id: &str) -> Option<Vec<f64>> {
        self.position(id).map(|i| self.row(i).iter().map(|&x| x as f64).collect())
    }

    /// Rows for `keep`, in the order given.
    pub fn subset(&self, keep: &[String]) -> Result<Self> {
        let mut data = Vec::with_capacity(keep.len() * self.dim);
        for id in keep {
            let i = self.position(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            data.extend_from_slice(self.row(i));
        }
        Self::from_parts(keep.to_vec(), self.dim, data)
    }

    /// Sidecar id list next to a KIFT embedding file.
    pub fn ids_path(path: &Path) -> PathBuf {
        path.with_extension("ids.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        KiftMatrix::f32(self.len(), self.dim, self.data.clone())?.write(path)?;
        let ids = Self::ids_path(path);
        fs::write(&ids, serde_json::to_string(&self.ids)?).map_err(|e| Error::io(&ids, e))
    }

    /// Reads a KIFT matrix and its sidecar ids; rows whose norm drifts from 1
    /// by more than 1e-6 are renormalized.
    pub fn load(path: &Path) -> Result<Self> {
        let m = KiftMatrix::read(path)?;
        let ids_path = Self::ids_path(path);
        let text = fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids: Vec<String> = serde_json::from_str(&text)?;
        if ids.len() != m.rows {
            return Err(Error::Format(format!("{} ids for {} rows", ids.len(), m.rows)));
        }
        let raw = m.to_f64();
        let mut data = Vec::with_capacity(raw.len());
        for row in raw.chunks(m.cols.max(1)).take(m.rows) {
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Format("embedding row with zero or non-finite norm".into()));
            }
            if (n - 1.0).abs() > NORM_TOLERANCE {
                data.extend(row.iter().map(|x| (x / n) as f32));
            } else {
                data.extend(row.iter().map(|&x| x as f32));
            }
        }
        Self::from_parts(ids, m.cols, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Ranked hits: scores non-increasing, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.id.clone()).collect()
    }
}

fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-`k` by cosine similarity, never returning `exclude`.
pub fn topk(store: &EmbeddingStore, query: &[f64], k: usize, exclude: Option<&str>) -> Result<RetrievalResult> {
    if query.len() != store.dim {
        return Err(Error::shape("topk", &[store.dim], &[query.len()]));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::InvalidArgument("zero query vector".into()));
    }
    let available = store.len() - usize::from(exclude.is_some_and(|x| store.position(x).is_some()));
    if k == 0 || k > available {
        return Err(Error::InvalidArgument(format!("k = {k} but {available} entries are available")));
    }
    let mut scored: Vec<(f64, &str)> = store
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| Some(id.as_str()) != exclude)
        .map(|(i, id)| {
            let row = store.row(i);
            let dot: f64 = row.iter().zip(query).map(|(&r, q)| r as f64 * q).sum();
            let rn = row.iter().map(|&r| (r as f64) * (r as f64)).sum::<f64>().sqrt();
            // + 0.0 folds -0.0 into 0.0 so zero scores tie by id
            ((dot / (qn * rn)).clamp(-1.0, 1.0) + 0.0, id.as_str())
        })
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(RetrievalResult {
        hits: scored
            .into_iter()
            .map(|(score, id)| Hit {
                id: id.to_string(),
                score,
            })
            .collect(),
    })
}

/// [`topk`] for many queries; each query may carry its own exclusion.
pub fn topk_batch(store: &EmbeddingStore, queries: &[(Vec<f64>, Option<String>)], k: usize) -> Result<Vec<RetrievalResult>> {
    par::try_map(queries, |(q, ex)| topk(store, q, k, ex.as_deref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn singleton_and_self_match() {
        let s = EmbeddingStore::new(vec!["a".into()], &[vec![1.0, 2.0]]).unwrap();
        let r = topk(&s, &[0.3, -1.0], 1, None).unwrap();
        assert_eq!(r.ids(), vec!["a"]);
        let s = EmbeddingStore::new(
            vec!["a".into(), "b".into(), "c".into()],
            &[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.5, 0.5, 0.5]],
        )
        .unwrap();
        let r = topk(&s, &[0.0, 2.0, 0.0], 2, None).unwrap();
        assert_eq!(r.hits[0].id, "b");
        assert!((r.hits[0].score - 1.0).abs() < 1e-7);
        assert!(topk(&s, &[0.0, 2.0, 0.0], 3, Some("b")).is_err());
        assert_eq!(topk(&s, &[0.0, 2.0, 0.0], 2, Some("b")).unwrap().ids().len(), 2);
        assert!(topk(&s, &[0.0, 2.0, 0.0], 0, None).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let rows = vec![vec![1.0, 0.0]; 4];
        let s = EmbeddingStore::new(vec!["d".into(), "b".into(), "c".into(), "a".into()], &rows).unwrap();
        let r = topk(&s, &[1.0, 0.0], 3, Some("b")).unwrap();
        assert_eq!(r.ids(), vec!["a", "c", "d"]);
    }

    #[test]
    fn text_encoder_properties() {
        let a = synth_text_encode("pleural effusion", 16).unwrap();
        let b = synth_text_encode("pleural effusion", 16).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let e = synth_text_encode("effusion", 16).unwrap();
        let p = synth_text_encode("pneumothorax", 16).unwrap();
        assert!(cosine(&e, &p).unwrap() < 1.0);
        let t = token_vector("effusion", 16);
        assert!(e.iter().zip(&t).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert!(synth_text_encode("  . ", 16).is_err());
    }

    #[test]
    fn image_entry_point_mean_pools() {
        let enc = SyntheticEncoder { dim: 2 };
        let f = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 2.0]).unwrap();
        let v = enc.encode_image(&f).unwrap();
        let expected = normalized(&[1.0, 1.0]).unwrap();
        assert!((v[0] - expected[0]).abs() < 1e-15 && (v[1] - expected[1]).abs() < 1e-15);
        assert!(enc.encode_image(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn save_load_roundtrip_and_external_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = EmbeddingStore::new(vec!["x".into(), "y".into()], &[vec![1.0, 2.0, 2.0], vec![0.0, -1.0, 0.5]]).unwrap();
        let p = dir.path().join("emb.kift");
        s.save(&p).unwrap();
        assert_eq!(EmbeddingStore::load(&p).unwrap(), s);

        // externally produced, not normalized
        let q = dir.path().join("ext.kift");
        KiftMatrix::f32(2, 2, vec![3.0, 4.0, 0.0, 0.5]).unwrap().write(&q).unwrap();
        fs::write(EmbeddingStore::ids_path(&q), r#"["u","v"]"#).unwrap();
        let ext = EmbeddingStore::load(&q).unwrap();
        for i in 0..2 {
            let n: f64 = ext.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
        assert_eq!(ext.row(0), &[0.6, 0.8]);

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(EmbeddingStore::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(EmbeddingStore::new(vec!["a".into(), "a".into()], &[vec![1.0], vec![2.0]]).is_err());
    }

    fn brute(store: &EmbeddingStore, q: &[f64], k: usize, ex: Option<&str>) -> Vec<String> {
        let mut all: Vec<(f64, String)> = (0..store.len())
            .filter(|&i| Some(store.ids()[i].as_str()) != ex)
            .map(|i| {
                let row: Vec<f64> = store.row(i).iter().map(|&x| x as f64).collect();
                (cosine(&row, q).unwrap(), store.ids()[i].clone())
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    proptest! {
        #[test]
        fn topk_matches_full_sort(rows in prop::collection::vec(prop::collection::vec(-3i32..4, 4), 3..30),
                                  q in prop::collection::vec(-3i32..4, 4), ex in 0usize..3) {
            prop_assume!(q.iter().any(|&x| x != 0));
            let rows: Vec<Vec<f64>> = rows.into_iter().filter(|r| r.iter().any(|&x| x != 0)).map(|r| r.into_iter().map(f64::from).collect()).collect();
            prop_assume!(rows.len() >= 2);
            let ids: Vec<String> = (0..rows.len()).map(|i| format!("id{i:03}")).collect();
            let s = EmbeddingStore::new(ids.clone(), &rows).unwrap();
            let q: Vec<f64> = q.into_iter().map(f64::from).collect();
            let exclude = ids[ex % ids.len()].clone();
            let n = s.len() - 1;
            let got = topk(&s, &q, n, Some(&exclude)).unwrap();
            prop_assert_eq!(got.ids(), brute(&s, &q, n, Some(&exclude)));
            prop_assert!(!got.ids().contains(&exclude));
            prop_assert!(got.hits.windows(2).all(|w| w[0].score >= w[1].score));
        }

        #[test]
        fn cosine_symmetry_and_scale(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((ab - cosine(&b, &a).unwrap()).abs() <= 1e-12);
            let a2: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
            prop_assert!((ab - cosine(&a2, &b).unwrap()).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
