//! Scaled dot-product attention and the mixture-of-knowledge fusion.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Additive mask value for disallowed attention scores.
pub const MASKED: f64 = -1e9;

/// `softmax(Q Kᵀ / √d) V`, with `d` the width of `Q`.
pub fn attention<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>) -> Result<Var<'t>> {
    attention_masked(q, k, v, None)
}

/// As [`attention`]; entries where `mask` is true (row-major over
/// `[n_q × n_k]`) are excluded.
pub fn attention_masked<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, mask: Option<&[bool]>) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("attention q/k", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("attention k/v", &ks, &vs));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let mut scores = q.matmul(&k.t()?)?.scale(scale);
    if let Some(m) = mask {
        scores = scores.mask_fill(m, MASKED)?;
    }
    scores.softmax().matmul(v)
}

/// Optional learned projections for one knowledge branch.
#[derive(Clone, Copy)]
pub struct BranchProjections<'a, 't> {
    pub q: &'a Var<'t>,
    pub k: &'a Var<'t>,
    pub v: &'a Var<'t>,
}

/// `F_I + Att(F_I, K_c, K_c) + Att(F_I, K_t, K_t)`.
pub fn mok_fuse<'t>(f_i: &Var<'t>, k_c: &Var<'t>, k_t: &Var<'t>) -> Result<Var<'t>> {
    mok_fuse_projected(f_i, k_c, k_t, None, None)
}

pub fn mok_fuse_projected<'t>(
    f_i: &Var<'t>,
    k_c: &Var<'t>,
    k_t: &Var<'t>,
    proj_c: Option<BranchProjections<'_, 't>>,
    proj_t: Option<BranchProjections<'_, 't>>,
) -> Result<Var<'t>> {
    let d = f_i.shape()[1..].to_vec();
    for (name, kn) in [("mok K_c", k_c), ("mok K_t", k_t)] {
        if kn.shape().len() != 2 || kn.shape()[1..] != d[..] {
            return Err(Error::shape(name, &f_i.shape(), &kn.shape()));
        }
    }
    let branch = |kn: &Var<'t>, p: Option<BranchProjections<'_, 't>>| -> Result<Var<'t>> {
        match p {
            None => attention(f_i, kn, kn),
            Some(p) => attention(&f_i.matmul(p.q)?, &kn.matmul(p.k)?, &kn.matmul(p.v)?),
        }
    };
    f_i.add(&branch(k_c, proj_c)?)?.add(&branch(k_t, proj_t)?)
}

/// Value-level attention for callers outside a training graph.
pub fn attention_values(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = attention(&tape.constant(q.clone()), &tape.constant(k.clone()), &tape.constant(v.clone()))?;
    Ok(out.value())
}

pub fn mok_fuse_values(f_i: &Tensor, k_c: &Tensor, k_t: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = mok_fuse(&tape.constant(f_i.clone()), &tape.constant(k_c.clone()), &tape.constant(k_t.clone()))?;
    Ok(out.value())
}

/// Row-concatenates several views of one study (e.g. frontal and lateral).
pub fn concat_views(views: &[Tensor]) -> Result<Tensor> {
    let first = views.first().ok_or(Error::Empty("concat_views"))?;
    let d = first.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for v in views {
        if v.shape().len() != 2 || v.cols() != d {
            return Err(Error::shape("concat_views", first.shape(), v.shape()));
        }
        rows += v.rows();
        data.extend_from_slice(v.data());
    }
    Tensor::matrix(rows, d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_key_copies_value() {
        let q = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.0, 9.0, 3.0]).unwrap();
        let k = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
        let v = Tensor::matrix(1, 2, vec![4.0, -1.0]).unwrap();
        let out = attention_values(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        let i2 = Tensor::identity(2);
        let out = attention_values(&i2, &i2, &i2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let a = s.exp() / (s.exp() + 1.0);
        assert!((out.get(0, 0) - a).abs() < 1e-15);
        assert!((out.get(0, 1) - (1.0 - a)).abs() < 1e-15);
        assert!((out.get(1, 1) - a).abs() < 1e-15);
    }

    #[test]
    fn zero_knowledge_is_identity() {
        let f = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.5, 2.5, -3.5]).unwrap();
        let out = mok_fuse_values(&f, &Tensor::zeros(&[5, 3]), &Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn constant_knowledge_adds_row() {
        let f = Tensor::matrix(2, 2, vec![0.1, -0.2, 1.5, 2.5]).unwrap();
        let kc = Tensor::matrix(3, 2, vec![0.5, 0.25, 0.5, 0.25, 0.5, 0.25]).unwrap();
        let out = mok_fuse_values(&f, &kc, &Tensor::zeros(&[1, 2])).unwrap();
        for r in 0..2 {
            assert!((out.get(r, 0) - (f.get(r, 0) + 0.5)).abs() < 1e-15);
            assert!((out.get(r, 1) - (f.get(r, 1) + 0.25)).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let f = Tensor::zeros(&[2, 3]);
        assert!(mok_fuse_values(&f, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[1, 3])).is_err());
        assert!(attention_values(&f, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn views_concatenate() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_views(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
