//! Corpus NLG metrics over whitespace-tokenized text with one reference per
//! candidate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub const ROUGE_BETA: f64 = 1.2;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_EXPONENT: i32 = 3;
/// Search-state budget for chunk minimization before falling back to a
/// greedy alignment.
const METEOR_STATE_BUDGET: usize = 200_000;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn check(candidates: &[String], references: &[String]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("metric corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
pub fn bleu_counts(candidate: &str, reference: &str, n: usize) -> (usize, usize) {
    let (c, r) = (words(candidate), words(reference));
    let cc = ngram_counts(&c, n);
    let rc = ngram_counts(&r, n);
    let matched = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    (matched, c.len().saturating_sub(n - 1))
}

/// Corpus BLEU-n without smoothing.
pub fn bleu_n(candidates: &[String], references: &[String], n: usize) -> Result<f64> {
    check(candidates, references)?;
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order {n} outside 1..4")));
    }
    let per_sample = par::map_range(candidates.len(), |i| {
        let counts: Vec<(usize, usize)> = (1..=n).map(|k| bleu_counts(&candidates[i], &references[i], k)).collect();
        (counts, words(&candidates[i]).len(), words(&references[i]).len())
    });
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for (counts, cl, rl) in per_sample {
        for (k, (m, t)) in counts.into_iter().enumerate() {
            matched[k] += m;
            total[k] += t;
        }
        c += cl;
        r += rl;
    }
    if c == 0 || matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_mean = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_mean.exp())
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_pair(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean per-sample ROUGE-L F-measure.
pub fn rouge_l(candidates: &[String], references: &[String]) -> Result<f64> {
    check(candidates, references)?;
    let s = par::map_range(candidates.len(), |i| rouge_l_pair(&candidates[i], &references[i]));
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Exact-match unigram alignment: maximal matches, then fewest chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

struct AlignSearch<'a> {
    cand: &'a [&'a str],
    slots: Vec<Vec<usize>>,
    need: Vec<usize>,
    word_of: Vec<Option<usize>>,
    remaining: Vec<Vec<usize>>,
    memo: HashMap<(usize, Vec<u64>, usize), usize>,
    budget_hit: bool,
}

impl AlignSearch<'_> {
    /// Most adjacent matched pairs reachable from position `i`.
    fn best(&mut self, i: usize, used: &mut Vec<u64>, taken: &mut [usize], prev: usize) -> usize {
        if i == self.cand.len() || self.budget_hit {
            return 0;
        }
        let key = (i, used.clone(), prev);
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        if self.memo.len() >= METEOR_STATE_BUDGET {
            self.budget_hit = true;
            return 0;
        }
        let mut best = None;
        match self.word_of[i] {
            None => best = Some(self.best(i + 1, used, taken, usize::MAX)),
            Some(w) => {
                if taken[w] < self.need[w] {
                    for s in 0..self.slots[w].len() {
                        let j = self.slots[w][s];
                        if used[j / 64] >> (j % 64) & 1 == 1 {
                            continue;
                        }
                        used[j / 64] |= 1 << (j % 64);
                        taken[w] += 1;
                        let adj = usize::from(prev != usize::MAX && j == prev + 1);
                        let v = adj + self.best(i + 1, used, taken, j);
                        taken[w] -= 1;
                        used[j / 64] &= !(1 << (j % 64));
                        best = Some(best.map_or(v, |b: usize| b.max(v)));
                    }
                }
                // skipping is allowed only if later occurrences can still fill the quota
                if self.remaining[i][w] >= self.need[w] - taken[w] {
                    let v = self.best(i + 1, used, taken, usize::MAX);
                    best = Some(best.map_or(v, |b: usize| b.max(v)));
                }
            }
        }
        let v = best.unwrap_or(0);
        self.memo.insert(key, v);
        v
    }
}

fn greedy_alignment(cand: &[&str], refr: &[&str]) -> Alignment {
    let mut used = vec![false; refr.len()];
    let mut prev: Option<usize> = None;
    let (mut matches, mut chunks) = (0, 0);
    for w in cand {
        let next = prev.map(|p| p + 1).filter(|&j| j < refr.len() && !used[j] && refr[j] == *w);
        let j = next.or_else(|| (0..refr.len()).find(|&j| !used[j] && refr[j] == *w));
        match j {
            Some(j) => {
                used[j] = true;
                matches += 1;
                if next.is_none() {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    Alignment { matches, chunks }
}

pub fn align(cand: &[&str], refr: &[&str]) -> Alignment {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for w in refr {
        let n = ids.len();
        ids.entry(w).or_insert(n);
    }
    let nw = ids.len();
    let mut slots = vec![Vec::new(); nw];
    for (j, w) in refr.iter().enumerate() {
        slots[ids[w]].push(j);
    }
    let word_of: Vec<Option<usize>> = cand.iter().map(|w| ids.get(w).copied()).collect();
    let mut cand_count = vec![0usize; nw];
    for w in word_of.iter().flatten() {
        cand_count[*w] += 1;
    }
    let need: Vec<usize> = (0..nw).map(|w| cand_count[w].min(slots[w].len())).collect();
    let matches: usize = need.iter().sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    // remaining[i][w]: occurrences of w in cand[i+1..]
    let mut remaining = vec![vec![0usize; nw]; cand.len()];
    let mut acc = vec![0usize; nw];
    for i in (0..cand.len()).rev() {
        remaining[i] = acc.clone();
        if let Some(w) = word_of[i] {
            acc[w] += 1;
        }
    }
    let mut search = AlignSearch {
        cand,
        slots,
        need,
        word_of,
        remaining,
        memo: HashMap::new(),
        budget_hit: false,
    };
    let mut used = vec![0u64; refr.len().div_ceil(64)];
    let mut taken = vec![0usize; nw];
    let adjacent = search.best(0, &mut used, &mut taken, usize::MAX);
    if search.budget_hit {
        return greedy_alignment(cand, refr);
    }
    Alignment {
        matches,
        chunks: matches - adjacent,
    }
}

pub fn meteor_pair(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    let a = align(&c, &r);
    if a.matches == 0 {
        return 0.0;
    }
    let p = a.matches as f64 / c.len() as f64;
    let rec = a.matches as f64 / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = METEOR_GAMMA * (a.chunks as f64 / a.matches as f64).powi(METEOR_EXPONENT);
    fmean * (1.0 - penalty)
}

/// Mean per-sample METEOR, exact-match stage only.
pub fn meteor_exact(candidates: &[String], references: &[String]) -> Result<f64> {
    check(candidates, references)?;
    let s = par::map_range(candidates.len(), |i| meteor_pair(&candidates[i], &references[i]));
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

fn tfidf_vector<'a>(counts: &HashMap<Vec<&'a str>, usize>, idf: &dyn Fn(&[&'a str]) -> f64) -> HashMap<Vec<&'a str>, f64> {
    let total: usize = counts.values().sum();
    counts.iter().map(|(g, &k)| (g.clone(), k as f64 / total as f64 * idf(g))).collect()
}

fn cosine_sparse(a: &HashMap<Vec<&str>, f64>, b: &HashMap<Vec<&str>, f64>) -> f64 {
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// Plain CIDEr (n = 1..4, ×10), document frequencies from the references.
pub fn cider(candidates: &[String], references: &[String]) -> Result<f64> {
    check(candidates, references)?;
    if candidates.len() < 2 {
        return Err(Error::InvalidArgument("CIDEr needs at least two samples".into()));
    }
    let n_docs = references.len() as f64;
    let ref_words: Vec<Vec<&str>> = references.iter().map(|r| words(r)).collect();
    let cand_words: Vec<Vec<&str>> = candidates.iter().map(|c| words(c)).collect();
    let mut per_sample = vec![0.0; candidates.len()];
    for n in 1..=4 {
        let ref_counts: Vec<_> = ref_words.iter().map(|r| ngram_counts(r, n)).collect();
        let mut df: HashMap<Vec<&str>, usize> = HashMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
        let idf = |g: &[&str]| n_docs.ln() - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let sims = par::map_range(candidates.len(), |i| {
            let cv = tfidf_vector(&ngram_counts(&cand_words[i], n), &idf);
            let rv = tfidf_vector(&ref_counts[i], &idf);
            cosine_sparse(&cv, &rv)
        });
        for (acc, s) in per_sample.iter_mut().zip(sims) {
            *acc += s;
        }
    }
    Ok(per_sample.iter().map(|s| s / 4.0 * 10.0).sum::<f64>() / candidates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "bleu1,bleu2,bleu3,bleu4,meteor,rouge_l,cider,n_samples";

    pub fn compute(candidates: &[String], references: &[String]) -> Result<Self> {
        check(candidates, references)?;
        let mut bleu = [0.0; 4];
        for (n, b) in bleu.iter_mut().enumerate() {
            *b = bleu_n(candidates, references, n + 1)?;
        }
        let cider = if candidates.len() >= 2 { cider(candidates, references)? } else { 0.0 };
        Ok(MetricReport {
            bleu,
            rouge_l: rouge_l(candidates, references)?,
            meteor: meteor_exact(candidates, references)?,
            cider,
            n_samples: candidates.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], self.meteor, self.rouge_l, self.cider, self.n_samples
        )
    }

    /// Field-wise mean; `n_samples` is summed.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Empty("MetricReport::mean"));
        }
        let k = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Ok(MetricReport {
            bleu: [0, 1, 2, 3].map(|i| avg(&|r| r.bleu[i])),
            rouge_l: avg(&|r| r.rouge_l),
            meteor: avg(&|r| r.meteor),
            cider: avg(&|r| r.cider),
            n_samples: reports.iter().map(|r| r.n_samples).sum(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bleu_cases() {
        let c = v(&["the cat sat on the mat today"]);
        for n in 1..=4 {
            assert_eq!(bleu_n(&c, &c, n).unwrap(), 1.0);
        }
        assert_eq!(bleu_counts("the the the the", "the cat sat", 1), (1, 4));
        assert!((bleu_n(&v(&["the the the the"]), &v(&["the cat sat"]), 1).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(bleu_n(&v(&[""]), &v(&["a b"]), 1).unwrap(), 0.0);
        assert!(bleu_n(&[], &[], 1).is_err());
        assert!(bleu_n(&c, &c, 5).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        // c = 2, r = 4, unigram precision 1
        let b = bleu_n(&v(&["a b"]), &v(&["a b c d"]), 1).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l_pair("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l_pair("a b", "c d"), 0.0);
        assert!((rouge_l_pair("a b c d", "a c d e") - 0.75).abs() < 1e-15);
    }

    #[test]
    fn meteor_cases() {
        assert!((meteor_pair("b a", "a b") - 0.5).abs() < 1e-15);
        assert_eq!(meteor_pair("x y", "a b"), 0.0);
        let m = 5.0f64;
        assert!((meteor_pair("a b c d e", "a b c d e") - (1.0 - 0.5 / (m * m * m))).abs() < 1e-12);
    }

    #[test]
    fn alignment_prefers_fewer_chunks() {
        // greedy left-to-right would take the first "a" and split the run
        let c = words("a b c");
        let r = words("a x a b c");
        assert_eq!(align(&c, &r), Alignment { matches: 3, chunks: 1 });
    }

    #[test]
    fn cider_cases() {
        let c = v(&["a b c d", "e f g h"]);
        assert!((cider(&c, &c).unwrap() - 10.0).abs() < 1e-12);
        let far = v(&["x y z w", "p q r s"]);
        assert_eq!(cider(&far, &c).unwrap(), 0.0);
        assert!(cider(&v(&["a"]), &v(&["a"])).is_err());
    }

    #[test]
    fn report_identity() {
        let refs = v(&["the heart is normal in size and the lungs are clear", "no pleural effusion or pneumothorax is seen today"]);
        let r = MetricReport::compute(&refs, &refs).unwrap();
        assert_eq!(r.bleu, [1.0; 4]);
        assert_eq!(r.rouge_l, 1.0);
        assert!(r.meteor > 0.99);
        assert_eq!(r.n_samples, 2);
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..9).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((sentence(), sentence()), 2..6), rot in 0usize..5) {
            let (c, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
            let k = rot % c.len();
            let mut c2 = c.clone();
            let mut r2 = r.clone();
            c2.rotate_left(k);
            r2.rotate_left(k);
            let a = MetricReport::compute(&c, &r).unwrap();
            let b = MetricReport::compute(&c2, &r2).unwrap();
            for n in 0..4 {
                prop_assert!((a.bleu[n] - b.bleu[n]).abs() < 1e-12);
            }
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
            prop_assert!((a.meteor - b.meteor).abs() < 1e-12);
            prop_assert!((a.cider - b.cider).abs() < 1e-12);
        }

        #[test]
        fn appending_reference_ngram_keeps_counts(c in sentence(), r in sentence(), n in 1usize..4, pick in 0usize..8) {
            let rw = words(&r);
            prop_assume!(rw.len() >= n);
            let start = pick % (rw.len() - n + 1);
            let gram = rw[start..start + n].join(" ");
            let extended = if c.is_empty() { gram } else { format!("{c} {gram}") };
            let before = bleu_counts(&c, &r, n).0;
            let after = bleu_counts(&extended, &r, n).0;
            prop_assert!(after >= before);
        }

        #[test]
        fn scores_in_range(pairs in prop::collection::vec((sentence(), sentence()), 2..6)) {
            let (c, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
            let m = MetricReport::compute(&c, &r).unwrap();
            for b in m.bleu {
                prop_assert!((0.0..=1.0).contains(&b));
            }
            prop_assert!((0.0..=1.0).contains(&m.rouge_l));
            prop_assert!((0.0..=1.0).contains(&m.meteor));
            prop_assert!((0.0..=10.0 + 1e-9).contains(&m.cider));
        }
    }
}
