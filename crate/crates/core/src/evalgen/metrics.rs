//! Corpus-level BLEU, ROUGE-L and CIDEr / CIDEr-D over token sequences.
//!
//! All maps are ordered so that floating-point sums run in a fixed order and
//! scores are bit-reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type NgramCounts<'a, T> = BTreeMap<&'a [T], usize>;

fn ngrams<T: Ord>(tokens: &[T], n: usize) -> NgramCounts<'_, T> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

fn check_corpus<T>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates but {} reference groups",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("candidate {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU@1..=`max_n` with clipped n-gram precision and the brevity
/// penalty against the closest reference length (shorter wins ties).
pub fn bleu<T: Ord>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .unwrap_or(0);
        for n in 1..=max_n {
            let mut max_ref: NgramCounts<T> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngrams(cand, n) {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
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

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure of one candidate against one reference.
pub fn rouge_l_pair<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over the corpus of the best per-reference ROUGE-L F.
pub fn rouge_l<T: Eq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| rouge_l_pair(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / candidates.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiderVariant {
    #[default]
    CiderD,
    Cider,
}

pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_MAX_N: usize = 4;

/// TF-IDF n-gram vector with its norm and the sequence length.
struct Doc<'a, T> {
    vecs: Vec<BTreeMap<&'a [T], f64>>,
    norms: Vec<f64>,
    len: usize,
}

/// CIDEr scorer with document frequencies frozen from a reference corpus;
/// one reference group is one document.
pub struct CiderScorer<'a, T> {
    df: [BTreeMap<&'a [T], f64>; CIDER_MAX_N],
    log_n: f64,
    pub variant: CiderVariant,
    pub sigma: f64,
}

impl<'a, T: Ord> CiderScorer<'a, T> {
    pub fn new<I>(references: I, variant: CiderVariant) -> Self
    where
        I: IntoIterator<Item = &'a [Vec<T>]>,
    {
        let mut df: [BTreeMap<&'a [T], f64>; CIDER_MAX_N] = Default::default();
        let mut groups = 0usize;
        for group in references {
            groups += 1;
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: BTreeMap<&'a [T], ()> = BTreeMap::new();
                for r in group {
                    for g in ngrams(r, n + 1).into_keys() {
                        seen.insert(g, ());
                    }
                }
                for g in seen.into_keys() {
                    *table.entry(g).or_insert(0.0) += 1.0;
                }
            }
        }
        if groups < 2 {
            log::warn!(
                "CIDEr over {groups} reference group(s): every idf is zero and all scores are 0; use a larger corpus"
            );
        }
        Self {
            df,
            log_n: (groups.max(1) as f64).ln(),
            variant,
            sigma: CIDER_SIGMA,
        }
    }

    /// True when idf vanishes everywhere (fewer than two documents).
    pub fn is_degenerate(&self) -> bool {
        self.log_n == 0.0
    }

    fn doc<'b>(&self, tokens: &'b [T]) -> Doc<'b, T> {
        let mut vecs = Vec::with_capacity(CIDER_MAX_N);
        let mut norms = Vec::with_capacity(CIDER_MAX_N);
        for n in 0..CIDER_MAX_N {
            let mut v = BTreeMap::new();
            let mut norm = 0.0;
            for (g, tf) in ngrams(tokens, n + 1) {
                let df = self.df[n].get(g).copied().unwrap_or(0.0).max(1.0);
                let w = tf as f64 * (self.log_n - df.ln());
                norm += w * w;
                v.insert(g, w);
            }
            vecs.push(v);
            norms.push(norm.sqrt());
        }
        Doc {
            vecs,
            norms,
            len: tokens.len(),
        }
    }

    fn sim(&self, c: &Doc<T>, r: &Doc<T>) -> f64 {
        let delta = c.len as f64 - r.len as f64;
        let penalty = match self.variant {
            CiderVariant::CiderD => (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp(),
            CiderVariant::Cider => 1.0,
        };
        let mut total = 0.0;
        for n in 0..CIDER_MAX_N {
            if c.norms[n] == 0.0 || r.norms[n] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (g, &wc) in &c.vecs[n] {
                if let Some(&wr) = r.vecs[n].get(g) {
                    dot += match self.variant {
                        CiderVariant::CiderD => wc.min(wr) * wr,
                        CiderVariant::Cider => wc * wr,
                    };
                }
            }
            total += dot / (c.norms[n] * r.norms[n]) * penalty;
        }
        total / CIDER_MAX_N as f64
    }

    /// Score of one candidate against its reference group, ×10.
    pub fn score(&self, candidate: &[T], refs: &[Vec<T>]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let c = self.doc(candidate);
        let total: f64 = refs.iter().map(|r| self.sim(&c, &self.doc(r))).sum();
        10.0 * total / refs.len() as f64
    }

    /// Per-candidate scores.
    pub fn scores(&self, candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<Vec<f64>> {
        check_corpus(candidates, references)?;
        Ok(candidates
            .iter()
            .zip(references)
            .map(|(c, r)| self.score(c, r))
            .collect())
    }
}

/// Corpus CIDEr with idf taken from `references` themselves.
pub fn cider<T: Ord>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], variant: CiderVariant) -> Result<f64> {
    let scorer = CiderScorer::new(references.iter().map(Vec::as_slice), variant);
    let s = scorer.scores(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Raw metric values (fractions; CIDEr on its ×10 scale).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricReport {
    pub fn compute<T: Ord>(
        candidates: &[Vec<T>],
        references: &[Vec<Vec<T>>],
        variant: CiderVariant,
    ) -> Result<Self> {
        let b = bleu(candidates, references, 4)?;
        Ok(Self {
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            rouge_l: rouge_l(candidates, references)?,
            cider: cider(candidates, references, variant)?,
        })
    }

    pub const NAMES: [&'static str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"];

    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider]
    }

    /// Values ×100 rounded to one decimal.
    pub fn percent(&self) -> [f64; 6] {
        self.values().map(|v| (v * 1000.0).round() / 10.0)
    }

    pub fn to_percent_json(&self) -> Result<String> {
        let map: BTreeMap<&str, f64> = Self::NAMES.iter().copied().zip(self.percent()).collect();
        Ok(serde_json::to_string_pretty(&map)? + "\n")
    }

    pub fn csv_header() -> String {
        Self::NAMES.join(",")
    }

    pub fn to_percent_csv_row(&self) -> String {
        self.percent().iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join(",")
    }
}
