//! String similarity and caption metrics.
//!
//! * Levenshtein ratio `1 - d(a, b) / max(|a|, |b|)` over Unicode scalar values.
//! * METEOR-exact: exact unigram alignment only (no stemming, no synonyms).
//! * CIDEr without the length penalty of CIDEr-D; document frequencies come
//!   from an explicit reference corpus.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-cost edit distance in characters.
pub fn levenshtein_distance(a: &str, b: &str) -> usize {
    strsim::levenshtein(a, b)
}

/// `1 - d(a, b) / max(|a|, |b|)`; two empty strings score 1.
pub fn levenshtein_ratio(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let longest = la.max(lb);
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein_distance(a, b) as f64 / longest as f64
}

/// Lowercase, trim, and collapse runs of internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1.0 when the normalized strings agree, else 0.0.
pub fn exact_match(a: &str, b: &str) -> f64 {
    if normalize_answer(a) == normalize_answer(b) {
        1.0
    } else {
        0.0
    }
}

/// Lowercased tokens with punctuation stripped; underscores are kept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    tokens: Vec<String>,
}

impl Caption {
    pub fn from_text(text: &str) -> Self {
        let cleaned: String = text
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c == '_' {
                    c.to_ascii_lowercase()
                } else {
                    ' '
                }
            })
            .collect();
        Self {
            tokens: cleaned.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn ngrams(&self, n: usize) -> HashMap<&[String], usize> {
        let mut counts = HashMap::new();
        if self.tokens.len() >= n {
            for w in self.tokens.windows(n) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// METEOR with exact matching only.
///
/// Each candidate token, left to right, is aligned to the first unused
/// reference token with the same text. Chunks are maximal runs of matches
/// that are adjacent in both strings.
pub fn meteor_exact(cand: &Caption, reference: &Caption) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Validation("METEOR reference is empty".into()));
    }
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<usize> = Vec::new();
    for tok in &cand.tokens {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference.tokens[j] == *tok) {
            used[j] = true;
            alignment.push(j);
        } else {
            alignment.push(usize::MAX);
        }
    }
    let m = alignment.iter().filter(|&&j| j != usize::MAX).count();
    if m == 0 {
        return Ok(0.0);
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for &j in &alignment {
        if j == usize::MAX {
            prev = None;
            continue;
        }
        match prev {
            Some(p) if j == p + 1 => {}
            _ => chunks += 1,
        }
        prev = Some(j);
    }
    let m = m as f64;
    let precision = m / cand.len() as f64;
    let recall = m / reference.len() as f64;
    let fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    Ok(fmean * (1.0 - penalty))
}

const CIDER_MAX_N: usize = 4;

/// Document frequencies for CIDEr, frozen at construction.
#[derive(Debug, Clone)]
pub struct CiderScorer {
    log_docs: f64,
    df: [HashMap<Vec<String>, usize>; CIDER_MAX_N],
}

impl CiderScorer {
    pub fn new(corpus: &[Caption]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Validation("CIDEr corpus is empty".into()));
        }
        let mut df: [HashMap<Vec<String>, usize>; CIDER_MAX_N] = Default::default();
        for cap in corpus {
            for (n, table) in df.iter_mut().enumerate() {
                for gram in cap.ngrams(n + 1).into_keys() {
                    *table.entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            log_docs: (corpus.len() as f64).ln(),
            df,
        })
    }

    /// TF-IDF vector of one caption at order `n` (1-based).
    fn vector<'a>(&self, cap: &'a Caption, n: usize) -> HashMap<&'a [String], f64> {
        cap.ngrams(n)
            .into_iter()
            .map(|(gram, tf)| {
                let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1) as f64;
                (gram, tf as f64 * (self.log_docs - df.ln()))
            })
            .collect()
    }

    /// `(10 / 4) · Σ_n cos(g_n(cand), g_n(ref))`
    pub fn score_pair(&self, cand: &Caption, reference: &Caption) -> f64 {
        let mut total = 0.0;
        for n in 1..=CIDER_MAX_N {
            let vc = self.vector(cand, n);
            let vr = self.vector(reference, n);
            let norm_c = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let norm_r = vr.values().map(|v| v * v).sum::<f64>().sqrt();
            if norm_c == 0.0 || norm_r == 0.0 {
                continue;
            }
            let dot: f64 = vc
                .iter()
                .filter_map(|(g, a)| vr.get(g).map(|b| a * b))
                .sum();
            total += dot / (norm_c * norm_r);
        }
        total * 10.0 / CIDER_MAX_N as f64
    }
}

/// Mean CIDEr over aligned `(cand, ref)` items.
pub fn cider(cands: &[Caption], refs: &[Caption], corpus: &[Caption]) -> Result<f64> {
    if cands.len() != refs.len() {
        return Err(Error::Dimension(format!(
            "{} candidates vs {} references",
            cands.len(),
            refs.len()
        )));
    }
    if cands.is_empty() {
        return Err(Error::Validation("CIDEr over zero items".into()));
    }
    let scorer = CiderScorer::new(corpus)?;
    let sum: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| scorer.score_pair(c, r))
        .sum();
    Ok(sum / cands.len() as f64)
}
