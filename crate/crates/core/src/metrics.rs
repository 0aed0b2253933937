//! Evaluation metrics: classification accuracy and the consensus n-gram
//! score used for free-form answers.
//!
//! The consensus score averages, over samples and n-gram orders 1..=4, the
//! cosine-style ratio `g_n(c, r) / sqrt(g_n(c, c) * g_n(r, r))` where `g_n`
//! is the inner product of the two n-gram weight vectors. A term whose
//! candidate or reference self-product is zero contributes 0, so scores of
//! candidates shorter than 4 tokens top out below 1 even against themselves.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction/label lengths differ: {predictions} vs {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("metric input must be nonempty")]
    Empty,
    #[error("sample {index} has an empty reference set")]
    EmptyReferences { index: usize },
    #[error("n-gram weights must be nonnegative and sum to 1, got {sum}")]
    BadWeights { sum: f64 },
}

/// Fraction of positions where prediction equals label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

pub const MAX_NGRAM: usize = 4;

/// How n-gram counts are weighted when building profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Raw multiset counts. Deterministic and corpus-free; the default.
    RawCount,
    /// Counts scaled by `ln(|corpus| / max(1, df))`, document frequencies
    /// taken over the reference side of the scoring call.
    TfIdf,
}

#[derive(Debug, Clone)]
pub struct CiderConfig {
    pub weights: [f64; MAX_NGRAM],
    pub weighting: Weighting,
}

impl Default for CiderConfig {
    fn default() -> Self {
        CiderConfig {
            weights: [0.25; MAX_NGRAM],
            weighting: Weighting::RawCount,
        }
    }
}

impl CiderConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(MetricsError::BadWeights { sum });
        }
        Ok(())
    }
}

/// Lowercased whitespace tokenization; no stemming or segmentation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

type Ngram = Vec<String>;

/// Weighted n-gram multisets for n = 1..=4. Empty text yields empty maps.
#[derive(Debug, Clone, Default)]
pub struct NgramProfile {
    orders: [HashMap<Ngram, f64>; MAX_NGRAM],
}

impl NgramProfile {
    pub fn order(&self, n: usize) -> &HashMap<Ngram, f64> {
        &self.orders[n - 1]
    }

    /// Inner product of the order-`n` weight vectors.
    pub fn inner(&self, other: &NgramProfile, n: usize) -> f64 {
        let (small, large) = if self.order(n).len() <= other.order(n).len() {
            (self.order(n), other.order(n))
        } else {
            (other.order(n), self.order(n))
        };
        let mut entries: Vec<(&Ngram, f64)> = small
            .iter()
            .filter_map(|(k, &v)| large.get(k).map(|&w| (k, v * w)))
            .collect();
        // Fixed order keeps the sum reproducible across HashMap layouts.
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries.iter().map(|(_, p)| p).sum()
    }
}

/// Document frequencies over reference answers: `df` counts, per n-gram, the
/// number of samples whose reference set contains it; `num_docs` is the
/// number of samples.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    num_docs: usize,
    df: [HashMap<Ngram, usize>; MAX_NGRAM],
}

impl CorpusStats {
    pub fn from_references(references: &[Vec<String>]) -> Self {
        let mut stats = CorpusStats {
            num_docs: references.len(),
            ..Default::default()
        };
        for refs in references {
            let mut seen: [HashMap<Ngram, ()>; MAX_NGRAM] = Default::default();
            for r in refs {
                let tokens = tokenize(r);
                for n in 1..=MAX_NGRAM {
                    for gram in ngrams(&tokens, n) {
                        seen[n - 1].insert(gram, ());
                    }
                }
            }
            for n in 0..MAX_NGRAM {
                for gram in seen[n].keys() {
                    *stats.df[n].entry(gram.clone()).or_insert(0) += 1;
                }
            }
        }
        stats
    }

    fn idf(&self, n: usize, gram: &Ngram) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        (self.num_docs as f64 / df as f64).ln()
    }
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Ngram> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

/// Build the weighted n-gram profile of `text`. `corpus` is required for
/// (and only used by) TF-IDF weighting.
pub fn ngram_profile(
    text: &str,
    weighting: Weighting,
    corpus: Option<&CorpusStats>,
) -> NgramProfile {
    let tokens = tokenize(text);
    let mut profile = NgramProfile::default();
    for n in 1..=MAX_NGRAM {
        let map = &mut profile.orders[n - 1];
        for gram in ngrams(&tokens, n) {
            *map.entry(gram).or_insert(0.0) += 1.0;
        }
        if let (Weighting::TfIdf, Some(stats)) = (weighting, corpus) {
            for (gram, w) in map.iter_mut() {
                *w *= stats.idf(n, gram);
            }
        }
    }
    profile
}

/// Corpus-level consensus score of `candidates` against per-sample
/// `references` sets. Multi-reference sets average the per-reference score.
pub fn cider(
    candidates: &[String],
    references: &[Vec<String>],
    config: &CiderConfig,
) -> Result<f64, MetricsError> {
    config.validate()?;
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: candidates.len(),
            labels: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(MetricsError::EmptyReferences { index: i });
        }
    }

    let corpus = match config.weighting {
        Weighting::RawCount => None,
        Weighting::TfIdf => Some(CorpusStats::from_references(references)),
    };

    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let c_prof = ngram_profile(cand, config.weighting, corpus.as_ref());
        let mut sample = 0.0;
        for r in refs {
            let r_prof = ngram_profile(r, config.weighting, corpus.as_ref());
            for n in 1..=MAX_NGRAM {
                let cc = c_prof.inner(&c_prof, n);
                let rr = r_prof.inner(&r_prof, n);
                if cc > 0.0 && rr > 0.0 {
                    let cr = c_prof.inner(&r_prof, n);
                    sample += config.weights[n - 1] * cr / (cc * rr).sqrt();
                }
            }
        }
        total += sample / refs.len() as f64;
    }
    Ok(total / candidates.len() as f64)
}
