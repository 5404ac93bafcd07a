//! Non-instrumental oracle: a lyrics upper bound that only matches versions
//! whose transcriptions look like real sung text.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::error::{Error, Result};
use crate::feature_store::DatasetManifest;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// (i) enough words
    MinWords,
    /// (ii) enough alphanumeric characters
    MinAlphanumeric,
    /// (iii) limited bigram/trigram repetition
    NgramRepetition,
    /// (iv) no phrase dominating the text
    RepeatedPhrase,
    /// (v) no purely musical content
    MusicalContent,
}

/// Thresholds and pattern lists; loadable from JSON to extend the patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleRules {
    pub min_words: usize,
    pub min_alphanumeric: usize,
    /// Largest share of all n-grams one bigram or trigram may take.
    pub max_ngram_share: f64,
    pub min_unique_bigrams: usize,
    pub min_unique_trigrams: usize,
    /// Largest fraction of tokens one repeated phrase (3+ words) may cover.
    pub max_phrase_coverage: f64,
    pub filler_tokens: Vec<String>,
    pub max_filler_share: f64,
    /// Words that mark an annotation such as `[Instrumental]` as non-lyrical.
    pub musical_tags: Vec<String>,
    pub musical_symbols: Vec<String>,
}

impl Default for OracleRules {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            min_words: 10,
            min_alphanumeric: 5,
            max_ngram_share: 0.7,
            min_unique_bigrams: 3,
            min_unique_trigrams: 2,
            max_phrase_coverage: 0.5,
            filler_tokens: s(&["la", "na", "da", "hmm", "mmm", "oh", "ah", "uh"]),
            max_filler_share: 0.8,
            musical_tags: s(&["instrumental", "music", "humming", "hum", "solo", "inaudible"]),
            musical_symbols: s(&["♪", "♫", "♬"]),
        }
    }
}

impl OracleRules {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleVerdict {
    pub valid: bool,
    pub failed: Vec<Rule>,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Unique count and the share of the most frequent n-gram.
fn ngram_stats(tokens: &[String], n: usize) -> (usize, f64) {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    let top = counts.values().copied().max().unwrap_or(0);
    let share = if total == 0 { 0.0 } else { top as f64 / total as f64 };
    (counts.len(), share)
}

/// Largest token coverage achieved by the occurrences of one repeated
/// phrase of three or more words.
fn max_phrase_coverage(tokens: &[String]) -> f64 {
    let len = tokens.len();
    let mut best = 0.0f64;
    for n in 3..=len / 2 {
        let mut positions: HashMap<&[String], Vec<usize>> = HashMap::new();
        for (i, gram) in tokens.windows(n).enumerate() {
            positions.entry(gram).or_default().push(i);
        }
        let mut any_repeat = false;
        for starts in positions.values().filter(|s| s.len() >= 2) {
            any_repeat = true;
            let mut covered = 0usize;
            let mut reach = 0usize;
            for &s in starts {
                let from = s.max(reach);
                let to = s + n;
                if to > from {
                    covered += to - from;
                }
                reach = reach.max(to);
            }
            best = best.max(covered as f64 / len as f64);
        }
        if !any_repeat {
            break;
        }
    }
    best
}

impl OracleRules {
    pub fn check(&self, transcription: Option<&str>) -> OracleVerdict {
        let raw = transcription.unwrap_or("");
        let tokens = text::tokens(raw);
        let mut failed = Vec::new();

        if tokens.len() < self.min_words {
            failed.push(Rule::MinWords);
        }

        let alnum = tokens
            .iter()
            .flat_map(|t| t.chars())
            .filter(|c| c.is_alphanumeric())
            .count();
        if alnum < self.min_alphanumeric {
            failed.push(Rule::MinAlphanumeric);
        }

        let (uni2, share2) = ngram_stats(&tokens, 2);
        let (uni3, share3) = ngram_stats(&tokens, 3);
        if share2 > self.max_ngram_share
            || share3 > self.max_ngram_share
            || uni2 < self.min_unique_bigrams
            || uni3 < self.min_unique_trigrams
        {
            failed.push(Rule::NgramRepetition);
        }

        if max_phrase_coverage(&tokens) > self.max_phrase_coverage {
            failed.push(Rule::RepeatedPhrase);
        }

        let fillers: HashSet<&str> = self.filler_tokens.iter().map(String::as_str).collect();
        let filler_share = if tokens.is_empty() {
            0.0
        } else {
            tokens.iter().filter(|t| fillers.contains(t.as_str())).count() as f64 / tokens.len() as f64
        };
        let tagged = text::annotations(raw).iter().any(|a| {
            a.split(|c: char| !c.is_alphanumeric())
                .any(|w| self.musical_tags.iter().any(|t| t == w))
        });
        let symbols = self.musical_symbols.iter().any(|s| raw.contains(s.as_str()));
        if filler_share > self.max_filler_share || tagged || symbols {
            failed.push(Rule::MusicalContent);
        }

        OracleVerdict {
            valid: failed.is_empty(),
            failed,
        }
    }
}

/// Default-rule validity check of one transcription (`None` is invalid).
pub fn oracle_is_valid(transcription: Option<&str>) -> OracleVerdict {
    OracleRules::default().check(transcription)
}

/// Distance 0 between same-clique tracks that are both valid, 1 otherwise.
pub fn oracle_distance_matrix(
    manifest: &DatasetManifest,
    track_ids: &[String],
    validity: &HashMap<String, bool>,
) -> Result<DistanceMatrix> {
    let labels = manifest.clique_labels();
    let info: Vec<(&String, bool)> = track_ids
        .iter()
        .map(|id| {
            let clique = labels.get(id).ok_or_else(|| Error::Lookup(id.clone()))?;
            let valid = *validity.get(id).ok_or_else(|| Error::Lookup(id.clone()))?;
            Ok((clique, valid))
        })
        .collect::<Result<_>>()?;
    let n = track_ids.len();
    let values = Array2::from_shape_fn((n, n), |(i, j)| {
        let (ci, vi) = info[i];
        let (cj, vj) = info[j];
        if ci == cj && vi && vj {
            0.0
        } else {
            1.0
        }
    });
    DistanceMatrix::square(track_ids.to_vec(), values)
}
