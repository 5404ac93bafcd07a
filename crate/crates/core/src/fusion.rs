//! Distance-level late fusion with an external audio system.
//!
//! `fused = audio + alpha · lyrics`, with no rescaling of either input; the
//! weight alone absorbs the difference in scale.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{map_eval_labels, DistanceMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 1.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("fusion weight must be finite and >= 0, got {alpha}")))
    }
}

/// Elementwise `audio + alpha · lyrics`. Both matrices must list the same
/// ids in the same order; see [`align_matrices`] otherwise.
pub fn fuse(audio: &DistanceMatrix, lyrics: &DistanceMatrix, alpha: f64) -> Result<DistanceMatrix> {
    check_alpha(alpha)?;
    if audio.query_ids != lyrics.query_ids || audio.candidate_ids != lyrics.candidate_ids {
        return Err(Error::Alignment(
            "id lists differ between the matrices; align them first".into(),
        ));
    }
    let values = if alpha == 0.0 {
        audio.values.clone()
    } else {
        let a = alpha as f32;
        let mut v = audio.values.clone();
        v.zip_mut_with(&lyrics.values, |x, &y| *x += a * y);
        v
    };
    DistanceMatrix::new(audio.query_ids.clone(), audio.candidate_ids.clone(), values)
}

fn index(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

fn difference(a: &[String], b: &[String]) -> Option<String> {
    let sa: BTreeSet<&String> = a.iter().collect();
    let sb: BTreeSet<&String> = b.iter().collect();
    if sa == sb && a.len() == b.len() {
        return None;
    }
    let diff: Vec<&str> = sa.symmetric_difference(&sb).map(|s| s.as_str()).collect();
    Some(if diff.is_empty() {
        "duplicate ids".into()
    } else {
        diff.join(", ")
    })
}

/// Returns `a` unchanged and `b` permuted onto `a`'s query and candidate order.
pub fn align_matrices(a: &DistanceMatrix, b: &DistanceMatrix) -> Result<(DistanceMatrix, DistanceMatrix)> {
    for (what, x, y) in [
        ("query", &a.query_ids, &b.query_ids),
        ("candidate", &a.candidate_ids, &b.candidate_ids),
    ] {
        if let Some(diff) = difference(x, y) {
            return Err(Error::Alignment(format!("{what} ids differ: {diff}")));
        }
    }
    let qi = index(&b.query_ids);
    let ci = index(&b.candidate_ids);
    let rows: Vec<usize> = a.query_ids.iter().map(|q| qi[q.as_str()]).collect();
    let cols: Vec<usize> = a.candidate_ids.iter().map(|c| ci[c.as_str()]).collect();
    let values = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| b.values[[rows[i], cols[j]]]);
    let b2 = DistanceMatrix::new(a.query_ids.clone(), a.candidate_ids.clone(), values)?;
    Ok((a.clone(), b2))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub map: f64,
}

/// MAP of the fused matrix for every alpha in `min, min+step, …, ≤ max`.
pub fn sweep_alpha(
    min: f64,
    max: f64,
    step: f64,
    audio: &DistanceMatrix,
    lyrics: &DistanceMatrix,
    labels: &HashMap<String, String>,
) -> Result<Vec<SweepPoint>> {
    check_alpha(min)?;
    if !(step > 0.0) || !step.is_finite() || !(max >= min) {
        return Err(Error::Config(format!("bad sweep range {min}..{max} step {step}")));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| {
            let alpha = min + i as f64 * step;
            let map = map_eval_labels(&fuse(audio, lyrics, alpha)?, labels)?.map;
            Ok(SweepPoint { alpha, map })
        })
        .collect()
}
