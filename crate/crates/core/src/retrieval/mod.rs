//! Chunked embedding, best-match similarity, distance matrices and MAP.

pub mod oracle;
mod wdst;

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{forward, EncoderConfig, EncoderParams, Embedding, Mode};
use crate::error::{Error, Result};
use crate::feature_store::{first_window, test_windows, DatasetManifest, LatentSequence, LatentStore};

pub use oracle::{oracle_distance_matrix, oracle_is_valid, OracleRules, OracleVerdict, Rule};
pub use wdst::{decode_distances, encode_distances, read_distances, write_distances};

/// Per-track chunk embeddings, keyed by track id.
pub type EmbeddingSet = BTreeMap<String, Vec<Embedding>>;

/// Query × candidate distances; the common currency of every system.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub query_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    pub values: Array2<f32>,
}

impl DistanceMatrix {
    pub fn new(query_ids: Vec<String>, candidate_ids: Vec<String>, values: Array2<f32>) -> Result<Self> {
        if values.dim() != (query_ids.len(), candidate_ids.len()) {
            return Err(Error::Shape(format!(
                "values are {:?}, ids imply ({}, {})",
                values.dim(),
                query_ids.len(),
                candidate_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("distance matrix holds non-finite values".into()));
        }
        Ok(Self {
            query_ids,
            candidate_ids,
            values,
        })
    }

    /// Square matrix over one id list.
    pub fn square(ids: Vec<String>, values: Array2<f32>) -> Result<Self> {
        Self::new(ids.clone(), ids, values)
    }

    pub fn is_square(&self) -> bool {
        self.query_ids == self.candidate_ids
    }
}

/// One eval-mode embedding per overlapping window, in window order.
pub fn embed_track(
    params: &EncoderParams<f32>,
    config: &EncoderConfig,
    seq: &LatentSequence,
    track_id: &str,
    k: usize,
    overlap: f64,
) -> Result<Vec<Embedding>> {
    test_windows(seq, track_id, k, overlap)
        .iter()
        .map(|w| forward(params, config, w, Mode::Eval))
        .collect()
}

/// Chunked embeddings for `track_ids`, parallel over tracks.
pub fn embed_tracks(
    params: &EncoderParams<f32>,
    config: &EncoderConfig,
    store: &LatentStore,
    track_ids: &[String],
    k: usize,
    overlap: f64,
) -> Result<EmbeddingSet> {
    let chunks: Vec<(String, Vec<Embedding>)> = track_ids
        .par_iter()
        .map(|id| {
            let seq = store.get(id)?;
            Ok((id.clone(), embed_track(params, config, &seq, id, k, overlap)?))
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().collect())
}

/// A single embedding per track from its first `k` rows.
pub fn embed_first_windows(
    params: &EncoderParams<f32>,
    config: &EncoderConfig,
    store: &LatentStore,
    track_ids: &[String],
    k: usize,
) -> Result<EmbeddingSet> {
    let chunks: Vec<(String, Vec<Embedding>)> = track_ids
        .par_iter()
        .map(|id| {
            let seq = store.get(id)?;
            let e = forward(params, config, &first_window(&seq, id, k), Mode::Eval)?;
            Ok((id.clone(), vec![e]))
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().collect())
}

fn unit_rows(embs: &[Embedding]) -> Result<Array2<f64>> {
    if embs.is_empty() {
        return Err(Error::Domain("track has no embeddings".into()));
    }
    let d = embs[0].values.len();
    let mut out = Array2::zeros((embs.len(), d));
    for (mut row, e) in out.rows_mut().into_iter().zip(embs) {
        if e.values.len() != d {
            return Err(Error::Shape("chunk embeddings of different lengths".into()));
        }
        let norm = e.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Domain(format!(
                "zero embedding for track {:?}",
                e.source_track
            )));
        }
        for (dst, &v) in row.iter_mut().zip(&e.values) {
            *dst = v as f64 / norm;
        }
    }
    Ok(out)
}

fn best_match(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.dot(&b.t())
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        .clamp(-1.0, 1.0)
}

/// Maximum cosine similarity over all chunk pairs.
pub fn track_similarity(a: &[Embedding], b: &[Embedding]) -> Result<f64> {
    Ok(best_match(&unit_rows(a)?, &unit_rows(b)?))
}

/// `1 − track_similarity` for every (query, candidate) pair.
pub fn distance_matrix(embs: &EmbeddingSet, queries: &[String], candidates: &[String]) -> Result<DistanceMatrix> {
    let units = |ids: &[String]| -> Result<Vec<Array2<f64>>> {
        ids.iter()
            .map(|id| unit_rows(embs.get(id).ok_or_else(|| Error::Lookup(id.clone()))?))
            .collect()
    };
    let q = units(queries)?;
    let c = units(candidates)?;
    let rows: Vec<Vec<f32>> = q
        .par_iter()
        .map(|qa| c.iter().map(|cb| (1.0 - best_match(qa, cb)) as f32).collect())
        .collect();
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((queries.len(), candidates.len()), flat).expect("row lengths");
    DistanceMatrix::new(queries.to_vec(), candidates.to_vec(), values)
}

/// Ranking of candidate indices: ascending distance, then ascending id.
/// The query itself is left out.
pub fn ranking(distances: &[f32], candidate_ids: &[String], query_id: &str) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidate_ids.len())
        .filter(|&j| candidate_ids[j] != query_id)
        .collect();
    order.sort_by(|&a, &b| {
        distances[a]
            .total_cmp(&distances[b])
            .then_with(|| candidate_ids[a].cmp(&candidate_ids[b]))
    });
    order
}

pub fn average_precision(
    distances: &[f32],
    candidate_ids: &[String],
    relevant: &HashSet<&str>,
    query_id: &str,
) -> Result<f64> {
    let order = ranking(distances, candidate_ids, query_id);
    let n_relevant = order
        .iter()
        .filter(|&&j| relevant.contains(candidate_ids[j].as_str()))
        .count();
    if n_relevant == 0 {
        return Err(Error::Domain(format!(
            "query {query_id:?} has no relevant candidate"
        )));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &j) in order.iter().enumerate() {
        if relevant.contains(candidate_ids[j].as_str()) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_relevant as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub map: f64,
    /// Half-width of the 95% percentile-bootstrap interval over queries.
    pub ci_halfwidth: f64,
    pub per_query_ap: Vec<(String, f64)>,
    pub n_queries: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 0;

pub fn map_eval(dm: &DistanceMatrix, manifest: &DatasetManifest) -> Result<EvalReport> {
    map_eval_labels(dm, &manifest.clique_labels())
}

/// MAP over every query whose clique has another member among the
/// candidates; relevance is clique equality.
pub fn map_eval_labels(dm: &DistanceMatrix, labels: &HashMap<String, String>) -> Result<EvalReport> {
    let label = |id: &String| labels.get(id).ok_or_else(|| Error::Lookup(id.clone()));
    let mut by_clique: HashMap<&str, Vec<&str>> = HashMap::new();
    for c in &dm.candidate_ids {
        by_clique.entry(label(c)?.as_str()).or_default().push(c.as_str());
    }
    let per_query: Vec<Option<(String, f64)>> = dm
        .query_ids
        .par_iter()
        .enumerate()
        .map(|(qi, q)| -> Result<Option<(String, f64)>> {
            let clique = label(q)?;
            let relevant: HashSet<&str> = by_clique
                .get(clique.as_str())
                .map(|m| m.iter().copied().filter(|&c| c != q).collect())
                .unwrap_or_default();
            if relevant.is_empty() {
                return Ok(None);
            }
            let row = dm.values.row(qi);
            let row = row.as_slice().map(<[f32]>::to_vec).unwrap_or_else(|| row.to_vec());
            let ap = average_precision(&row, &dm.candidate_ids, &relevant, q)?;
            Ok(Some((q.clone(), ap)))
        })
        .collect::<Result<_>>()?;
    let per_query_ap: Vec<(String, f64)> = per_query.into_iter().flatten().collect();
    if per_query_ap.is_empty() {
        return Err(Error::Domain("no query has a relevant candidate".into()));
    }
    let aps: Vec<f64> = per_query_ap.iter().map(|(_, ap)| *ap).collect();
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(EvalReport {
        map,
        ci_halfwidth: bootstrap_ci(&aps, BOOTSTRAP_RESAMPLES, 0.95, BOOTSTRAP_SEED),
        n_queries: aps.len(),
        per_query_ap,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile-bootstrap half-width of the mean: `(q_hi − q_lo) / 2`.
pub fn bootstrap_ci(values: &[f64], n_resamples: usize, level: f64, seed: u64) -> f64 {
    assert!(!values.is_empty(), "bootstrap over an empty list");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile(&means, 1.0 - tail) - quantile(&means, tail)) / 2.0
}

/// i.i.d. uniform (0, 1) distances, mirrored from the upper triangle.
pub fn random_baseline(ids: &[String], seed: u64) -> DistanceMatrix {
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::<f32>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v: f32 = rng.sample(Open01);
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    DistanceMatrix::square(ids.to_vec(), values).expect("shape by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn emb(values: &[f32]) -> Embedding {
        Embedding {
            values: values.to_vec(),
            source_track: "t".into(),
            window_start: 0,
        }
    }

    #[test]
    fn best_match_takes_maximum() {
        let a = vec![emb(&[1.0, 0.0])];
        let b = vec![
            emb(&[0.2, (1.0f32 - 0.04).sqrt()]),
            emb(&[0.9, (1.0f32 - 0.81).sqrt()]),
            emb(&[0.5, (1.0f32 - 0.25).sqrt()]),
        ];
        let s = track_similarity(&a, &b).unwrap();
        assert!((s - 0.9).abs() < 1e-6);
        assert!((track_similarity(&b, &a).unwrap() - s).abs() < 1e-15);
        assert_eq!(track_similarity(&a, &a).unwrap(), 1.0);
        assert!(matches!(track_similarity(&a, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn distance_matrix_properties() {
        let mut set = EmbeddingSet::new();
        set.insert("a".into(), vec![emb(&[1.0, 0.0])]);
        set.insert("b".into(), vec![emb(&[0.0, 2.0])]);
        set.insert("c".into(), vec![emb(&[1.0, 1.0]), emb(&[-1.0, 0.5])]);
        let all = ids(&["a", "b", "c"]);
        let dm = distance_matrix(&set, &all, &all).unwrap();
        for i in 0..3 {
            assert!(dm.values[[i, i]].abs() < 1e-6);
            for j in 0..3 {
                assert_eq!(dm.values[[i, j]], dm.values[[j, i]]);
            }
        }
        assert!((dm.values[[0, 1]] - 1.0).abs() < 1e-7);
        assert!(matches!(
            distance_matrix(&set, &ids(&["zz"]), &all),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn ap_examples() {
        let cands = ids(&["w", "x", "y", "z"]);
        let rel: HashSet<&str> = ["w"].into();
        assert_eq!(average_precision(&[0.1, 0.2, 0.3, 0.4], &cands, &rel, "q").unwrap(), 1.0);
        let rel: HashSet<&str> = ["w", "y"].into();
        let ap = average_precision(&[0.1, 0.2, 0.3, 0.4], &cands, &rel, "q").unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let all: HashSet<&str> = ["w", "x", "y", "z"].into();
        assert_eq!(average_precision(&[0.9, 0.1, 0.5, 0.3], &cands, &all, "q").unwrap(), 1.0);
        let none: HashSet<&str> = HashSet::new();
        assert!(average_precision(&[0.0; 4], &cands, &none, "q").is_err());
    }

    #[test]
    fn ties_break_by_candidate_id() {
        let cands = ids(&["b", "a"]);
        let rel: HashSet<&str> = ["b"].into();
        // equal distances: "a" ranks first, so the relevant "b" sits at rank 2
        assert_eq!(average_precision(&[0.5, 0.5], &cands, &rel, "q").unwrap(), 0.5);
    }

    #[test]
    fn query_is_excluded_from_its_ranking() {
        let cands = ids(&["q", "x", "y"]);
        let rel: HashSet<&str> = ["x"].into();
        assert_eq!(average_precision(&[0.0, 0.1, 0.2], &cands, &rel, "q").unwrap(), 1.0);
    }

    #[test]
    fn map_on_hand_built_matrix() {
        // cliques {a, b} and {c, d}
        let all = ids(&["a", "b", "c", "d"]);
        let values = array![
            [0.0f32, 0.3, 0.2, 0.9],
            [0.3, 0.0, 0.4, 0.1],
            [0.2, 0.4, 0.0, 0.5],
            [0.9, 0.1, 0.5, 0.0]
        ];
        let dm = DistanceMatrix::square(all.clone(), values).unwrap();
        let labels: HashMap<String, String> = [("a", "1"), ("b", "1"), ("c", "2"), ("d", "2")]
            .iter()
            .map(|(t, c)| (t.to_string(), c.to_string()))
            .collect();
        let r = map_eval_labels(&dm, &labels).unwrap();
        // a: c(0.2) b(0.3) -> 1/2 ; b: d(0.1) a(0.3) -> 1/2
        // c: a(0.2) b(0.4) d(0.5) -> 1/3 ; d: b(0.1) c(0.5) -> 1/2
        let expected = (0.5 + 0.5 + 1.0 / 3.0 + 0.5) / 4.0;
        assert!((r.map - expected).abs() < 1e-15);
        assert_eq!(r.n_queries, 4);
    }

    #[test]
    fn singleton_queries_are_skipped() {
        let all = ids(&["a", "b", "c"]);
        let labels: HashMap<String, String> = [("a", "1"), ("b", "1"), ("c", "2")]
            .iter()
            .map(|(t, c)| (t.to_string(), c.to_string()))
            .collect();
        let values = array![[0.0f32, 0.2, 0.1], [0.2, 0.0, 0.5], [0.1, 0.5, 0.0]];
        let dm = DistanceMatrix::square(all.clone(), values).unwrap();
        let r = map_eval_labels(&dm, &labels).unwrap();
        assert_eq!(r.n_queries, 2);
        assert_eq!(r.per_query_ap[0], ("a".to_string(), 0.5));
        assert_eq!(r.per_query_ap[1], ("b".to_string(), 1.0));
        assert_eq!(r.map, 0.75);
        let dm = DistanceMatrix::square(all.clone(), array![[0.0f32, 0.1, 0.2], [0.1, 0.0, 0.5], [0.2, 0.5, 0.0]]).unwrap();
        let r = map_eval_labels(&dm, &labels).unwrap();
        assert_eq!(r.map, 1.0);
        let solo: HashMap<String, String> = all.iter().map(|t| (t.clone(), t.clone())).collect();
        assert!(matches!(map_eval_labels(&dm, &solo), Err(Error::Domain(_))));
    }

    #[test]
    fn bootstrap_examples() {
        assert_eq!(bootstrap_ci(&[0.4; 50], 1000, 0.95, 3), 0.0);
        let mut v = vec![0.0; 500];
        v.extend(vec![1.0; 500]);
        for seed in 0..5 {
            let hw = bootstrap_ci(&v, 1000, 0.95, seed);
            assert!((hw - 0.031).abs() < 0.005, "seed {seed}: {hw}");
        }
        assert_eq!(bootstrap_ci(&v, 1000, 0.95, 9), bootstrap_ci(&v, 1000, 0.95, 9));
    }

    #[test]
    fn random_baseline_contract() {
        let all: Vec<String> = (0..30).map(|i| format!("t{i:02}")).collect();
        let a = random_baseline(&all, 4);
        assert_eq!(a, random_baseline(&all, 4));
        assert!(a.values.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a.values, a.values.t());
    }
}
