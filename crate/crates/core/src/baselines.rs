//! Reference systems: TF-IDF over transcriptions, cosine over time-averaged
//! latents, and the averaged-input MLP head trained like the main encoder.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::encoder::Variant;
use crate::error::{Error, Result};
use crate::feature_store::LatentStore;
use crate::retrieval::DistanceMatrix;
use crate::text;
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Sparse L2-normalized vector: `(term index, weight)` sorted by index.
pub type SparseVec = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct TfIdfModel {
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub doc_vectors: HashMap<String, SparseVec>,
}

/// Fits raw-count tf with smooth idf `ln((1 + D) / (1 + df)) + 1`.
pub fn tfidf_fit<'a, I>(corpus: I) -> Result<TfIdfModel>
where
    I: IntoIterator<Item = (&'a str, Option<&'a str>)>,
{
    let docs: Vec<(String, Vec<String>)> = corpus
        .into_iter()
        .map(|(id, t)| (id.to_owned(), text::tokens(t.unwrap_or(""))))
        .collect();
    if docs.is_empty() {
        return Err(Error::Domain("empty TF-IDF corpus".into()));
    }
    let mut vocabulary = BTreeMap::new();
    for (_, toks) in &docs {
        for t in toks {
            vocabulary.entry(t.clone()).or_insert(0usize);
        }
    }
    for (i, v) in vocabulary.values_mut().enumerate() {
        *v = i;
    }
    let mut df = vec![0usize; vocabulary.len()];
    let mut counts: Vec<BTreeMap<usize, usize>> = Vec::with_capacity(docs.len());
    for (_, toks) in &docs {
        let mut c = BTreeMap::new();
        for t in toks {
            *c.entry(vocabulary[t]).or_insert(0) += 1;
        }
        for &i in c.keys() {
            df[i] += 1;
        }
        counts.push(c);
    }
    let n = docs.len() as f64;
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    let mut doc_vectors = HashMap::with_capacity(docs.len());
    for ((id, _), c) in docs.into_iter().zip(counts) {
        let mut v: SparseVec = c.into_iter().map(|(i, tf)| (i, tf as f64 * idf[i])).collect();
        let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|(_, w)| *w /= norm);
        }
        doc_vectors.insert(id, v);
    }
    Ok(TfIdfModel {
        vocabulary,
        idf,
        doc_vectors,
    })
}

pub fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// `1 − cosine`; any pair involving an empty vector gets distance 1.
pub fn tfidf_distance_matrix(model: &TfIdfModel, queries: &[String], candidates: &[String]) -> Result<DistanceMatrix> {
    let lookup = |id: &String| model.doc_vectors.get(id).ok_or_else(|| Error::Lookup(id.clone()));
    let q = queries.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    let c = candidates.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f32>> = q
        .par_iter()
        .map(|a| {
            c.iter()
                .map(|b| {
                    if a.is_empty() || b.is_empty() {
                        1.0
                    } else {
                        (1.0 - sparse_dot(a, b).clamp(-1.0, 1.0)) as f32
                    }
                })
                .collect()
        })
        .collect();
    let values = Array2::from_shape_vec((queries.len(), candidates.len()), rows.concat()).expect("row lengths");
    DistanceMatrix::new(queries.to_vec(), candidates.to_vec(), values)
}

/// Column mean over every latent row of a track, in 64-bit.
pub fn mean_latent(store: &LatentStore, track_id: &str) -> Result<Vec<f64>> {
    let seq = store.get(track_id)?;
    let m = seq.m() as f64;
    let mut sum = vec![0.0f64; seq.d()];
    for row in seq.data().rows() {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    Ok(sum.into_iter().map(|s| s / m).collect())
}

/// Cosine distance between time-averaged latents (no windowing). A zero mean
/// vector is at distance 1 from everything.
pub fn avgemb_distance_matrix(store: &LatentStore, track_ids: &[String]) -> Result<DistanceMatrix> {
    let units: Vec<Option<Vec<f64>>> = track_ids
        .par_iter()
        .map(|id| {
            let v = mean_latent(store, id)?;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Ok((norm > 0.0).then(|| v.iter().map(|x| x / norm).collect()))
        })
        .collect::<Result<_>>()?;
    let n = track_ids.len();
    let rows: Vec<Vec<f32>> = units
        .par_iter()
        .map(|a| {
            units
                .iter()
                .map(|b| match (a, b) {
                    (Some(a), Some(b)) => {
                        let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        (1.0 - cos.clamp(-1.0, 1.0)) as f32
                    }
                    _ => 1.0,
                })
                .collect()
        })
        .collect();
    let values = Array2::from_shape_vec((n, n), rows.concat()).expect("row lengths");
    DistanceMatrix::square(track_ids.to_vec(), values)
}

/// Trains the averaged-input MLP variant with the regular training loop.
pub fn avg_mlp_pipeline(config: &TrainConfig, store: &LatentStore, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.encoder.variant = Variant::AvgMlp;
    train(&cfg, store, out_dir)
}
