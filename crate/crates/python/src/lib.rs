//! Python bindings for `wealy-core`.
//!
//! Matrices cross the boundary as nested lists, so the module has no numpy
//! dependency.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wealy_core::baselines::{avgemb_distance_matrix, tfidf_distance_matrix, tfidf_fit};
use wealy_core::encoder::checkpoint::load_checkpoint;
use wealy_core::encoder::gem_pool;
use wealy_core::feature_store::{validate_manifest, DatasetManifest, LatentStore, Split};
use wealy_core::losses::{nt_xent, ContrastiveBatch};
use wealy_core::retrieval::{
    distance_matrix, embed_tracks, map_eval, oracle_distance_matrix, random_baseline, read_distances,
    write_distances, OracleRules,
};
use wealy_core::synth::{synth_dataset, SynthSpec};
use wealy_core::trainer::{train, TrainConfig};
use wealy_core::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    s.parse().map_err(to_py)
}

#[pyclass(name = "Manifest", module = "wealy")]
pub struct PyManifest {
    inner: DatasetManifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        DatasetManifest::load(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    /// Track ids of one split, in manifest order.
    fn track_ids(&self, split: &str) -> PyResult<Vec<String>> {
        let split = parse_split(split)?;
        Ok(self.inner.split(split).map(|r| r.track_id.clone()).collect())
    }

    fn clique_labels(&self) -> HashMap<String, String> {
        self.inner.clique_labels()
    }

    /// `(severity, track_id, message)` for every problem found.
    fn validate(&self) -> Vec<(String, Option<String>, String)> {
        validate_manifest(&self.inner)
            .issues
            .into_iter()
            .map(|i| {
                let sev = serde_json::to_value(i.severity).expect("severity serializes");
                (sev.as_str().unwrap_or_default().to_owned(), i.track_id, i.message)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Manifest(name={:?}, tracks={}, d={})",
            self.inner.dataset_name,
            self.inner.records.len(),
            self.inner.d
        )
    }
}

#[pyclass(name = "DistanceMatrix", module = "wealy")]
pub struct PyDistanceMatrix {
    inner: wealy_core::retrieval::DistanceMatrix,
}

#[pymethods]
impl PyDistanceMatrix {
    #[new]
    fn new(query_ids: Vec<String>, candidate_ids: Vec<String>, values: Vec<Vec<f32>>) -> PyResult<Self> {
        let cols = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err("ragged rows"));
        }
        let arr = Array2::from_shape_vec((values.len(), cols), values.concat())
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        wealy_core::retrieval::DistanceMatrix::new(query_ids, candidate_ids, arr)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        read_distances(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_distances(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn query_ids(&self) -> Vec<String> {
        self.inner.query_ids.clone()
    }

    #[getter]
    fn candidate_ids(&self) -> Vec<String> {
        self.inner.candidate_ids.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.values.dim()
    }

    fn values(&self) -> Vec<Vec<f32>> {
        self.inner.values.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.inner.values.dim();
        format!("DistanceMatrix({r}x{c})")
    }
}

/// Writes a synthetic dataset under `out_dir` and returns its manifest.
#[pyfunction]
#[pyo3(signature = (out_dir, n_cliques=None, seed=None))]
fn synth(out_dir: PathBuf, n_cliques: Option<usize>, seed: Option<u64>) -> PyResult<PyManifest> {
    let mut spec = SynthSpec::default();
    if let Some(n) = n_cliques {
        spec.n_cliques = n;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    synth_dataset(&spec, &out_dir).map(|inner| PyManifest { inner }).map_err(to_py)
}

/// Trains from a JSON config string; returns the training summary.
#[pyfunction]
#[pyo3(signature = (config_json, manifest, out_dir=None))]
fn train_encoder<'py>(
    py: Python<'py>,
    config_json: &str,
    manifest: &PyManifest,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: TrainConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    cfg.validate().map_err(to_py)?;
    let store = LatentStore::new(manifest.inner.clone());
    let outcome = train(&cfg, &store, out_dir.as_deref()).map_err(to_py)?;
    let h = &outcome.history;
    let out = PyDict::new(py);
    out.set_item("best_epoch", h.best_epoch)?;
    out.set_item("best_val_map", h.best_val_map)?;
    out.set_item(
        "stopped_reason",
        serde_json::to_value(h.stopped_reason).expect("serializes").as_str(),
    )?;
    out.set_item("val_map", h.epochs.iter().map(|e| e.val_map).collect::<Vec<_>>())?;
    out.set_item("train_loss", h.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>())?;
    out.set_item("checkpoint", outcome.checkpoint)?;
    Ok(out)
}

/// Distance matrix of one split under a trained checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, split="test", k=1500, overlap=0.9))]
fn embed(checkpoint: PathBuf, manifest: &PyManifest, split: &str, k: usize, overlap: f64) -> PyResult<PyDistanceMatrix> {
    let split = parse_split(split)?;
    let (params, cfg) = load_checkpoint(checkpoint).map_err(to_py)?;
    let ids: Vec<String> = manifest.inner.split(split).map(|r| r.track_id.clone()).collect();
    let store = LatentStore::new(manifest.inner.clone());
    let embs = embed_tracks(&params, &cfg, &store, &ids, k, overlap).map_err(to_py)?;
    distance_matrix(&embs, &ids, &ids)
        .map(|inner| PyDistanceMatrix { inner })
        .map_err(to_py)
}

/// Reference system distances: "tfidf", "avgemb", "random" or "oracle".
#[pyfunction]
#[pyo3(signature = (system, manifest, split="test", seed=0))]
fn baseline(system: &str, manifest: &PyManifest, split: &str, seed: u64) -> PyResult<PyDistanceMatrix> {
    let split = parse_split(split)?;
    let m = &manifest.inner;
    let ids: Vec<String> = m.split(split).map(|r| r.track_id.clone()).collect();
    let dm = match system {
        "tfidf" => tfidf_fit(m.split(split).map(|r| (r.track_id.as_str(), r.transcription.as_deref())))
            .and_then(|model| tfidf_distance_matrix(&model, &ids, &ids)),
        "avgemb" => avgemb_distance_matrix(&LatentStore::new(m.clone()), &ids),
        "random" => Ok(random_baseline(&ids, seed)),
        "oracle" => {
            let rules = OracleRules::default();
            let validity: HashMap<String, bool> = m
                .split(split)
                .map(|r| (r.track_id.clone(), rules.check(r.transcription.as_deref()).valid))
                .collect();
            oracle_distance_matrix(m, &ids, &validity)
        }
        other => return Err(PyValueError::new_err(format!("unknown system {other:?}"))),
    };
    dm.map(|inner| PyDistanceMatrix { inner }).map_err(to_py)
}

/// `(map, ci_halfwidth, n_queries)` against the manifest's cliques.
#[pyfunction]
fn evaluate(distances: &PyDistanceMatrix, manifest: &PyManifest) -> PyResult<(f64, f64, usize)> {
    let r = map_eval(&distances.inner, &manifest.inner).map_err(to_py)?;
    Ok((r.map, r.ci_halfwidth, r.n_queries))
}

#[pyfunction]
#[pyo3(signature = (audio, lyrics, alpha=1.5))]
fn fuse(audio: &PyDistanceMatrix, lyrics: &PyDistanceMatrix, alpha: f64) -> PyResult<PyDistanceMatrix> {
    wealy_core::fusion::fuse(&audio.inner, &lyrics.inner, alpha)
        .map(|inner| PyDistanceMatrix { inner })
        .map_err(to_py)
}

/// `(valid, failed rule names)` under the default rules.
#[pyfunction]
#[pyo3(signature = (transcription))]
fn oracle_check(transcription: Option<&str>) -> (bool, Vec<String>) {
    let v = OracleRules::default().check(transcription);
    (v.valid, v.failed.iter().map(|r| format!("{r:?}")).collect())
}

/// GeM pooling of a `k × d` matrix over its rows.
#[pyfunction]
#[pyo3(signature = (rows, p=3.0, eps=1e-6))]
fn gem(rows: Vec<Vec<f64>>, p: f64, eps: f64) -> PyResult<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let arr = Array2::from_shape_vec((rows.len(), d), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    gem_pool(arr.view(), p, eps).map(|v| v.to_vec()).map_err(to_py)
}

/// Symmetric NT-Xent over consecutive positive pairs `(0,1), (2,3), …`.
#[pyfunction]
#[pyo3(signature = (embeddings, temperature=0.1))]
fn ntxent(embeddings: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let batch = ContrastiveBatch::consecutive(embeddings.into_iter().map(Array1::from).collect()).map_err(to_py)?;
    nt_xent(&batch, temperature).map_err(to_py)
}

/// Module initializer; public so embedders can register it with the
/// interpreter before start-up.
#[pymodule]
pub fn wealy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifest>()?;
    m.add_class::<PyDistanceMatrix>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train_encoder, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(gem, m)?)?;
    m.add_function(wrap_pyfunction!(ntxent, m)?)?;
    Ok(())
}
