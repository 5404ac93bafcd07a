//! Latent sequences, the WLAT file format, dataset manifests and windowing.
//!
//! WLAT layout (all integers little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 4     | magic `WLAT`                    |
//! | 4     | format version (`u32`, = 1)     |
//! | 4     | row count `m` (`u32`)           |
//! | 4     | latent dimension `d` (`u32`)    |
//! | 4·m·d | `f32` payload, row-major        |

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WLAT_MAGIC: &[u8; 4] = b"WLAT";
pub const WLAT_VERSION: u32 = 1;
pub const WLAT_HEADER_LEN: usize = 16;

/// One track's decoder-latent matrix, `m` rows of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    data: Array2<f32>,
}

impl LatentSequence {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (m, d) = data.dim();
        if m == 0 || d == 0 {
            return Err(Error::Validation(format!(
                "latent sequence must be non-empty, got {m}x{d}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite latent value at row {} col {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged latent rows".into()));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((m, d), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn m(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }
}

/// A fixed-length slice of a track fed to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: Array2<f32>,
    pub source_track: String,
    pub start_index: usize,
}

impl Window {
    pub fn k(&self) -> usize {
        self.data.nrows()
    }
}

pub fn write_latents(seq: &LatentSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if seq.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("refusing to write non-finite latents".into()));
    }
    let (m, d) = seq.data.dim();
    let file = File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::storage(path, e);
    w.write_all(WLAT_MAGIC).map_err(io)?;
    w.write_all(&WLAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&to_u32(m)?.to_le_bytes()).map_err(io)?;
    w.write_all(&to_u32(d)?.to_le_bytes()).map_err(io)?;
    for v in seq.data.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Header fields of a WLAT file, plus the payload length actually present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WlatHeader {
    pub m: usize,
    pub d: usize,
}

fn parse_header(bytes: &[u8]) -> Result<WlatHeader> {
    if bytes.len() < WLAT_HEADER_LEN {
        return Err(Error::Corruption(format!(
            "header truncated: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != WLAT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"WLAT\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != WLAT_VERSION {
        return Err(Error::Format(format!("unsupported WLAT version {version}")));
    }
    Ok(WlatHeader {
        m: word(8) as usize,
        d: word(12) as usize,
    })
}

/// Reads only the header and checks the file length against it.
pub fn read_latent_header(path: impl AsRef<Path>) -> Result<WlatHeader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut head = Vec::with_capacity(WLAT_HEADER_LEN);
    Read::by_ref(&mut file)
        .take(WLAT_HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::storage(path, e))?;
    let header = parse_header(&head)?;
    let len = file.metadata().map_err(|e| Error::storage(path, e))?.len() as usize;
    let expected = WLAT_HEADER_LEN + header.m * header.d * 4;
    if len != expected {
        return Err(Error::Corruption(format!(
            "{}: payload is {} bytes, header implies {}",
            path.display(),
            len.saturating_sub(WLAT_HEADER_LEN),
            expected - WLAT_HEADER_LEN
        )));
    }
    Ok(header)
}

pub fn read_latents(path: impl AsRef<Path>) -> Result<LatentSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_latents(&bytes).map_err(|e| match e {
        Error::Corruption(msg) => Error::Corruption(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_latents(bytes: &[u8]) -> Result<LatentSequence> {
    let WlatHeader { m, d } = parse_header(bytes)?;
    let payload = &bytes[WLAT_HEADER_LEN..];
    let expected = m * d * 4;
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, header (m={m}, d={d}) implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((m, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    LatentSequence::new(data).map_err(|e| match e {
        Error::Validation(msg) => Error::Corruption(msg),
        other => other,
    })
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Validation(format!("dimension {n} exceeds u32")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One line of the JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub track_id: String,
    pub clique_id: String,
    pub split: Split,
    pub latent_path: String,
    pub transcription: Option<String>,
    pub language: Option<String>,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<TrackRecord>,
    pub dataset_name: String,
    /// Latent dimension shared by every record's file.
    pub d: usize,
    /// Directory relative latent paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Loads a manifest; `d` is taken from the first readable latent header
    /// (0 if none can be read; `validate_manifest` reports why).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::storage(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::storage(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrackRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(rec);
        }
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let dataset_name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut manifest = Self {
            records,
            dataset_name,
            d: 0,
            base_dir,
        };
        manifest.d = manifest
            .records
            .iter()
            .find_map(|r| read_latent_header(manifest.resolve(r)).ok())
            .map_or(0, |h| h.d);
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::storage(path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &self.records {
            let line = serde_json::to_string(rec).expect("track record serializes");
            writeln!(w, "{line}").map_err(|e| Error::storage(path, e))?;
        }
        w.flush().map_err(|e| Error::storage(path, e))
    }

    pub fn resolve(&self, record: &TrackRecord) -> PathBuf {
        self.base_dir.join(&record.latent_path)
    }

    pub fn get(&self, track_id: &str) -> Option<&TrackRecord> {
        self.records.iter().find(|r| r.track_id == track_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrackRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn clique_labels(&self) -> HashMap<String, String> {
        self.records
            .iter()
            .map(|r| (r.track_id.clone(), r.clique_id.clone()))
            .collect()
    }

    /// Cliques of `split` in first-appearance order, mapped to their tracks.
    pub fn cliques(&self, split: Split) -> Vec<(String, Vec<String>)> {
        let mut order: Vec<String> = Vec::new();
        let mut members: HashMap<&str, Vec<String>> = HashMap::new();
        for r in self.split(split) {
            let entry = members.entry(r.clique_id.as_str()).or_default();
            if entry.is_empty() {
                order.push(r.clique_id.clone());
            }
            entry.push(r.track_id.clone());
        }
        order
            .into_iter()
            .map(|c| {
                let tracks = members.remove(c.as_str()).unwrap_or_default();
                (c, tracks)
            })
            .collect()
    }

    /// Train cliques with at least two members; the rest cannot form a
    /// positive pair and are left out of training batches.
    pub fn trainable_cliques(&self) -> Vec<(String, Vec<String>)> {
        self.cliques(Split::Train)
            .into_iter()
            .filter(|(_, tracks)| tracks.len() >= 2)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    pub track_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    fn push(&mut self, severity: Severity, track_id: Option<&str>, message: String) {
        self.issues.push(ValidationIssue {
            severity,
            track_id: track_id.map(str::to_owned),
            message,
        });
    }
}

pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for rec in &manifest.records {
        if !seen.insert(rec.track_id.as_str()) {
            report.push(
                Severity::Error,
                Some(&rec.track_id),
                format!("duplicate track_id {:?}", rec.track_id),
            );
        }
        match read_latent_header(manifest.resolve(rec)) {
            Ok(h) if h.d != manifest.d => report.push(
                Severity::Error,
                Some(&rec.track_id),
                format!("latent dimension {} differs from dataset dimension {}", h.d, manifest.d),
            ),
            Ok(h) if h.m == 0 => report.push(
                Severity::Error,
                Some(&rec.track_id),
                "latent file has no rows".into(),
            ),
            Ok(_) => {}
            Err(e) => report.push(Severity::Error, Some(&rec.track_id), e.to_string()),
        }
    }
    for (clique, tracks) in manifest.cliques(Split::Train) {
        if tracks.len() < 2 {
            report.push(
                Severity::Warning,
                tracks.first().map(String::as_str),
                format!("untrainable clique {clique:?}: only one train member"),
            );
        }
    }
    report
}

fn tiled(seq: &LatentSequence, start: usize, k: usize) -> Array2<f32> {
    let m = seq.m();
    let src = seq.data();
    let mut out = Array2::zeros((k, seq.d()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&src.row((start + i) % m));
    }
    out
}

/// Random training window: uniform start when the track is long enough,
/// cyclic tiling from row 0 otherwise.
pub fn sample_train_window<R: Rng + ?Sized>(
    seq: &LatentSequence,
    track_id: &str,
    k: usize,
    rng: &mut R,
) -> Window {
    assert!(k >= 1, "window length must be positive");
    let m = seq.m();
    let start = if m >= k { rng.random_range(0..=m - k) } else { 0 };
    Window {
        data: tiled(seq, start, k),
        source_track: track_id.to_owned(),
        start_index: start,
    }
}

pub fn first_window(seq: &LatentSequence, track_id: &str, k: usize) -> Window {
    assert!(k >= 1, "window length must be positive");
    Window {
        data: tiled(seq, 0, k),
        source_track: track_id.to_owned(),
        start_index: 0,
    }
}

/// Start offsets used by [`test_windows`].
pub fn test_window_starts(m: usize, k: usize, overlap: f64) -> Vec<usize> {
    assert!(k >= 1, "window length must be positive");
    assert!(
        (0.0..1.0).contains(&overlap),
        "overlap must lie in [0, 1), got {overlap}"
    );
    if m < k {
        return vec![0];
    }
    let stride = ((k as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..=m - k).step_by(stride).collect();
    if starts.last() != Some(&(m - k)) {
        starts.push(m - k);
    }
    starts
}

/// Overlapping evaluation windows; the last one is end-aligned so the tail of
/// the track is always covered.
pub fn test_windows(seq: &LatentSequence, track_id: &str, k: usize, overlap: f64) -> Vec<Window> {
    test_window_starts(seq.m(), k, overlap)
        .into_iter()
        .map(|start| Window {
            data: tiled(seq, start, k),
            source_track: track_id.to_owned(),
            start_index: start,
        })
        .collect()
}

/// Read-through cache of latent files keyed by track id.
#[derive(Debug, Clone)]
pub struct LatentStore {
    manifest: Arc<DatasetManifest>,
    cache: Arc<RwLock<BTreeMap<String, Arc<LatentSequence>>>>,
}

impl LatentStore {
    pub fn new(manifest: DatasetManifest) -> Self {
        Self {
            manifest: Arc::new(manifest),
            cache: Arc::default(),
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn get(&self, track_id: &str) -> Result<Arc<LatentSequence>> {
        if let Some(seq) = self.cache.read().unwrap().get(track_id) {
            return Ok(seq.clone());
        }
        let rec = self
            .manifest
            .get(track_id)
            .ok_or_else(|| Error::Lookup(track_id.to_owned()))?;
        let seq = Arc::new(read_latents(self.manifest.resolve(rec))?);
        self.cache
            .write()
            .unwrap()
            .insert(track_id.to_owned(), seq.clone());
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq_with_rows(m: usize, d: usize) -> LatentSequence {
        LatentSequence::new(Array2::from_shape_fn((m, d), |(i, j)| (i * d + j) as f32)).unwrap()
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wlat");
        let seq = LatentSequence::new(Array2::<f32>::ones((2, 4))).unwrap();
        write_latents(&seq, &path).unwrap();
        // 16-byte header + 2*4 f32
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 32);
        assert_eq!(read_latents(&path).unwrap(), seq);
    }

    #[test]
    fn nan_is_rejected() {
        let data = array![[1.0f32, f32::NAN]];
        assert!(matches!(LatentSequence::new(data.clone()), Err(Error::Validation(_))));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = b"XLAT".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(decode_latents(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let mut bytes = WLAT_MAGIC.to_vec();
        for v in [1u32, 3, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, 20));
        match decode_latents(&bytes) {
            Err(Error::Corruption(msg)) => assert!(msg.contains("24"), "{msg}"),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn full_length_window_starts_at_zero() {
        let seq = seq_with_rows(1500, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let w = sample_train_window(&seq, "t", 1500, &mut rng);
            assert_eq!(w.start_index, 0);
            assert_eq!(w.data, seq.data());
        }
    }

    #[test]
    fn short_sequences_tile_cyclically() {
        let seq = seq_with_rows(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = sample_train_window(&seq, "t", 6, &mut rng);
        let rows: Vec<f32> = w.data.column(0).to_vec();
        assert_eq!(rows, vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0]);
        assert_eq!(w.start_index, 0);
        assert_eq!(first_window(&seq, "t", 6).data, w.data);
    }

    #[test]
    fn train_window_starts_are_uniform() {
        // 1501 possible starts; bucket into 19 bins of 79 starts each.
        let seq = seq_with_rows(3000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let bins = 19usize;
        let mut counts = vec![0usize; bins];
        let draws = 10_000;
        for _ in 0..draws {
            let w = sample_train_window(&seq, "t", 1500, &mut rng);
            assert!(w.start_index <= 1500);
            counts[w.start_index / 79] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 18 dof, p = 0.001 critical value
        assert!(chi2 < 42.31, "chi-square {chi2}");
    }

    #[test]
    fn first_window_takes_leading_rows() {
        let seq = seq_with_rows(2000, 1);
        let w = first_window(&seq, "t", 1500);
        assert_eq!(w.start_index, 0);
        assert_eq!(w.data.column(0)[1499], 1499.0);
        assert_eq!(first_window(&seq, "t", 1500), w);
        let full = seq_with_rows(1500, 3);
        assert_eq!(first_window(&full, "t", 1500).data, full.data());
    }

    #[test]
    fn test_window_enumeration() {
        let starts = test_window_starts(3000, 1500, 0.9);
        assert_eq!(starts, (0..=1500).step_by(150).collect::<Vec<_>>());
        assert_eq!(starts.len(), 11);
        assert_eq!(test_window_starts(1600, 1500, 0.9), vec![0, 100]);
        let short = seq_with_rows(800, 2);
        let ws = test_windows(&short, "t", 1500, 0.9);
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].k(), 1500);
        assert_eq!(test_window_starts(10, 4, 0.0), vec![0, 4, 6]);
    }

    proptest::proptest! {
        #[test]
        fn windows_have_k_rows_and_cover_tail(m in 1usize..300, k in 1usize..120, overlap in 0.0f64..0.99) {
            let seq = seq_with_rows(m, 2);
            let ws = test_windows(&seq, "t", k, overlap);
            proptest::prop_assert!(!ws.is_empty());
            for w in &ws {
                proptest::prop_assert_eq!(w.k(), k);
            }
            if m >= k {
                let last = ws.last().unwrap();
                proptest::prop_assert_eq!(last.start_index + k, m);
                proptest::prop_assert_eq!(&ws[0], &first_window(&seq, "t", k));
            }
        }

        #[test]
        fn wlat_round_trip(m in 1usize..8, d in 1usize..8, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((m, d), |_| rng.random_range(-1e6f32..1e6));
            let seq = LatentSequence::new(data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.wlat");
            write_latents(&seq, &path).unwrap();
            let back = read_latents(&path).unwrap();
            proptest::prop_assert!(back.data().iter().zip(seq.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let seq = seq_with_rows(500, 2);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_train_window(&seq, "t", 100, &mut rng).start_index)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    fn write_manifest(dir: &Path, records: &[(&str, &str, Split, usize)]) -> DatasetManifest {
        let mut recs = Vec::new();
        for &(tid, cid, split, d) in records {
            let rel = format!("{tid}.wlat");
            write_latents(&seq_with_rows(3, d), dir.join(&rel)).unwrap();
            recs.push(TrackRecord {
                track_id: tid.into(),
                clique_id: cid.into(),
                split,
                latent_path: rel,
                transcription: None,
                language: None,
                duration_s: None,
            });
        }
        let m = DatasetManifest {
            records: recs,
            dataset_name: "t".into(),
            d: 0,
            base_dir: dir.to_path_buf(),
        };
        let path = dir.join("manifest.jsonl");
        m.save(&path).unwrap();
        DatasetManifest::load(&path).unwrap()
    }

    #[test]
    fn manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write_manifest(
            dir.path(),
            &[
                ("a", "c1", Split::Train, 4),
                ("b", "c1", Split::Train, 4),
                ("c", "c2", Split::Test, 4),
            ],
        );
        assert_eq!(ok.d, 4);
        assert!(validate_manifest(&ok).is_empty());

        let mut dup = ok.clone();
        dup.records.push(dup.records[0].clone());
        let report = validate_manifest(&dup);
        assert_eq!(report.errors().count(), 1);

        let mut missing = ok.clone();
        missing.records[2].latent_path = "nope.wlat".into();
        assert_eq!(validate_manifest(&missing).errors().count(), 1);

        // the fixtures below rewrite the same files
        let lonely = write_manifest(
            dir.path(),
            &[("a", "c1", Split::Train, 4), ("b", "c2", Split::Train, 4), ("x", "c2", Split::Train, 4)],
        );
        let report = validate_manifest(&lonely);
        assert_eq!(report.errors().count(), 0);
        let w: Vec<_> = report.warnings().collect();
        assert_eq!(w.len(), 1);
        assert!(w[0].message.contains("untrainable clique"));

        let mixed = write_manifest(dir.path(), &[("a", "c1", Split::Train, 4), ("b", "c1", Split::Train, 5)]);
        assert_eq!(validate_manifest(&mixed).errors().count(), 1);

    }

    #[test]
    fn manifest_lines_use_exact_field_names() {
        let rec = TrackRecord {
            track_id: "t1".into(),
            clique_id: "c".into(),
            split: Split::Val,
            latent_path: "t1.wlat".into(),
            transcription: None,
            language: Some("en".into()),
            duration_s: None,
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"track_id":"t1","clique_id":"c","split":"val","latent_path":"t1.wlat","transcription":null,"language":"en","duration_s":null}"#
        );
    }
}
