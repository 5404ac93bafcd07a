//! Contrastive objectives over a batch of paired embeddings.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::Objective;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            triplet_margin: 0.3,
        }
    }
}

/// `2N` embeddings and the involution linking each to its positive partner.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub embeddings: Vec<Array1<f64>>,
    pub pair_of: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Vec<Array1<f64>>, pair_of: Vec<usize>) -> Result<Self> {
        validate_pairs(&pair_of, embeddings.len())?;
        Ok(Self {
            embeddings,
            pair_of,
        })
    }

    /// Consecutive items `(0,1), (2,3), …` are positives.
    pub fn consecutive(embeddings: Vec<Array1<f64>>) -> Result<Self> {
        let pair_of = consecutive_pairs(embeddings.len());
        Self::new(embeddings, pair_of)
    }
}

pub fn consecutive_pairs(n: usize) -> Vec<usize> {
    (0..n).map(|i| i ^ 1).collect()
}

fn validate_pairs(pair_of: &[usize], n: usize) -> Result<()> {
    if pair_of.len() != n {
        return Err(Error::Shape(format!(
            "pair mapping has {} entries for {n} embeddings",
            pair_of.len()
        )));
    }
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "contrastive batch needs an even size >= 2, got {n}"
        )));
    }
    for (i, &j) in pair_of.iter().enumerate() {
        if j >= n || j == i || pair_of[j] != i {
            return Err(Error::Domain(format!(
                "pair mapping is not a perfect matching at index {i}"
            )));
        }
    }
    Ok(())
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Unit vectors and norms; rejects zero or non-finite embeddings.
fn normalize(embeddings: &[Array1<f64>]) -> Result<(Array2<f64>, Vec<f64>)> {
    let d = embeddings.first().map_or(0, Array1::len);
    let mut units = Array2::zeros((embeddings.len(), d));
    let mut norms = Vec::with_capacity(embeddings.len());
    for (i, z) in embeddings.iter().enumerate() {
        if z.len() != d {
            return Err(Error::Shape("embeddings of different lengths".into()));
        }
        let n = z.dot(z).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Domain(format!("embedding {i} has norm {n}")));
        }
        units.row_mut(i).assign(&(z / n));
        norms.push(n);
    }
    Ok((units, norms))
}

/// Chain rule from `dL/dS` (S = pairwise cosine matrix) back to the raw
/// embeddings.
fn similarity_grad_to_embeddings(
    units: &Array2<f64>,
    norms: &[f64],
    d_sim: &Array2<f64>,
) -> Vec<Array1<f64>> {
    let sym = d_sim + &d_sim.t();
    let d_units = sym.dot(units);
    d_units
        .rows()
        .into_iter()
        .zip(units.rows())
        .zip(norms)
        .map(|((du, u), &n)| {
            let radial = du.dot(&u);
            (&du - &(&u * radial)) / n
        })
        .collect()
}

fn nt_xent_impl(
    embeddings: &[Array1<f64>],
    pair_of: &[usize],
    temperature: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Array1<f64>>>)> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    validate_pairs(pair_of, embeddings.len())?;
    let (units, norms) = normalize(embeddings)?;
    let n = embeddings.len();
    let logits = units.dot(&units.t()) / temperature;
    let mut d_sim = Array2::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        let lse = max + denom.ln();
        total += lse - row[pair_of[i]];
        if want_grad {
            for k in (0..n).filter(|&k| k != i) {
                let soft = (row[k] - lse).exp();
                let target = if k == pair_of[i] { 1.0 } else { 0.0 };
                d_sim[[i, k]] = (soft - target) / (temperature * n as f64);
            }
        }
    }
    let loss = total / n as f64;
    let grads = want_grad.then(|| similarity_grad_to_embeddings(&units, &norms, &d_sim));
    Ok((loss, grads))
}

/// Symmetric NT-Xent averaged over all `2N` anchors; each anchor's
/// denominator runs over the other `2N − 1` items.
pub fn nt_xent(batch: &ContrastiveBatch, temperature: f64) -> Result<f64> {
    nt_xent_impl(&batch.embeddings, &batch.pair_of, temperature, false).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy)]
pub struct NtXent {
    pub temperature: f64,
}

impl Objective for NtXent {
    fn loss_and_grad(
        &self,
        embeddings: &[Array1<f64>],
        pair_of: &[usize],
    ) -> Result<(f64, Vec<Array1<f64>>)> {
        let (loss, grads) = nt_xent_impl(embeddings, pair_of, self.temperature, true)?;
        Ok((loss, grads.expect("requested")))
    }
}

/// `max(0, d(a,p) − d(a,n) + margin)` with cosine distance `d = 1 − cos`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    let d_ap = 1.0 - cosine_sim(anchor, positive)?;
    let d_an = 1.0 - cosine_sim(anchor, negative)?;
    Ok((d_ap - d_an + margin).max(0.0))
}

/// Batch triplet loss: every item is an anchor, its pair partner the
/// positive, and the most similar non-partner the negative.
#[derive(Debug, Clone, Copy)]
pub struct BatchHardTriplet {
    pub margin: f64,
}

impl BatchHardTriplet {
    pub fn loss(&self, batch: &ContrastiveBatch) -> Result<f64> {
        self.loss_and_grad(&batch.embeddings, &batch.pair_of).map(|(l, _)| l)
    }
}

impl Objective for BatchHardTriplet {
    fn loss_and_grad(
        &self,
        embeddings: &[Array1<f64>],
        pair_of: &[usize],
    ) -> Result<(f64, Vec<Array1<f64>>)> {
        validate_pairs(pair_of, embeddings.len())?;
        let n = embeddings.len();
        if n < 4 {
            return Err(Error::Domain("triplet mining needs at least two pairs".into()));
        }
        let (units, norms) = normalize(embeddings)?;
        let sim = units.dot(&units.t());
        let mut d_sim = Array2::zeros((n, n));
        let mut total = 0.0;
        for i in 0..n {
            let p = pair_of[i];
            // first index wins ties, so mining is deterministic
            let neg = (0..n)
                .filter(|&k| k != i && k != p)
                .fold(None::<usize>, |best, k| match best {
                    Some(b) if sim[[i, b]] >= sim[[i, k]] => Some(b),
                    _ => Some(k),
                })
                .expect("n >= 4");
            let hinge = sim[[i, neg]] - sim[[i, p]] + self.margin;
            if hinge > 0.0 {
                total += hinge;
                d_sim[[i, neg]] += 1.0 / n as f64;
                d_sim[[i, p]] -= 1.0 / n as f64;
            }
        }
        let grads = similarity_grad_to_embeddings(&units, &norms, &d_sim);
        Ok((total / n as f64, grads))
    }
}
