//! Linear-probe baseline on frozen embeddings and its Gaussian PAC-Bayes
//! bound, minimized over a grid of posterior/prior scales.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{mcallester_bound, BoundMethod, BoundReport, Complexity, DEFAULT_DELTA};
use crate::data::{fnv1a_64, EmbeddingDataset, Matrix};
use crate::encoder::argmax;
use crate::error::{Error, Result};
use crate::format;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Standard deviation of the normal initialization.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 64,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

/// Multinomial logistic weights, flattened as `classes x dim` weights
/// followed by `classes` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeWeights {
    pub dim: usize,
    pub classes: usize,
    pub w: Vec<f64>,
    pub w0: Vec<f64>,
    pub seed: u64,
    pub init_scale: f64,
}

fn init_weights(classes: usize, dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes * (dim + 1))
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect()
}

impl ProbeWeights {
    fn logits(&self, x: &[f32]) -> Vec<f64> {
        let (weights, bias) = self.w.split_at(self.classes * self.dim);
        (0..self.classes)
            .map(|k| {
                let wk = &weights[k * self.dim..(k + 1) * self.dim];
                bias[k]
                    + x.iter()
                        .zip(wk)
                        .map(|(&a, &b)| f64::from(a) * b)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(self.logits(x))
    }

    pub fn distance_sq(&self) -> f64 {
        self.w
            .iter()
            .zip(&self.w0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Writes `w` as a `classes x (dim + 1)` PBEM matrix (bias last) and a
    /// JSON sidecar describing how to rebuild `w0`.
    pub fn save(&self, pbem: impl AsRef<Path>, meta: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<Vec<f32>> = (0..self.classes)
            .map(|k| {
                let mut r: Vec<f32> = self.w[k * self.dim..(k + 1) * self.dim]
                    .iter()
                    .map(|&v| v as f32)
                    .collect();
                r.push(self.w[self.classes * self.dim + k] as f32);
                r
            })
            .collect();
        format::write_pbem(pbem, &Matrix::from_rows(&rows)?)?;
        let m = ProbeMetadata {
            classes: self.classes,
            dim: self.dim,
            seed: self.seed,
            init_scale: self.init_scale,
            w0_fnv1a: format!("{:016x}", hash_weights(&self.w0)),
        };
        fs::write(meta, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    pub fn load(pbem: impl AsRef<Path>, meta: impl AsRef<Path>) -> Result<Self> {
        let m: ProbeMetadata = serde_json::from_str(&fs::read_to_string(meta)?)?;
        let mat = format::read_pbem(pbem)?;
        if mat.rows() != m.classes || mat.cols() != m.dim + 1 {
            return Err(Error::Format(format!(
                "probe matrix is {}x{}, metadata says {}x{}",
                mat.rows(),
                mat.cols(),
                m.classes,
                m.dim + 1
            )));
        }
        let mut w = vec![0.0; m.classes * (m.dim + 1)];
        for k in 0..m.classes {
            let row = mat.row(k);
            for j in 0..m.dim {
                w[k * m.dim + j] = f64::from(row[j]);
            }
            w[m.classes * m.dim + k] = f64::from(row[m.dim]);
        }
        let w0 = init_weights(m.classes, m.dim, m.init_scale, m.seed);
        if format!("{:016x}", hash_weights(&w0)) != m.w0_fnv1a {
            return Err(Error::Format("initialization hash mismatch".into()));
        }
        Ok(Self {
            dim: m.dim,
            classes: m.classes,
            w,
            w0,
            seed: m.seed,
            init_scale: m.init_scale,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeMetadata {
    classes: usize,
    dim: usize,
    seed: u64,
    init_scale: f64,
    w0_fnv1a: String,
}

fn hash_weights(w: &[f64]) -> u64 {
    let bytes: Vec<u8> = w.iter().flat_map(|v| v.to_le_bytes()).collect();
    fnv1a_64(&bytes)
}

/// Mini-batch gradient descent on mean softmax cross-entropy.
pub fn train_probe(train: &EmbeddingDataset, cfg: &ProbeTrainConfig) -> Result<ProbeWeights> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch size must be >= 1"));
    }
    if !(cfg.learning_rate >= 0.0) || !(cfg.init_scale >= 0.0) {
        return Err(Error::param("learning rate and init scale must be >= 0"));
    }
    let (dim, classes) = (train.dim(), train.num_classes());
    let w0 = init_weights(classes, dim, cfg.init_scale, cfg.seed);
    let mut pw = ProbeWeights {
        dim,
        classes,
        w: w0.clone(),
        w0,
        seed: cfg.seed,
        init_scale: cfg.init_scale,
    };
    // Batch order uses its own stream so that it does not shift with the
    // initialization size.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; pw.w.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = train.row(i);
                let logits = pw.logits(x);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                let y = train.labels()[i] as usize;
                for k in 0..classes {
                    let err = exp[k] / z - if k == y { 1.0 } else { 0.0 };
                    let gk = &mut grad[k * dim..(k + 1) * dim];
                    for (g, &xv) in gk.iter_mut().zip(x) {
                        *g += err * f64::from(xv);
                    }
                    grad[classes * dim + k] += err;
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (w, g) in pw.w.iter_mut().zip(&grad) {
                *w -= step * g;
            }
        }
    }
    Ok(pw)
}

/// Deterministic 0-1 risk of the probe's own weights.
pub fn probe_risk(pw: &ProbeWeights, ds: &EmbeddingDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.dim() != pw.dim {
        return Err(Error::Dimension {
            expected: pw.dim,
            found: ds.dim(),
        });
    }
    let errors = (0..ds.len())
        .into_par_iter()
        .filter(|&i| pw.predict(ds.row(i)) != ds.labels()[i] as usize)
        .count();
    Ok(errors as f64 / ds.len() as f64)
}

/// KL between `N(w, sigma^2 I)` and `N(w0, sigma^2 I)`.
pub fn gaussian_kl(w: &[f64], w0: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("sigma must be > 0, got {sigma}")));
    }
    if w.len() != w0.len() {
        return Err(Error::Dimension {
            expected: w0.len(),
            found: w.len(),
        });
    }
    let d2: f64 = w.iter().zip(w0).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(d2 / (2.0 * sigma * sigma))
}

/// Evenly spaced, endpoints included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaGrid {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl Default for SigmaGrid {
    fn default() -> Self {
        Self {
            start: 0.1,
            end: 1.0,
            count: 20000,
        }
    }
}

impl SigmaGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.start > 0.0 && self.end > self.start) || self.count < 2 {
            return Err(Error::param(
                "sigma grid needs 0 < start < end and at least 2 points",
            ));
        }
        let span = self.end - self.start;
        let last = (self.count - 1) as f64;
        Ok((0..self.count)
            .map(|i| {
                if i + 1 == self.count {
                    self.end
                } else {
                    self.start + span * i as f64 / last
                }
            })
            .collect())
    }
}

/// How the empirical-risk term of the probe bound is estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeRiskMode {
    /// Risk of the posterior mean `w`, the same for every sigma.
    Deterministic,
    /// Average risk of `samples` draws from `N(w, sigma^2 I)`.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeBoundConfig {
    pub delta: f64,
    pub sigma_grid: SigmaGrid,
    pub risk_mode: ProbeRiskMode,
}

impl Default for ProbeBoundConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            sigma_grid: SigmaGrid::default(),
            risk_mode: ProbeRiskMode::Deterministic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeBound {
    pub sigma: f64,
    pub report: BoundReport,
    pub risk_mode: ProbeRiskMode,
}

fn sampled_risk(
    pw: &ProbeWeights,
    ds: &EmbeddingDataset,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples.max(1) {
        let mut draw = pw.clone();
        draw.w.iter_mut().for_each(|w| *w += noise.sample(&mut rng));
        total += probe_risk(&draw, ds)?;
    }
    Ok(total / samples.max(1) as f64)
}

/// McAllester bound for every grid sigma; returns the smallest (lowest
/// sigma on ties).
pub fn probe_pac_bayes_bound(
    pw: &ProbeWeights,
    train: &EmbeddingDataset,
    cfg: &ProbeBoundConfig,
) -> Result<ProbeBound> {
    let sigmas = cfg.sigma_grid.values()?;
    let n = train.len();
    let det = probe_risk(pw, train)?;
    let bounds = sigmas
        .par_iter()
        .map(|&s| {
            let r = match cfg.risk_mode {
                ProbeRiskMode::Deterministic => det,
                ProbeRiskMode::MonteCarlo { samples, seed } => {
                    sampled_risk(pw, train, s, samples, seed)?
                }
            };
            let kl = gaussian_kl(&pw.w, &pw.w0, s)?;
            Ok((r, kl, mcallester_bound(r, kl, n, cfg.delta)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, b) in bounds.iter().enumerate() {
        if b.2 < bounds[best].2 {
            best = i;
        }
    }
    let (r, kl, bound) = bounds[best];
    Ok(ProbeBound {
        sigma: sigmas[best],
        report: BoundReport {
            empirical_risk: r,
            n,
            delta: cfg.delta,
            complexity: Complexity::Kl(kl),
            bound,
            vacuous: bound >= 1.0,
            method: BoundMethod::ProbeGaussianPacBayes,
        },
        risk_mode: cfg.risk_mode.clone(),
    })
}
