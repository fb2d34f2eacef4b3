//! Text encoders and the zero-shot classifier they induce.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{EmbeddingDataset, Matrix, PromptSet, TokenId};
use crate::error::{Error, Result};
use crate::format;

/// Maps a token sequence to a unit vector of fixed dimension.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[TokenId]) -> Result<Vec<f64>>;
}

pub fn encode_text(enc: &dyn TextEncoder, tokens: &[TokenId]) -> Result<Vec<f64>> {
    enc.encode(tokens)
}

/// Stand-in text tower: normalized mean of per-token rows of a Gaussian table.
///
/// Token order inside a prompt does not matter for this encoder.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    vocab_size: usize,
    dim: usize,
    seed: u64,
    table: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab_size * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            vocab_size,
            dim,
            seed,
            table,
        }
    }

    /// Encoder over an explicit `vocab_size x dim` row-major table.
    pub fn from_table(vocab_size: usize, dim: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != vocab_size * dim {
            return Err(Error::Dimension {
                expected: vocab_size * dim,
                found: table.len(),
            });
        }
        Ok(Self {
            vocab_size,
            dim,
            seed: 0,
            table,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_row(&self, id: TokenId) -> &[f64] {
        &self.table[id.index() * self.dim..(id.index() + 1) * self.dim]
    }
}

impl TextEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut acc = vec![0.0; self.dim];
        for &t in tokens {
            if t.index() >= self.vocab_size {
                return Err(Error::TokenRange {
                    id: t,
                    size: self.vocab_size,
                });
            }
            for (a, v) in acc.iter_mut().zip(self.token_row(t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        normalize(&mut acc)?;
        Ok(acc)
    }
}

pub(crate) fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::param("embedding has zero norm"));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// Precomputed text embeddings keyed by the exact token-id sequence.
#[derive(Clone, Debug, Default)]
pub struct CachedEncoder {
    dim: usize,
    entries: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl CachedEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, key: Vec<TokenId>, mut embedding: Vec<f64>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: embedding.len(),
            });
        }
        normalize(&mut embedding)?;
        self.entries.insert(key, embedding);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads a PBEM matrix plus its sidecar index (line `i` holds the
    /// comma-separated token ids of row `i`).
    pub fn load(pbem: impl AsRef<Path>, index: impl AsRef<Path>) -> Result<Self> {
        let matrix = format::read_pbem(pbem)?;
        let text = fs::read_to_string(index)?;
        let keys = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                parse_key(line).map_err(|e| Error::Format(format!("index line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if keys.len() != matrix.rows() {
            return Err(Error::Format(format!(
                "index has {} entries, matrix has {} rows",
                keys.len(),
                matrix.rows()
            )));
        }
        let mut enc = Self::new(matrix.cols());
        for (i, key) in keys.into_iter().enumerate() {
            let row = matrix.row(i).iter().map(|&v| f64::from(v)).collect();
            enc.insert(key, row)
                .map_err(|_| Error::DegenerateRow { row: i })?;
        }
        Ok(enc)
    }

    /// Writes the cache in the layout [`CachedEncoder::load`] reads, keys sorted.
    pub fn save(&self, pbem: impl AsRef<Path>, index: impl AsRef<Path>) -> Result<()> {
        let mut keys: Vec<&Vec<TokenId>> = self.entries.keys().collect();
        keys.sort();
        let rows: Vec<Vec<f32>> = keys
            .iter()
            .map(|k| self.entries[*k].iter().map(|&v| v as f32).collect())
            .collect();
        let m = if rows.is_empty() {
            Matrix::zeros(0, self.dim)
        } else {
            Matrix::from_rows(&rows)?
        };
        format::write_pbem(pbem, &m)?;
        let index_text: String = keys
            .iter()
            .map(|k| {
                let ids: Vec<String> = k.iter().map(|t| t.0.to_string()).collect();
                ids.join(",") + "\n"
            })
            .collect();
        fs::write(index, index_text)?;
        Ok(())
    }
}

fn parse_key(line: &str) -> std::result::Result<Vec<TokenId>, String> {
    let line = line.trim();
    if line.is_empty() {
        return Ok(Vec::new());
    }
    line.split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map(TokenId)
                .map_err(|e| format!("{p:?}: {e}"))
        })
        .collect()
}

impl TextEncoder for CachedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.entries
            .get(tokens)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(tokens.iter().map(|t| t.0).collect()))
    }
}

/// One text embedding per class.
///
/// Rows are unit vectors, except that [`class_embeddings_partial`] leaves an
/// all-zero row for a class whose prompt is still empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl ClassEmbeddings {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                found: r.len(),
            });
        }
        Ok(Self { dim, rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn set_row(&mut self, k: usize, row: Vec<f64>) {
        self.rows[k] = row;
    }
}

/// Row `k` is the encoding of `initial_prompt ++ class_prompts[k]`.
pub fn class_embeddings(enc: &dyn TextEncoder, prompts: &PromptSet) -> Result<ClassEmbeddings> {
    let rows = (0..prompts.num_classes())
        .map(|k| {
            enc.encode(&prompts.full_prompt(k))
                .map_err(|e| e.in_class(k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassEmbeddings {
        dim: enc.dim(),
        rows,
    })
}

/// Like [`class_embeddings`], but a class with no tokens at all gets a zero
/// row (score 0 against every input) instead of an error. Used while a
/// search is still filling in prompts.
pub fn class_embeddings_partial(
    enc: &dyn TextEncoder,
    prompts: &PromptSet,
) -> Result<ClassEmbeddings> {
    let rows = (0..prompts.num_classes())
        .map(|k| {
            let full = prompts.full_prompt(k);
            if full.is_empty() {
                Ok(vec![0.0; enc.dim()])
            } else {
                enc.encode(&full).map_err(|e| e.in_class(k))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassEmbeddings {
        dim: enc.dim(),
        rows,
    })
}

#[inline]
pub(crate) fn dot(x: &[f32], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(&a, &b)| f64::from(a) * b).sum()
}

/// Index of the largest score; ties go to the lowest index.
#[inline]
pub(crate) fn argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, s) in scores.into_iter().enumerate() {
        if s > best_score || k == 0 {
            best = k;
            best_score = s;
        }
    }
    best
}

/// Zero-shot prediction: argmax of inner products, lowest class on ties.
pub fn classify(ce: &ClassEmbeddings, x: &[f32]) -> Result<usize> {
    if x.len() != ce.dim {
        return Err(Error::Dimension {
            expected: ce.dim,
            found: x.len(),
        });
    }
    Ok(argmax(ce.rows.iter().map(|r| dot(x, r))))
}

/// Predictions for every row, evaluated in parallel.
pub fn predict_batch(ce: &ClassEmbeddings, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
    if ds.dim() != ce.dim {
        return Err(Error::Dimension {
            expected: ce.dim,
            found: ds.dim(),
        });
    }
    Ok((0..ds.len())
        .into_par_iter()
        .map(|i| argmax(ce.rows.iter().map(|r| dot(ds.row(i), r))))
        .collect())
}

/// Fraction of rows whose prediction differs from the label.
pub fn empirical_risk(ce: &ClassEmbeddings, ds: &EmbeddingDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_batch(ce, ds)?;
    let errors = preds
        .iter()
        .zip(ds.labels())
        .filter(|(&p, &y)| p != y as usize)
        .count();
    Ok(errors as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_token_encoder() -> ToyEncoder {
        ToyEncoder::from_table(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn toy_encoder_mean_then_normalize() {
        let enc = two_token_encoder();
        assert_eq!(enc.encode(&ids(&[0])).unwrap(), vec![1.0, 0.0]);
        let v = enc.encode(&ids(&[0, 1])).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((v[0] - h).abs() < 1e-15 && (v[1] - h).abs() < 1e-15);
        assert!(matches!(enc.encode(&[]), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn toy_encoder_is_seed_deterministic_and_unit() {
        let a = ToyEncoder::new(50, 16, 3);
        let b = ToyEncoder::new(50, 16, 3);
        let p = ids(&[4, 9, 4]);
        let va = a.encode(&p).unwrap();
        assert_eq!(va, b.encode(&p).unwrap());
        let norm: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(va, a.encode(&ids(&[9, 4, 4])).unwrap());
    }

    #[test]
    fn cached_encoder_miss_is_an_error() {
        let mut enc = CachedEncoder::new(2);
        enc.insert(ids(&[1, 2]), vec![3.0, 4.0]).unwrap();
        assert_eq!(enc.encode(&ids(&[1, 2])).unwrap(), vec![0.6, 0.8]);
        assert!(matches!(
            enc.encode(&ids(&[2, 1])),
            Err(Error::MissingEmbedding(_))
        ));
    }

    #[test]
    fn class_embeddings_follow_prompts() {
        let enc = two_token_encoder();
        let p = PromptSet::new(vec![ids(&[0]), ids(&[1])], vec![]);
        let ce = class_embeddings(&enc, &p).unwrap();
        assert_eq!(ce.rows(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let swapped = PromptSet::new(vec![ids(&[1]), ids(&[0])], vec![]);
        let ce2 = class_embeddings(&enc, &swapped).unwrap();
        assert_eq!(ce2.row(0), ce.row(1));
        assert_eq!(ce2.row(1), ce.row(0));
        let same = PromptSet::new(vec![ids(&[0, 1]), ids(&[0, 1])], vec![]);
        let ce3 = class_embeddings(&enc, &same).unwrap();
        assert_eq!(ce3.row(0), ce3.row(1));
        assert_eq!(classify(&ce3, &[0.3, 0.9]).unwrap(), 0);
    }

    #[test]
    fn empty_class_prompt_is_reported_with_its_class() {
        let enc = two_token_encoder();
        let p = PromptSet::new(vec![ids(&[0]), vec![]], vec![]);
        assert!(matches!(
            class_embeddings(&enc, &p),
            Err(Error::Class { class: 1, .. })
        ));
        let partial = class_embeddings_partial(&enc, &p).unwrap();
        assert_eq!(partial.row(1), &[0.0, 0.0]);
        let with_prefix = PromptSet::new(vec![ids(&[0]), vec![]], ids(&[1]));
        assert!(class_embeddings(&enc, &with_prefix).is_ok());
    }

    #[test]
    fn classify_argmax_and_ties() {
        let ce = ClassEmbeddings::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(classify(&ce, &[0.9, 0.1]).unwrap(), 0);
        assert_eq!(classify(&ce, &[0.1, 0.9]).unwrap(), 1);
        assert_eq!(classify(&ce, &[2.7, 0.3]).unwrap(), 0);
        let tied = ClassEmbeddings::from_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(classify(&tied, &[0.5, 0.5]).unwrap(), 0);
        assert!(matches!(
            classify(&ce, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn risk_counts_misclassified_rows() {
        let ce = ClassEmbeddings::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let rows: Vec<Vec<f32>> = (0..10)
            .map(|i| {
                if i < 5 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            })
            .collect();
        let mut labels: Vec<u32> = (0..10).map(|i| u32::from(i >= 5)).collect();
        let ds =
            EmbeddingDataset::with_classes(Matrix::from_rows(&rows).unwrap(), labels.clone(), 2)
                .unwrap();
        assert_eq!(empirical_risk(&ce, &ds).unwrap(), 0.0);
        for l in labels.iter_mut().take(3) {
            *l = 1;
        }
        let noisy = ds.relabel(labels).unwrap();
        assert_eq!(empirical_risk(&ce, &noisy).unwrap(), 0.3);
        let empty = ds.select(&[]);
        assert!(matches!(
            empirical_risk(&ce, &empty),
            Err(Error::EmptyDataset)
        ));
    }
}
