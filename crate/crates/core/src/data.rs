//! Domain types shared by every stage: token ids, vocabularies, prompt sets,
//! labelled embedding datasets, and seeded splitting.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocabulary`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Ordered set of distinct tokens; a token's id is its position.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    hash: u64,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut text = String::new();
        for t in &tokens {
            text.push_str(t);
            text.push('\n');
        }
        Self::build(tokens, fnv1a_64(text.as_bytes()))
    }

    /// Parses LF-separated text, one token per line.
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect::<Vec<_>>();
        // A trailing newline terminates the last line rather than adding an empty token.
        let tokens = match tokens.split_last() {
            Some((last, rest)) if last.is_empty() => rest.to_vec(),
            _ => tokens,
        };
        Self::build(tokens, fnv1a_64(text.as_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Format(format!("vocabulary is not UTF-8: {e}")))?;
        Self::from_text(&text)
    }

    fn build(tokens: Vec<String>, hash: u64) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (line, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Format(format!("empty token on line {}", line + 1)));
            }
            if index.insert(tok.clone(), TokenId::from(line)).is_some() {
                return Err(Error::DuplicateToken {
                    token: tok.clone(),
                    line: line + 1,
                });
            }
        }
        if tokens.len() < 2 {
            return Err(Error::VocabularySize(tokens.len()));
        }
        Ok(Self {
            tokens,
            index,
            hash,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// FNV-1a of the file bytes this vocabulary was read from.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash)
    }

    pub fn all_ids(&self) -> Vec<TokenId> {
        (0..self.len()).map(TokenId::from).collect()
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if id.index() < self.len() {
            Ok(())
        } else {
            Err(Error::TokenRange {
                id,
                size: self.len(),
            })
        }
    }

    /// Whitespace split followed by exact lookup of every piece.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|piece| {
                self.id(piece)
                    .ok_or_else(|| Error::UnknownToken(piece.to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let pieces = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or(Error::TokenRange {
                    id,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(pieces.join(" "))
    }
}

/// One token sequence per class plus a prefix shared by all classes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub class_prompts: Vec<Vec<TokenId>>,
    #[serde(default)]
    pub initial_prompt: Vec<TokenId>,
}

#[derive(Serialize, Deserialize)]
struct PromptSetFile {
    class_prompts: Vec<Vec<TokenId>>,
    initial_prompt: Vec<TokenId>,
    vocab_hash: String,
}

impl PromptSet {
    pub fn new(class_prompts: Vec<Vec<TokenId>>, initial_prompt: Vec<TokenId>) -> Self {
        Self {
            class_prompts,
            initial_prompt,
        }
    }

    /// `classes` prompts, each starting out empty.
    pub fn empty(classes: usize, initial_prompt: Vec<TokenId>) -> Self {
        Self::new(vec![Vec::new(); classes], initial_prompt)
    }

    pub fn num_classes(&self) -> usize {
        self.class_prompts.len()
    }

    /// Initial prompt followed by the prompt of class `k`.
    pub fn full_prompt(&self, k: usize) -> Vec<TokenId> {
        let mut out = self.initial_prompt.clone();
        out.extend_from_slice(&self.class_prompts[k]);
        out
    }

    pub fn max_len(&self) -> usize {
        self.class_prompts.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Checks class count, token ranges, and the per-class length cap.
    pub fn validate(
        &self,
        classes: usize,
        vocab_size: usize,
        max_len: Option<usize>,
    ) -> Result<()> {
        if self.num_classes() != classes {
            return Err(Error::param(format!(
                "prompt set has {} classes, expected {classes}",
                self.num_classes()
            )));
        }
        let all = self
            .initial_prompt
            .iter()
            .chain(self.class_prompts.iter().flatten());
        for &id in all {
            if id.index() >= vocab_size {
                return Err(Error::TokenRange {
                    id,
                    size: vocab_size,
                });
            }
        }
        if let Some(cap) = max_len {
            if let Some((k, p)) = self
                .class_prompts
                .iter()
                .enumerate()
                .find(|(_, p)| p.len() > cap)
            {
                return Err(Error::param(format!(
                    "class {k} prompt has {} tokens, cap is {cap}",
                    p.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self, vocab: &Vocabulary) -> Result<String> {
        let file = PromptSetFile {
            class_prompts: self.class_prompts.clone(),
            initial_prompt: self.initial_prompt.clone(),
            vocab_hash: vocab.hash_hex(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses prompt-set JSON, rejecting files written against another vocabulary.
    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let file: PromptSetFile = serde_json::from_str(text)?;
        if !file.vocab_hash.eq_ignore_ascii_case(&vocab.hash_hex()) {
            return Err(Error::Format(format!(
                "prompt set was written for vocabulary {}, loaded vocabulary is {}",
                file.vocab_hash,
                vocab.hash_hex()
            )));
        }
        let set = PromptSet::new(file.class_prompts, file.initial_prompt);
        set.validate(set.num_classes(), vocab.len(), None)?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        fs::write(path, self.to_json(vocab)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, vocab)
    }
}

/// Dense row-major f32 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Scales every row to unit L2 norm; zero rows are rejected.
    pub fn normalize_rows(&mut self) -> Result<()> {
        for i in 0..self.rows {
            let row = self.row_mut(i);
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateRow { row: i });
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(())
    }
}

/// Labelled image embeddings with unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    embeddings: Matrix,
    labels: Vec<u32>,
    class_names: Vec<String>,
}

impl EmbeddingDataset {
    /// Attaches labels to an embedding matrix; the class count is `class_names.len()`.
    pub fn new(embeddings: Matrix, labels: Vec<u32>, class_names: Vec<String>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::Dimension {
                expected: embeddings.rows(),
                found: labels.len(),
            });
        }
        let classes = class_names.len();
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= classes)
        {
            return Err(Error::LabelRange {
                index,
                label,
                classes,
            });
        }
        Ok(Self {
            embeddings,
            labels,
            class_names,
        })
    }

    /// Like [`EmbeddingDataset::new`] with generated names `class0`, `class1`, ...
    pub fn with_classes(embeddings: Matrix, labels: Vec<u32>, classes: usize) -> Result<Self> {
        Self::new(embeddings, labels, default_class_names(classes))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.embeddings.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Same embeddings with replacement labels.
    pub fn relabel(&self, labels: Vec<u32>) -> Result<Self> {
        Self::new(self.embeddings.clone(), labels, self.class_names.clone())
    }
}

pub fn default_class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|k| format!("class{k}")).collect()
}

/// Seeded train/test split parameters.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        check_fraction(train_fraction)?;
        Ok(Self {
            train_fraction,
            seed,
        })
    }
}

pub(crate) fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!(
            "fraction {fraction} is outside (0, 1]"
        )))
    }
}

/// `ceil(fraction * n)`, ignoring floating-point fuzz just above an integer.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let nearest = x.round();
    let count = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (count as usize).min(n)
}

/// Permutation of `0..n` drawn from a ChaCha8 stream seeded with `seed`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded permutation split: the first `ceil(fraction * n)` permuted rows train.
pub fn split_dataset(
    ds: &EmbeddingDataset,
    spec: &SplitSpec,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    check_fraction(spec.train_fraction)?;
    let perm = seeded_permutation(ds.len(), spec.seed);
    let cut = ceil_count(spec.train_fraction, ds.len());
    Ok((ds.select(&perm[..cut]), ds.select(&perm[cut..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> EmbeddingDataset {
        let rows: Vec<Vec<f32>> = (0..n).map(|i| vec![i as f32, 1.0]).collect();
        let labels = (0..n).map(|i| (i % 2) as u32).collect();
        EmbeddingDataset::with_classes(Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn vocabulary_lines_become_ids() {
        let v = Vocabulary::from_text("cat\ndog\n").unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.id("dog"), Some(TokenId(1)));
        assert_eq!(v.token(TokenId(0)), Some("cat"));
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_empty_files() {
        assert!(matches!(
            Vocabulary::from_text("cat\ncat\n"),
            Err(Error::DuplicateToken { line: 2, .. })
        ));
        assert!(matches!(
            Vocabulary::from_text(""),
            Err(Error::VocabularySize(0))
        ));
    }

    #[test]
    fn clip_sized_vocabulary_loads() {
        let text: String = (0..49408).map(|i| format!("w{i}\n")).collect();
        assert_eq!(Vocabulary::from_text(&text).unwrap().len(), 49408);
    }

    #[test]
    fn tokenize_exact_pieces() {
        let v = Vocabulary::from_text("cat\ndog\n").unwrap();
        assert_eq!(v.tokenize("cat dog").unwrap(), vec![TokenId(0), TokenId(1)]);
        assert!(v.tokenize("").unwrap().is_empty());
        match v.tokenize("cat fish") {
            Err(Error::UnknownToken(p)) => assert_eq!(p, "fish"),
            other => panic!("expected unknown token, got {other:?}"),
        }
    }

    #[test]
    fn labels_are_checked_against_class_count() {
        let m = Matrix::zeros(3, 2);
        assert!(EmbeddingDataset::with_classes(m.clone(), vec![0, 1, 0], 2).is_ok());
        assert!(matches!(
            EmbeddingDataset::with_classes(m, vec![0, 5, 0], 3),
            Err(Error::LabelRange { label: 5, .. })
        ));
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let ds = toy(10);
        let spec = SplitSpec::new(0.5, 7).unwrap();
        let (a, b) = split_dataset(&ds, &spec).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut seen: Vec<f32> = a
            .embeddings()
            .as_slice()
            .chunks(2)
            .chain(b.embeddings().as_slice().chunks(2))
            .map(|r| r[0])
            .collect();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, (0..10).map(|i| i as f32).collect::<Vec<_>>());
        assert_eq!(split_dataset(&ds, &spec).unwrap(), (a, b));
    }

    #[test]
    fn full_fraction_leaves_test_empty() {
        let (a, b) = split_dataset(&toy(4), &SplitSpec::new(1.0, 0).unwrap()).unwrap();
        assert_eq!(a.len(), 4);
        assert!(b.is_empty());
    }

    #[test]
    fn ceil_count_handles_float_fuzz() {
        assert_eq!(ceil_count(0.3, 10), 3);
        assert_eq!(ceil_count(0.09, 49408), 4447);
        assert_eq!(ceil_count(0.1, 1000), 100);
        assert_eq!(ceil_count(0.25, 3), 1);
    }

    #[test]
    fn prompt_set_json_checks_vocab_hash() {
        let v = Vocabulary::from_text("a\nb\nc\n").unwrap();
        let p = PromptSet::new(
            vec![vec![TokenId(0)], vec![TokenId(2), TokenId(1)]],
            vec![TokenId(1)],
        );
        let json = p.to_json(&v).unwrap();
        assert_eq!(PromptSet::from_json(&json, &v).unwrap(), p);
        let other = Vocabulary::from_text("a\nb\nd\n").unwrap();
        assert!(PromptSet::from_json(&json, &other).is_err());
    }
}
