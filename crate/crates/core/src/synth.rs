//! Planted-prompt synthetic worlds and dataset perturbations.
//!
//! A world draws `K` distinct true prompts, encodes them with a
//! [`ToyEncoder`], and scatters image embeddings around each class's prompt
//! embedding. Each class also gets a name token, and a text corpus built
//! from the planted prompts and the names trains an n-gram prior that
//! "knows" the world without seeing any image sample.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    ceil_count, check_fraction, seeded_permutation, EmbeddingDataset, Matrix, PromptSet, TokenId,
    Vocabulary,
};
use crate::encoder::{normalize, TextEncoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::format;
use crate::prior::{train_ngram, NGramPrior, Smoothing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub vocab_size: usize,
    /// Length of every planted prompt.
    pub prompt_len: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Scale of the isotropic Gaussian added before normalization.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 32,
            vocab_size: 64,
            prompt_len: 2,
            train_per_class: 200,
            test_per_class: 200,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::param("a synthetic world needs at least 2 classes"));
        }
        if self.dim < 1 || self.prompt_len < 1 {
            return Err(Error::param("dimension and prompt length must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::VocabularySize(self.vocab_size));
        }
        if self.train_per_class < 1 || self.test_per_class < 1 {
            return Err(Error::param("per-class sample counts must be >= 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::param(format!(
                "noise scale {} must be >= 0",
                self.noise
            )));
        }
        let distinct = multiset_count(self.vocab_size, self.prompt_len);
        if (self.classes as u128) > distinct {
            return Err(Error::InfeasibleSpec(format!(
                "{} classes need distinct prompts but only {distinct} token multisets of length {} exist over {} tokens",
                self.classes, self.prompt_len, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// `C(v + l - 1, l)`, saturating.
fn multiset_count(v: usize, l: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..l as u128 {
        c = c.saturating_mul(v as u128 + i) / (i + 1);
        if c > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    c
}

/// Everything a synthetic experiment needs.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
    pub planted: PromptSet,
    pub encoder: ToyEncoder,
    pub vocab: Vocabulary,
    /// One name token per class, used as prior context for pruning.
    pub class_name_tokens: Vec<TokenId>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds a world from `spec`; fully determined by `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let (v, l, k) = (spec.vocab_size, spec.prompt_len, spec.classes);
    let vocab = Vocabulary::from_tokens((0..v).map(|i| format!("w{i}")))?;
    let encoder = ToyEncoder::new(v, spec.dim, spec.seed);

    // Prompts that share a token multiset share an embedding under the toy
    // encoder, so distinctness is over multisets.
    let mut rng = stream(spec.seed, 1);
    let mut seen = BTreeSet::new();
    let mut planted = Vec::with_capacity(k);
    while planted.len() < k {
        let p: Vec<TokenId> = (0..l).map(|_| TokenId::from(rng.gen_range(0..v))).collect();
        let mut key = p.clone();
        key.sort_unstable();
        if seen.insert(key) {
            planted.push(p);
        }
    }
    let planted = PromptSet::new(planted, Vec::new());

    // Names come from tokens outside the planted prompts when there are
    // enough of them.
    let used: BTreeSet<TokenId> = planted.class_prompts.iter().flatten().copied().collect();
    let free: Vec<TokenId> = (0..v)
        .map(TokenId::from)
        .filter(|t| !used.contains(t))
        .collect();
    let mut rng = stream(spec.seed, 4);
    let class_name_tokens: Vec<TokenId> = if free.len() >= k {
        index::sample(&mut rng, free.len(), k)
            .into_iter()
            .map(|i| free[i])
            .collect()
    } else {
        (0..k).map(|_| TokenId::from(rng.gen_range(0..v))).collect()
    };
    let names: Vec<String> = class_name_tokens
        .iter()
        .map(|&t| vocab.token(t).unwrap_or_default().to_string())
        .collect();

    let centers = (0..k)
        .map(|c| encoder.encode(&planted.class_prompts[c]))
        .collect::<Result<Vec<_>>>()?;
    let sample = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<EmbeddingDataset> {
        let n = per_class * k;
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % k;
            let mut x: Vec<f64> = centers[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    m + spec.noise * z
                })
                .collect();
            normalize(&mut x)?;
            data.extend(x.iter().map(|&v| v as f32));
            labels.push(c as u32);
        }
        EmbeddingDataset::new(Matrix::new(n, spec.dim, data)?, labels, names.clone())
    };
    let train = sample(spec.train_per_class, &mut stream(spec.seed, 2))?;
    let test = sample(spec.test_per_class, &mut stream(spec.seed, 3))?;

    Ok(SyntheticWorld {
        spec: spec.clone(),
        train,
        test,
        planted,
        encoder,
        vocab,
        class_name_tokens,
    })
}

/// Shape of the text corpus behind a world's prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorCorpusSpec {
    /// Copies of `a, b` for every ordered pair of planted tokens (repeats
    /// included). Every planted token is then equally likely at a sentence
    /// start and after any planted token, whichever classes share it.
    pub pair_sentences: usize,
    /// Copies of `name, t` for every distinct token `t` of the class's
    /// planted prompt.
    pub name_sentences: usize,
    /// Random background sentences over the tokens outside every planted
    /// prompt (over the whole vocabulary if there are none).
    pub filler_sentences: usize,
    pub filler_len: usize,
    pub order: usize,
}

impl Default for PriorCorpusSpec {
    fn default() -> Self {
        Self {
            pair_sentences: 10,
            name_sentences: 5,
            filler_sentences: 200,
            filler_len: 8,
            order: 2,
        }
    }
}

impl SyntheticWorld {
    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    /// Class-name contexts for k-sigma pruning.
    pub fn class_contexts(&self) -> Vec<Vec<TokenId>> {
        self.class_name_tokens.iter().map(|&t| vec![t]).collect()
    }

    /// Prior corpus. Depends on the planted prompts and names, never on the
    /// sampled images.
    pub fn prior_corpus(&self, cs: &PriorCorpusSpec) -> Vec<Vec<TokenId>> {
        let used: BTreeSet<TokenId> = self
            .planted
            .class_prompts
            .iter()
            .flatten()
            .copied()
            .collect();
        let mut corpus = Vec::new();
        for &a in &used {
            for &b in &used {
                corpus.extend(std::iter::repeat_n(vec![a, b], cs.pair_sentences));
            }
        }
        for (c, p) in self.planted.class_prompts.iter().enumerate() {
            let name = self.class_name_tokens[c];
            let distinct: BTreeSet<TokenId> = p.iter().copied().collect();
            for t in distinct {
                corpus.extend(std::iter::repeat_n(vec![name, t], cs.name_sentences));
            }
        }
        let mut background: Vec<TokenId> = (0..self.spec.vocab_size)
            .map(TokenId::from)
            .filter(|t| !used.contains(t))
            .collect();
        if background.is_empty() {
            background = (0..self.spec.vocab_size).map(TokenId::from).collect();
        }
        let mut rng = stream(self.spec.seed, 5);
        for _ in 0..cs.filler_sentences {
            corpus.push(
                (0..cs.filler_len)
                    .map(|_| background[rng.gen_range(0..background.len())])
                    .collect(),
            );
        }
        corpus
    }

    /// Add-one smoothed n-gram prior over [`Self::prior_corpus`].
    pub fn prior(&self, cs: &PriorCorpusSpec) -> Result<NGramPrior> {
        train_ngram(
            &self.prior_corpus(cs),
            cs.order,
            self.spec.vocab_size,
            Smoothing::AddOne,
        )
    }

    /// Writes the world's files into `dir`: train/test embeddings and
    /// labels, vocabulary, class names, planted prompts and the generator settings.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        format::write_pbem(dir.join("train.pbem"), self.train.embeddings())?;
        format::write_labels(dir.join("train.pblb"), self.train.labels())?;
        format::write_pbem(dir.join("test.pbem"), self.test.embeddings())?;
        format::write_labels(dir.join("test.pblb"), self.test.labels())?;
        fs::write(dir.join("vocab.txt"), vocab_text(&self.vocab))?;
        fs::write(
            dir.join("classes.txt"),
            self.train.class_names().join("\n") + "\n",
        )?;
        self.planted.save(dir.join("planted.json"), &self.vocab)?;
        fs::write(
            dir.join("spec.json"),
            serde_json::to_string_pretty(&self.spec)? + "\n",
        )?;
        Ok(())
    }
}

/// The vocabulary file body: one token per line.
pub fn vocab_text(vocab: &Vocabulary) -> String {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    s
}

/// How a flipped label is redrawn.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    /// Uniform over the other `K - 1` labels, so every flip changes the label.
    #[default]
    OtherClass,
    /// Uniform over all `K` labels; at `p = 1` labels are independent of inputs.
    Uniform,
}

/// Each label is redrawn with probability `p`; embeddings are untouched.
pub fn flip_labels(
    ds: &EmbeddingDataset,
    p: f64,
    seed: u64,
    mode: FlipMode,
) -> Result<EmbeddingDataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("flip probability {p} outside [0, 1]")));
    }
    let k = ds.num_classes() as u32;
    if k < 2 {
        return Err(Error::param("label flipping needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ds
        .labels()
        .iter()
        .map(|&y| {
            let flip = rng.gen::<f64>() < p;
            let draw = match mode {
                FlipMode::OtherClass => {
                    let r = rng.gen_range(0..k - 1);
                    if r >= y {
                        r + 1
                    } else {
                        r
                    }
                }
                FlipMode::Uniform => rng.gen_range(0..k),
            };
            if flip {
                draw
            } else {
                y
            }
        })
        .collect();
    ds.relabel(labels)
}

/// The first `ceil(fraction * n)` rows of one seeded permutation, so smaller
/// fractions give prefixes of larger ones.
pub fn subsample_data(ds: &EmbeddingDataset, fraction: f64, seed: u64) -> Result<EmbeddingDataset> {
    check_fraction(fraction)?;
    let count = ceil_count(fraction, ds.len());
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(ds.select(&seeded_permutation(ds.len(), seed)[..count]))
}

/// Token-id analogue of [`subsample_data`], returned in ascending id order.
pub fn subsample_vocab(vocab_size: usize, fraction: f64, seed: u64) -> Result<Vec<TokenId>> {
    check_fraction(fraction)?;
    let count = ceil_count(fraction, vocab_size);
    if count == 0 {
        return Err(Error::VocabularySize(0));
    }
    let mut ids: Vec<TokenId> = seeded_permutation(vocab_size, seed)[..count]
        .iter()
        .map(|&i| TokenId::from(i))
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{class_embeddings, empirical_risk};

    #[test]
    fn noiseless_world_is_fit_by_planted_prompts() {
        let spec = SyntheticSpec {
            noise: 0.0,
            train_per_class: 20,
            ..Default::default()
        };
        let w = generate_synthetic(&spec).unwrap();
        let ce = class_embeddings(&w.encoder, &w.planted).unwrap();
        assert_eq!(empirical_risk(&ce, &w.train).unwrap(), 0.0);
        assert_eq!(empirical_risk(&ce, &w.test).unwrap(), 0.0);
        for i in 0..w.train.len() {
            let c = w.train.labels()[i] as usize;
            for (a, b) in w.train.row(i).iter().zip(ce.row(c)) {
                assert!((f64::from(*a) - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn default_world_planted_risk_fixture() {
        let w = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let ce = class_embeddings(&w.encoder, &w.planted).unwrap();
        let r = empirical_risk(&ce, &w.train).unwrap();
        assert!(r <= 0.02, "planted train risk {r}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let b = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(
            a.train.embeddings().as_slice(),
            b.train.embeddings().as_slice()
        );
        assert_eq!(a.test.labels(), b.test.labels());
        assert_eq!(a.planted, b.planted);
    }

    #[test]
    fn too_many_classes_is_infeasible() {
        let spec = SyntheticSpec {
            classes: 5,
            vocab_size: 2,
            prompt_len: 2,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&spec),
            Err(Error::InfeasibleSpec(_))
        ));
        assert_eq!(multiset_count(64, 2), 2080);
        assert_eq!(multiset_count(2, 2), 3);
    }

    #[test]
    fn flip_examples() {
        let w = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let same = flip_labels(&w.train, 0.0, 1, FlipMode::OtherClass).unwrap();
        assert_eq!(same.labels(), w.train.labels());
        let all = flip_labels(&w.train, 1.0, 1, FlipMode::OtherClass).unwrap();
        assert!(all
            .labels()
            .iter()
            .zip(w.train.labels())
            .all(|(a, b)| a != b));
        assert_eq!(all.embeddings().as_slice(), w.train.embeddings().as_slice());
    }

    #[test]
    fn flip_rate_concentrates() {
        let rows = vec![vec![1.0f32]; 10000];
        let labels = (0..10000).map(|i| i % 3).collect();
        let ds =
            EmbeddingDataset::with_classes(Matrix::from_rows(&rows).unwrap(), labels, 3).unwrap();
        let f = flip_labels(&ds, 0.5, 7, FlipMode::OtherClass).unwrap();
        let changed = f
            .labels()
            .iter()
            .zip(ds.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert!((changed as f64 / 10000.0 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn subsample_counts_and_prefixes() {
        let rows: Vec<Vec<f32>> = (0..1000).map(|i| vec![i as f32]).collect();
        let ds =
            EmbeddingDataset::with_classes(Matrix::from_rows(&rows).unwrap(), vec![0; 1000], 1)
                .unwrap();
        assert_eq!(subsample_data(&ds, 0.1, 3).unwrap().len(), 100);
        let small = subsample_data(&ds, 0.2, 3).unwrap();
        let big = subsample_data(&ds, 0.7, 3).unwrap();
        assert_eq!(
            small.embeddings().as_slice(),
            &big.embeddings().as_slice()[..200]
        );
        let mut full: Vec<f32> = subsample_data(&ds, 1.0, 3)
            .unwrap()
            .embeddings()
            .as_slice()
            .to_vec();
        full.sort_by(f32::total_cmp);
        assert_eq!(full, ds.embeddings().as_slice());
        assert!(subsample_data(&ds, 0.0, 3).is_err());

        assert_eq!(subsample_vocab(49408, 0.09, 1).unwrap().len(), 4447);
        assert_eq!(
            subsample_vocab(10, 1.0, 1).unwrap(),
            (0..10).map(TokenId::from).collect::<Vec<_>>()
        );
        assert_eq!(
            subsample_vocab(500, 0.3, 9).unwrap(),
            subsample_vocab(500, 0.3, 9).unwrap()
        );
    }

    #[test]
    fn prior_prefers_planted_tokens() {
        use crate::prior::{point_mass_kl, KlPolicy};
        let w = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let p = w.prior(&PriorCorpusSpec::default()).unwrap();
        let planted = point_mass_kl(&p, &w.planted, KlPolicy::default()).unwrap();
        let other = PromptSet::new(vec![vec![TokenId(0), TokenId(1)]; 4], Vec::new());
        assert!(planted < point_mass_kl(&p, &other, KlPolicy::default()).unwrap());
    }
}
