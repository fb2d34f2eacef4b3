//! Seeded experiment sweeps over search, bounds and perturbations.
//!
//! Every experiment expands into cells (one search plus one evaluation).
//! Cells run concurrently, each from its own derived seed, and rows are
//! merged in cell order so a given master seed always yields the same
//! report bytes.

pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{
    emit_report, format_g6, manifest_path, parse_report, report_csv, ReportRow, RunManifest,
    REPORT_HEADER,
};

use crate::bounds::{evaluate_prompts_restricted, PromptEvaluation, DEFAULT_DELTA};
use crate::data::{default_class_names, EmbeddingDataset, TokenId, Vocabulary};
use crate::encoder::{CachedEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::format;
use crate::prior::{
    prune_vocab_ksigma, train_ngram, KlPolicy, OracleBridgePrior, PriorModel, Smoothing,
    UniformPrior,
};
use crate::probe::{
    gaussian_kl, probe_pac_bayes_bound, probe_risk, train_probe, ProbeBoundConfig, ProbeTrainConfig,
};
use crate::search::{sequential_search, CandidatePolicy, Criterion, SearchConfig, SearchOutcome};
use crate::synth::{
    flip_labels, generate_synthetic, subsample_data, subsample_vocab, FlipMode, PriorCorpusSpec,
    SyntheticSpec,
};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Grid,
    LabelFlip,
    DataSubsample,
    VocabSubsample,
    LengthSweep,
    BoundValidity,
    SrmCompare,
    PruneCompare,
    ProbeCompare,
}

impl ExperimentKind {
    pub fn id(self) -> &'static str {
        match self {
            Self::Grid => "grid",
            Self::LabelFlip => "label_flip",
            Self::DataSubsample => "data_subsample",
            Self::VocabSubsample => "vocab_subsample",
            Self::LengthSweep => "length_sweep",
            Self::BoundValidity => "bound_validity",
            Self::SrmCompare => "srm_compare",
            Self::PruneCompare => "prune_compare",
            Self::ProbeCompare => "probe_compare",
        }
    }
}

/// Precomputed data on disk. Text embeddings come from a cached-encoder
/// matrix and its token-sequence index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileSource {
    pub train_embeddings: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default)]
    pub test_embeddings: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    pub vocab: PathBuf,
    /// One class name per line, tokenized with `vocab`.
    #[serde(default)]
    pub class_names: Option<PathBuf>,
    pub text_embeddings: PathBuf,
    pub text_index: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A fresh world per trial, seeded from the trial seed.
    Synthetic {
        spec: SyntheticSpec,
    },
    Files(FileSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    Uniform,
    /// N-gram over a synthetic world's own text corpus.
    World {
        #[serde(default)]
        corpus: PriorCorpusSpec,
    },
    /// Add-one n-gram over a whitespace-tokenized corpus, one sentence per line.
    NGram {
        corpus: PathBuf,
        order: usize,
    },
    /// External JSON-lines oracle started as a child process.
    Oracle {
        command: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "one")]
        temperature: f64,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    #[serde(default)]
    pub train: ProbeTrainConfig,
    #[serde(default)]
    pub bound: ProbeBoundConfig,
}

/// One experiment. Unset fields take the defaults of [`ExperimentConfig::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub source: DataSource,
    /// The search seed is replaced by each cell's derived seed.
    pub search: SearchConfig,
    pub prior: PriorConfig,
    pub trials: usize,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub delta: f64,
    pub kl_policy: KlPolicy,
    /// Search lengths of grid and length sweeps.
    pub lengths: Vec<usize>,
    /// Data or vocabulary fractions.
    pub fractions: Vec<f64>,
    pub flip_probs: Vec<f64>,
    pub flip_mode: FlipMode,
    pub betas: Vec<f64>,
    pub ks: Vec<f64>,
    pub probe: ProbeSettings,
    /// Fresh test rows per training row in validity trials.
    pub test_multiplier: usize,
    /// Record wall time per cell. Off by default so reports reproduce
    /// byte for byte.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new(ExperimentKind::Grid)
    }
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            source: DataSource::Synthetic {
                spec: SyntheticSpec::default(),
            },
            search: SearchConfig::greedy(2, 0),
            prior: PriorConfig::World {
                corpus: PriorCorpusSpec::default(),
            },
            trials: 1,
            output_dir: None,
            seed: 0,
            delta: DEFAULT_DELTA,
            kl_policy: KlPolicy::default(),
            lengths: (1..=10).collect(),
            fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
            flip_probs: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            flip_mode: FlipMode::OtherClass,
            betas: vec![0.0, 0.5, 1.0, 2.0],
            ks: vec![1.0, 2.0, 3.0],
            probe: ProbeSettings::default(),
            test_multiplier: 20,
            timing: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::param(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::param(msg.to_string()));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        self.search.validate()?;
        let synthetic = matches!(self.source, DataSource::Synthetic { .. });
        if let DataSource::Synthetic { spec } = &self.source {
            spec.validate()?;
        }
        if matches!(self.prior, PriorConfig::World { .. }) && !synthetic {
            return bad("the world prior needs a synthetic source");
        }
        if let PriorConfig::Oracle { command, .. } = &self.prior {
            if command.is_empty() {
                return bad("oracle command is empty");
            }
        }
        if self.lengths.iter().any(|&l| l < 1) {
            return bad("lengths must be >= 1");
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("fractions must lie in (0, 1]");
        }
        if self.flip_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        if self.betas.iter().any(|&b| !(b >= 0.0)) {
            return bad("betas must be >= 0");
        }
        if self.ks.iter().any(|&k| !(k > 0.0)) {
            return bad("k values must be > 0");
        }
        let needs = |empty: bool, what: &str| {
            if empty {
                Err(Error::param(format!("{} needs {what}", self.kind.id())))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ExperimentKind::Grid => {
                needs(self.lengths.is_empty(), "lengths")?;
                needs(self.fractions.is_empty(), "fractions")?;
            }
            ExperimentKind::LengthSweep => needs(self.lengths.is_empty(), "lengths")?,
            ExperimentKind::DataSubsample | ExperimentKind::VocabSubsample => {
                needs(self.fractions.is_empty(), "fractions")?
            }
            ExperimentKind::LabelFlip => needs(self.flip_probs.is_empty(), "flip_probs")?,
            ExperimentKind::SrmCompare => needs(self.betas.is_empty(), "betas")?,
            ExperimentKind::PruneCompare => needs(self.ks.is_empty(), "ks")?,
            ExperimentKind::BoundValidity => {
                if !synthetic {
                    return bad("bound_validity needs a synthetic source");
                }
                if self.test_multiplier < 1 {
                    return bad("test_multiplier must be >= 1");
                }
            }
            ExperimentKind::ProbeCompare => {}
        }
        Ok(())
    }
}

/// Data, encoder and prior for one trial.
pub struct Setup {
    pub train: EmbeddingDataset,
    pub test: Option<EmbeddingDataset>,
    pub encoder: Box<dyn TextEncoder>,
    pub prior: Box<dyn PriorModel>,
    pub vocab: Vocabulary,
    /// Per-class prior contexts (class-name tokens) for k-sigma pruning.
    pub class_contexts: Vec<Vec<TokenId>>,
}

impl Setup {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn load_split(emb: &Path, labels: &Path, names: &[String]) -> Result<EmbeddingDataset> {
    EmbeddingDataset::new(
        format::load_embeddings(emb)?,
        format::load_labels(labels)?,
        names.to_vec(),
    )
}

fn build_prior(
    cfg: &PriorConfig,
    vocab: &Vocabulary,
    world_prior: Option<Box<dyn PriorModel>>,
) -> Result<Box<dyn PriorModel>> {
    Ok(match cfg {
        PriorConfig::Uniform => Box::new(UniformPrior::new(vocab.len())?),
        PriorConfig::World { .. } => {
            world_prior.ok_or_else(|| Error::param("the world prior needs a synthetic source"))?
        }
        PriorConfig::NGram { corpus, order } => {
            let sentences = read_lines(corpus)?
                .iter()
                .map(|l| vocab.tokenize(l))
                .collect::<Result<Vec<_>>>()?;
            Box::new(train_ngram(
                &sentences,
                *order,
                vocab.len(),
                Smoothing::AddOne,
            )?)
        }
        PriorConfig::Oracle {
            command,
            timeout_ms,
            temperature,
        } => {
            let mut cmd = Command::new(&command[0]);
            cmd.args(&command[1..]);
            Box::new(
                OracleBridgePrior::spawn(cmd, vocab.len(), Duration::from_millis(*timeout_ms))?
                    .with_temperature(*temperature)?,
            )
        }
    })
}

/// Materializes the data source for one trial seed.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    match &cfg.source {
        DataSource::Synthetic { spec } => {
            let mut spec = spec.clone();
            spec.seed = seed;
            if cfg.kind == ExperimentKind::BoundValidity {
                spec.test_per_class = spec.train_per_class * cfg.test_multiplier;
            }
            let world = generate_synthetic(&spec)?;
            let world_prior: Option<Box<dyn PriorModel>> = match &cfg.prior {
                PriorConfig::World { corpus } => Some(Box::new(world.prior(corpus)?)),
                _ => None,
            };
            let prior = build_prior(&cfg.prior, &world.vocab, world_prior)?;
            Ok(Setup {
                class_contexts: world.class_contexts(),
                train: world.train,
                test: Some(world.test),
                encoder: Box::new(world.encoder),
                prior,
                vocab: world.vocab,
            })
        }
        DataSource::Files(f) => {
            let vocab = Vocabulary::load(&f.vocab)?;
            let labels = format::load_labels(&f.train_labels)?;
            let names = match &f.class_names {
                Some(p) => read_lines(p)?,
                None => default_class_names(labels.iter().max().map_or(0, |&m| m as usize + 1)),
            };
            let train = EmbeddingDataset::new(
                format::load_embeddings(&f.train_embeddings)?,
                labels,
                names.clone(),
            )?;
            let test = match (&f.test_embeddings, &f.test_labels) {
                (Some(e), Some(l)) => Some(load_split(e, l, &names)?),
                (None, None) => None,
                _ => {
                    return Err(Error::param(
                        "test embeddings and labels must be given together",
                    ))
                }
            };
            let class_contexts = if f.class_names.is_some() {
                names
                    .iter()
                    .map(|n| vocab.tokenize(n))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let encoder = CachedEncoder::load(&f.text_embeddings, &f.text_index)?;
            let prior = build_prior(&cfg.prior, &vocab, None)?;
            if prior.vocab_size() != vocab.len() {
                return Err(Error::Dimension {
                    expected: vocab.len(),
                    found: prior.vocab_size(),
                });
            }
            Ok(Setup {
                train,
                test,
                encoder: Box::new(encoder),
                prior,
                vocab,
                class_contexts,
            })
        }
    }
}

/// Seed of cell `index` under `master`.
pub fn derive_seed(master: u64, index: usize) -> u64 {
    master.wrapping_add(index as u64)
}

/// Rows and run notes of one experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExperimentOutput {
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
    pub extra: serde_json::Value,
}

const RESTRICTED_UC_NOTE: &str = "uc_bound counts prompts over the restricted candidate set; it is a valid certificate only when that set was chosen without the training data";
const ORACLE_NOTE: &str = "kl comes from the external oracle, scored on the detokenized prompt string under the oracle's own tokenizer";

struct Cell<'a> {
    cfg: &'a ExperimentConfig,
    setup: &'a Setup,
    experiment: &'a str,
    seed: u64,
    frac: f64,
}

impl Cell<'_> {
    /// Searches on `train` and evaluates the result; `uc_vocab` overrides
    /// the UC candidate count.
    fn run(
        &self,
        search: &SearchConfig,
        train: &EmbeddingDataset,
        uc_vocab: Option<usize>,
    ) -> Result<(ReportRow, SearchOutcome)> {
        let start = Instant::now();
        let mut search = search.clone();
        search.seed = self.seed;
        let s = self.setup;
        let prior = s.prior.as_ref();
        let out = sequential_search(
            &search,
            train,
            s.encoder.as_ref(),
            s.vocab_size(),
            Some(prior),
        )?;
        let eval = evaluate_prompts_restricted(
            &out.prompts,
            train,
            s.test.as_ref(),
            s.encoder.as_ref(),
            prior,
            self.cfg.kl_policy,
            self.cfg.delta,
            uc_vocab.unwrap_or(s.vocab_size()),
        )?;
        let row = self.row(search.length, &eval, start);
        Ok((row, out))
    }

    fn row(&self, l: usize, e: &PromptEvaluation, start: Instant) -> ReportRow {
        ReportRow {
            experiment: self.experiment.to_string(),
            seed: self.seed,
            l,
            frac: self.frac,
            train_err: e.train_risk,
            test_err: e.test_risk,
            kl: e.kl,
            uc_bound: Some(e.uc.bound),
            pb_bound: e.pac_bayes.bound,
            uc_vacuous: e.uc.vacuous,
            pb_vacuous: e.pac_bayes.vacuous,
            wall_time_ms: self.elapsed(start),
        }
    }

    fn elapsed(&self, start: Instant) -> u64 {
        if self.cfg.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

fn base_notes(cfg: &ExperimentConfig) -> Vec<String> {
    let mut notes = Vec::new();
    if matches!(cfg.prior, PriorConfig::Oracle { .. }) {
        notes.push(ORACLE_NOTE.to_string());
    }
    notes
}

/// Prepares one setup per trial (trial seed = master + trial) and runs
/// `per_trial` on each, concatenating rows in trial order.
fn over_trials<F>(cfg: &ExperimentConfig, per_trial: F) -> Result<Vec<ReportRow>>
where
    F: Fn(&Setup, u64) -> Result<Vec<ReportRow>> + Sync,
{
    let chunks = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = derive_seed(cfg.seed, t);
            let setup = prepare(cfg, seed)?;
            per_trial(&setup, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// One row per `(l, s)` cell: subsample the training data to fraction `s`
/// (one nested permutation per master seed), search to length `l`, and
/// certify with `n` the subsample size. Cells are `l`-major.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let setup = prepare(cfg, cfg.seed)?;
    let cells: Vec<(usize, f64)> = cfg
        .lengths
        .iter()
        .flat_map(|&l| cfg.fractions.iter().map(move |&s| (l, s)))
        .collect();
    let rows = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(l, s))| {
            let train = subsample_data(&setup.train, s, cfg.seed)?;
            let cell = Cell {
                cfg,
                setup: &setup,
                experiment: cfg.kind.id(),
                seed: derive_seed(cfg.seed, i),
                frac: s,
            };
            let search = SearchConfig {
                length: l,
                ..cfg.search.clone()
            };
            Ok(cell.run(&search, &train, None)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutput {
        rows,
        notes: base_notes(cfg),
        extra: serde_json::Value::Null,
    })
}

/// Search lengths on the full training set; `frac` is 1.
pub fn run_length_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut c = cfg.clone();
    c.fractions = vec![1.0];
    let mut out = run_grid(&c)?;
    for r in &mut out.rows {
        r.experiment = cfg.kind.id().to_string();
    }
    Ok(out)
}

/// Per trial and flip probability `p`: flip training labels (nested across
/// `p` for a fixed trial), search, and report errors against the clean
/// test labels.
pub fn run_label_flip_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let rows = over_trials(cfg, |setup, seed| {
        cfg.flip_probs
            .iter()
            .map(|&p| {
                let train = flip_labels(&setup.train, p, seed, cfg.flip_mode)?;
                let cell = Cell {
                    cfg,
                    setup,
                    experiment: cfg.kind.id(),
                    seed,
                    frac: p,
                };
                Ok(cell.run(&cfg.search, &train, None)?.0)
            })
            .collect()
    })?;
    Ok(ExperimentOutput {
        rows,
        notes: base_notes(cfg),
        extra: serde_json::Value::Null,
    })
}

/// Per trial and fraction: search on a nested data subsample.
pub fn run_data_subsample_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let rows = over_trials(cfg, |setup, seed| {
        cfg.fractions
            .iter()
            .map(|&f| {
                let train = subsample_data(&setup.train, f, seed)?;
                let cell = Cell {
                    cfg,
                    setup,
                    experiment: cfg.kind.id(),
                    seed,
                    frac: f,
                };
                Ok(cell.run(&cfg.search, &train, None)?.0)
            })
            .collect()
    })?;
    Ok(ExperimentOutput {
        rows,
        notes: base_notes(cfg),
        extra: serde_json::Value::Null,
    })
}

/// Per trial and fraction: search over a nested random subset of the
/// vocabulary. The UC term counts only the subset.
pub fn run_vocab_subsample_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let rows = over_trials(cfg, |setup, seed| {
        cfg.fractions
            .iter()
            .map(|&f| {
                let tokens = subsample_vocab(setup.vocab_size(), f, seed)?;
                let size = tokens.len();
                let search = cfg
                    .search
                    .clone()
                    .with_candidates(CandidatePolicy::FixedSet { tokens });
                let cell = Cell {
                    cfg,
                    setup,
                    experiment: cfg.kind.id(),
                    seed,
                    frac: f,
                };
                Ok(cell.run(&search, &setup.train, Some(size))?.0)
            })
            .collect()
    })?;
    let mut notes = base_notes(cfg);
    notes.push(RESTRICTED_UC_NOTE.to_string());
    Ok(ExperimentOutput {
        rows,
        notes,
        extra: serde_json::Value::Null,
    })
}

/// Independent worlds with test sets `test_multiplier` times the training
/// size; a violation is a test error above the PAC-Bayes bound.
pub fn run_bound_validity(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let rows = over_trials(cfg, |setup, seed| {
        let cell = Cell {
            cfg,
            setup,
            experiment: cfg.kind.id(),
            seed,
            frac: 1.0,
        };
        Ok(vec![cell.run(&cfg.search, &setup.train, None)?.0])
    })?;
    let violations = count_violations(&rows);
    Ok(ExperimentOutput {
        rows,
        notes: base_notes(cfg),
        extra: serde_json::json!({ "violations": violations, "trials": cfg.trials, "delta": cfg.delta }),
    })
}

/// Rows whose test error exceeds their PAC-Bayes bound.
pub fn count_violations(rows: &[ReportRow]) -> usize {
    rows.iter()
        .filter(|r| r.test_err.is_some_and(|t| t > r.pb_bound))
        .count()
}

/// Per trial, one search per beta (`beta = 0` is plain greedy search) on
/// the same data and class orders.
pub fn run_srm_compare(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let rows = over_trials(cfg, |setup, seed| {
        cfg.betas
            .iter()
            .map(|&beta| {
                let search = SearchConfig {
                    criterion: if beta == 0.0 {
                        Criterion::Greedy
                    } else {
                        Criterion::Regularized { beta }
                    },
                    ..cfg.search.clone()
                };
                let cell = Cell {
                    cfg,
                    setup,
                    experiment: cfg.kind.id(),
                    seed,
                    frac: beta,
                };
                Ok(cell.run(&search, &setup.train, None)?.0)
            })
            .collect()
    })?;
    Ok(ExperimentOutput {
        rows,
        notes: base_notes(cfg),
        extra: serde_json::Value::Null,
    })
}

/// Per trial: a full-vocabulary search (`frac = inf`) and one search per
/// `k` restricted to the k-sigma pruned vocabulary of the class names.
/// Candidate-set sizes go to `extra`.
pub fn run_prune_compare(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let sizes = std::sync::Mutex::new(Vec::new());
    let rows = over_trials(cfg, |setup, seed| {
        if setup.class_contexts.is_empty() {
            return Err(Error::param("pruning needs class names"));
        }
        let full = Cell {
            cfg,
            setup,
            experiment: cfg.kind.id(),
            seed,
            frac: f64::INFINITY,
        };
        let mut rows = vec![full.run(&cfg.search, &setup.train, None)?.0];
        for &k in &cfg.ks {
            let tokens = prune_vocab_ksigma(setup.prior.as_ref(), &setup.class_contexts, k)?;
            let size = tokens.len();
            sizes
                .lock()
                .expect("size log")
                .push(serde_json::json!({ "seed": seed, "k": k, "candidates": size }));
            let search = cfg
                .search
                .clone()
                .with_candidates(CandidatePolicy::FixedSet { tokens });
            let cell = Cell { frac: k, ..full };
            rows.push(cell.run(&search, &setup.train, Some(size))?.0);
        }
        Ok(rows)
    })?;
    let mut sizes = sizes.into_inner().expect("size log");
    sizes.sort_by_key(|v| (v["seed"].as_u64(), v["k"].as_f64().map(f64::to_bits)));
    let mut notes = base_notes(cfg);
    notes.push(RESTRICTED_UC_NOTE.to_string());
    Ok(ExperimentOutput {
        rows,
        notes,
        extra: serde_json::json!({ "candidate_sets": sizes }),
    })
}

/// Per trial: the searched prompt (`probe_compare/prompt`) next to a linear
/// probe with its Gaussian PAC-Bayes bound (`probe_compare/probe`, `frac`
/// holds the chosen sigma, no UC bound).
pub fn run_probe_compare(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let rows = over_trials(cfg, |setup, seed| {
        let cell = Cell {
            cfg,
            setup,
            experiment: "probe_compare/prompt",
            seed,
            frac: 1.0,
        };
        let prompt = cell.run(&cfg.search, &setup.train, None)?.0;
        let start = Instant::now();
        let train_cfg = ProbeTrainConfig {
            seed,
            ..cfg.probe.train.clone()
        };
        let pw = train_probe(&setup.train, &train_cfg)?;
        let bound_cfg = ProbeBoundConfig {
            delta: cfg.delta,
            ..cfg.probe.bound.clone()
        };
        let b = probe_pac_bayes_bound(&pw, &setup.train, &bound_cfg)?;
        let test_err = setup
            .test
            .as_ref()
            .map(|t| probe_risk(&pw, t))
            .transpose()?;
        let probe = ReportRow {
            experiment: "probe_compare/probe".into(),
            seed,
            l: 0,
            frac: b.sigma,
            train_err: b.report.empirical_risk,
            test_err,
            kl: gaussian_kl(&pw.w, &pw.w0, b.sigma)?,
            uc_bound: None,
            pb_bound: b.report.bound,
            uc_vacuous: false,
            pb_vacuous: b.report.vacuous,
            wall_time_ms: cell.elapsed(start),
        };
        Ok(vec![prompt, probe])
    })?;
    Ok(ExperimentOutput {
        rows,
        notes: base_notes(cfg),
        extra: serde_json::json!({ "probe_risk_mode": cfg.probe.bound.risk_mode }),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    match cfg.kind {
        ExperimentKind::Grid => run_grid(cfg),
        ExperimentKind::LengthSweep => run_length_sweep(cfg),
        ExperimentKind::LabelFlip => run_label_flip_sweep(cfg),
        ExperimentKind::DataSubsample => run_data_subsample_sweep(cfg),
        ExperimentKind::VocabSubsample => run_vocab_subsample_sweep(cfg),
        ExperimentKind::BoundValidity => run_bound_validity(cfg),
        ExperimentKind::SrmCompare => run_srm_compare(cfg),
        ExperimentKind::PruneCompare => run_prune_compare(cfg),
        ExperimentKind::ProbeCompare => run_probe_compare(cfg),
    }
}

/// Writes `<dir>/<kind>.csv` and its manifest; returns the CSV path.
pub fn write_output(
    cfg: &ExperimentConfig,
    out: &ExperimentOutput,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let path = dir.as_ref().join(format!("{}.csv", cfg.kind.id()));
    let mut manifest = RunManifest::new(cfg.kind.id(), cfg.seed, serde_json::to_value(cfg)?);
    manifest.notes = out.notes.clone();
    manifest.extra = out.extra.clone();
    emit_report(&out.rows, &path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(kind);
        cfg.source = DataSource::Synthetic {
            spec: SyntheticSpec {
                train_per_class: 20,
                test_per_class: 20,
                ..Default::default()
            },
        };
        cfg.search.length = 1;
        cfg
    }

    #[test]
    fn grid_has_one_row_per_cell_and_reproduces() {
        let mut cfg = small(ExperimentKind::Grid);
        cfg.lengths = vec![1, 2];
        cfg.fractions = vec![0.5, 1.0];
        let a = run_grid(&cfg).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert!(a.rows.iter().all(|r| r.pb_bound >= r.train_err));
        assert_eq!(
            report_csv(&a.rows),
            report_csv(&run_grid(&cfg).unwrap().rows)
        );
    }

    #[test]
    fn zero_flip_row_equals_plain_run() {
        let mut cfg = small(ExperimentKind::LabelFlip);
        cfg.flip_probs = vec![0.0];
        let flip = run_label_flip_sweep(&cfg).unwrap();
        let mut plain = small(ExperimentKind::DataSubsample);
        plain.fractions = vec![1.0];
        let plain = run_data_subsample_sweep(&plain).unwrap();
        let (a, b) = (&flip.rows[0], &plain.rows[0]);
        assert_eq!(
            (a.train_err, a.kl, a.pb_bound),
            (b.train_err, b.kl, b.pb_bound)
        );
    }

    #[test]
    fn zero_trials_give_an_empty_report() {
        let mut cfg = small(ExperimentKind::BoundValidity);
        cfg.trials = 0;
        assert!(run_bound_validity(&cfg).unwrap().rows.is_empty());
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(r#"{"kind": "srm_compare", "seed": 4}"#).unwrap();
        assert_eq!(cfg.betas, vec![0.0, 0.5, 1.0, 2.0]);
        assert_eq!(cfg.delta, DEFAULT_DELTA);
        assert!(ExperimentConfig::from_json(r#"{"kind": "grid", "delta": 2}"#).is_err());
    }
}
