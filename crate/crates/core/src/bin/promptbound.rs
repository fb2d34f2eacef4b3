use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use promptbound::bounds::{mcallester_bound, uc_bound};
use promptbound::harness::report::{parse_report, report_csv, ReportRow};
use promptbound::harness::{
    prepare, run_experiment, write_output, DataSource, ExperimentConfig, ExperimentKind,
    ExperimentOutput,
};
use promptbound::probe::{probe_pac_bayes_bound, train_probe, ProbeTrainConfig};
use promptbound::synth::{FlipMode, PriorCorpusSpec};
use promptbound::{
    evaluate_prompts, generate_synthetic, sequential_search, CachedEncoder, Criterion, Error,
    PromptSet, SyntheticSpec, TextEncoder, TokenId,
};

#[derive(Parser)]
#[command(
    name = "promptbound",
    version,
    about = "Prompt search with generalization certificates"
)]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Confidence parameter of every bound.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic world and write it in the core file formats.
    GenSynth(GenSynth),
    /// Run one prompt search and write the prompts, trace and certificates.
    Search(SearchArgs),
    /// Evaluate bound formulas, or certify a saved prompt set.
    Bound(BoundArgs),
    /// Train the linear-probe baseline and report its bound next to a searched prompt.
    Probe(ProbeArgs),
    /// Length by data-fraction grid.
    Grid,
    /// Label-flip sweep.
    Flip(FlipArgs),
    /// Data or vocabulary subsampling sweep.
    Subsample(SubsampleArgs),
    /// Full vocabulary against k-sigma pruned vocabularies.
    Prune,
    /// Greedy against prior-regularized search.
    Srm,
    /// Count bound violations over independent synthetic worlds.
    Validate(ValidateArgs),
    /// Re-emit report CSVs as one merged report with per-group means.
    ExportReport(ExportArgs),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    prompt_len: usize,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Also write a text-embedding cache of every prompt up to this length.
    #[arg(long, default_value_t = 1)]
    cache_len: usize,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    length: Option<usize>,
    /// Prior weight; 0 runs plain greedy search.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct BoundArgs {
    /// Prompt-set JSON to certify against the configured data.
    #[arg(long, conflicts_with_all = ["risk", "n"])]
    prompts: Option<PathBuf>,
    #[arg(long)]
    risk: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    /// KL term of the PAC-Bayes bound.
    #[arg(long)]
    kl: Option<f64>,
    /// log of the hypothesis count for the UC bound.
    #[arg(long)]
    log_size: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Also save the probe weights into the output directory.
    #[arg(long)]
    save: bool,
}

#[derive(Args)]
struct FlipArgs {
    /// Redraw flipped labels uniformly over all classes instead of the other ones.
    #[arg(long)]
    uniform: bool,
}

#[derive(Args)]
struct SubsampleArgs {
    /// Subsample the candidate vocabulary instead of the training data.
    #[arg(long)]
    vocab: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    /// Report CSVs to merge.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn config_error(msg: String) -> anyhow::Error {
    Error::InvalidParameter(msg).into()
}

impl Cli {
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
                let mut cfg = ExperimentConfig::from_json(&text)?;
                cfg.kind = kind;
                cfg
            }
            None => ExperimentConfig::new(kind),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(delta) = self.delta {
            cfg.delta = delta;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn summarize(out: &ExperimentOutput) {
    for r in &out.rows {
        println!(
            "{:<22} seed={:<4} l={:<2} frac={:<8} train={:.4} test={} kl={:.3} pb={:.4}{}",
            r.experiment,
            r.seed,
            r.l,
            promptbound::harness::report::format_g6(r.frac),
            r.train_err,
            r.test_err.map_or("-".into(), |t| format!("{t:.4}")),
            r.kl,
            r.pb_bound,
            if r.pb_vacuous { " (vacuous)" } else { "" }
        );
    }
    for n in &out.notes {
        println!("note: {n}");
    }
}

fn run_kind(cli: &Cli, cfg: ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let out = run_experiment(&cfg)?;
    let path = write_output(&cfg, &out, cli.out_dir(Some(&cfg)))?;
    summarize(&out);
    if !out.extra.is_null() {
        println!("{}", out.extra);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_synth(cli: &Cli, a: &GenSynth) -> Result<()> {
    let spec = SyntheticSpec {
        classes: a.classes,
        dim: a.dim,
        vocab_size: a.vocab,
        prompt_len: a.prompt_len,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        noise: a.noise,
        seed: cli.seed.unwrap_or(0),
    };
    let world = generate_synthetic(&spec)?;
    let dir = cli.out_dir(None);
    world.save(&dir)?;

    let corpus: Vec<String> = world
        .prior_corpus(&PriorCorpusSpec::default())
        .iter()
        .map(|s| world.vocab.detokenize(s))
        .collect::<promptbound::Result<_>>()?;
    fs::write(dir.join("corpus.txt"), corpus.join("\n") + "\n")?;

    let count: f64 = (1..=a.cache_len)
        .map(|l| (a.vocab as f64).powi(l as i32))
        .sum();
    if count > 1e6 {
        return Err(config_error(format!(
            "a cache up to length {} holds {count} prompts",
            a.cache_len
        )));
    }
    let mut cache = CachedEncoder::new(a.dim);
    let mut layer: Vec<Vec<TokenId>> = vec![Vec::new()];
    for _ in 0..a.cache_len {
        layer = layer
            .iter()
            .flat_map(|p| {
                (0..a.vocab).map(move |v| {
                    let mut q = p.clone();
                    q.push(TokenId::from(v));
                    q
                })
            })
            .collect();
        for p in &layer {
            cache.insert(p.clone(), world.encoder.encode(p)?)?;
        }
    }
    if !cache.is_empty() {
        cache.save(dir.join("text.pbem"), dir.join("text.idx"))?;
    }
    println!(
        "wrote a {}-class world ({} train, {} test rows, {} cached prompts) to {}",
        a.classes,
        world.train.len(),
        world.test.len(),
        cache.len(),
        dir.display()
    );
    Ok(())
}

fn search(cli: &Cli, a: &SearchArgs) -> Result<()> {
    let mut cfg = cli.config(ExperimentKind::DataSubsample)?;
    if let Some(l) = a.length {
        cfg.search.length = l;
    }
    match a.beta {
        Some(b) if b > 0.0 => cfg.search.criterion = Criterion::Regularized { beta: b },
        Some(_) => cfg.search.criterion = Criterion::Greedy,
        None => {}
    }
    cfg.search.seed = cfg.seed;
    cfg.validate()?;
    let setup = prepare(&cfg, cfg.seed)?;
    let out = sequential_search(
        &cfg.search,
        &setup.train,
        setup.encoder.as_ref(),
        setup.vocab_size(),
        Some(setup.prior.as_ref()),
    )?;
    let eval = evaluate_prompts(
        &out.prompts,
        &setup.train,
        setup.test.as_ref(),
        setup.encoder.as_ref(),
        setup.prior.as_ref(),
        cfg.kl_policy,
        cfg.delta,
    )?;
    let dir = cli.out_dir(Some(&cfg));
    fs::create_dir_all(&dir)?;
    out.prompts.save(dir.join("prompts.json"), &setup.vocab)?;
    fs::write(dir.join("trace.csv"), out.trace.to_csv(&setup.vocab))?;
    fs::write(
        dir.join("evaluation.json"),
        serde_json::to_string_pretty(&eval)? + "\n",
    )?;
    for (k, p) in out.prompts.class_prompts.iter().enumerate() {
        println!("class {k}: {}", setup.vocab.detokenize(p)?);
    }
    println!(
        "train {:.4} test {} kl {:.3} uc {:.4} pb {:.4}",
        eval.train_risk,
        eval.test_risk.map_or("-".into(), |t| format!("{t:.4}")),
        eval.kl,
        eval.uc.bound,
        eval.pac_bayes.bound
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn bound(cli: &Cli, a: &BoundArgs) -> Result<()> {
    let delta = cli.delta.unwrap_or(promptbound::DEFAULT_DELTA);
    if let Some(path) = &a.prompts {
        let cfg = cli.config(ExperimentKind::DataSubsample)?;
        let setup = prepare(&cfg, cfg.seed)?;
        let prompts = PromptSet::load(path, &setup.vocab)?;
        prompts.validate(setup.train.num_classes(), setup.vocab_size(), None)?;
        let eval = evaluate_prompts(
            &prompts,
            &setup.train,
            setup.test.as_ref(),
            setup.encoder.as_ref(),
            setup.prior.as_ref(),
            cfg.kl_policy,
            cfg.delta,
        )?;
        println!("{}", serde_json::to_string_pretty(&eval)?);
        return Ok(());
    }
    let (Some(r), Some(n)) = (a.risk, a.n) else {
        return Err(config_error(
            "bound needs --prompts, or --risk and --n".into(),
        ));
    };
    if a.kl.is_none() && a.log_size.is_none() {
        return Err(config_error("bound needs --kl or --log-size".into()));
    }
    if let Some(c) = a.log_size {
        println!("uc_bound {}", uc_bound(r, c, n, delta)?);
    }
    if let Some(kl) = a.kl {
        println!("pb_bound {}", mcallester_bound(r, kl, n, delta)?);
    }
    Ok(())
}

fn probe(cli: &Cli, a: &ProbeArgs) -> Result<()> {
    let mut cfg = cli.config(ExperimentKind::ProbeCompare)?;
    if let Some(e) = a.epochs {
        cfg.probe.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.probe.train.learning_rate = lr;
    }
    if a.save {
        let setup = prepare(&cfg, cfg.seed)?;
        let pw = train_probe(
            &setup.train,
            &ProbeTrainConfig {
                seed: cfg.seed,
                ..cfg.probe.train.clone()
            },
        )?;
        let b = probe_pac_bayes_bound(&pw, &setup.train, &cfg.probe.bound)?;
        let dir = cli.out_dir(Some(&cfg));
        fs::create_dir_all(&dir)?;
        pw.save(dir.join("probe.pbem"), dir.join("probe.json"))?;
        println!(
            "saved probe (sigma {}, bound {:.4})",
            b.sigma, b.report.bound
        );
    }
    run_kind(cli, cfg)
}

/// Mean train error, test error, KL and bound per (experiment, l, frac).
fn group_means(rows: &[ReportRow]) -> Vec<serde_json::Value> {
    let mut keys: Vec<(String, usize, u64)> = Vec::new();
    for r in rows {
        let key = (r.experiment.clone(), r.l, r.frac.to_bits());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(e, l, f)| {
            let g: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.experiment == e && r.l == l && r.frac.to_bits() == f)
                .collect();
            let mean = |x: fn(&ReportRow) -> f64| g.iter().map(|r| x(r)).sum::<f64>() / g.len() as f64;
            let tests: Vec<f64> = g.iter().filter_map(|r| r.test_err).collect();
            serde_json::json!({
                "experiment": e,
                "l": l,
                "frac": f64::from_bits(f),
                "rows": g.len(),
                "train_err": mean(|r| r.train_err),
                "test_err": (!tests.is_empty()).then(|| tests.iter().sum::<f64>() / tests.len() as f64),
                "kl": mean(|r| r.kl),
                "pb_bound": mean(|r| r.pb_bound),
            })
        })
        .collect()
}

fn export_report(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
        rows.extend(
            parse_report(&text)
                .map_err(|e| anyhow::Error::from(e).context(path.display().to_string()))?,
        );
    }
    let dir = cli.out_dir(None);
    fs::create_dir_all(&dir)?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report_csv(&rows))?;
    let summary = serde_json::json!({
        "sources": a.inputs,
        "rows": rows.len(),
        "groups": group_means(&rows),
    });
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!("merged {} rows into {}", rows.len(), csv.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Cmd::GenSynth(a) => gen_synth(cli, a),
        Cmd::Search(a) => search(cli, a),
        Cmd::Bound(a) => bound(cli, a),
        Cmd::Probe(a) => probe(cli, a),
        Cmd::Grid => run_kind(cli, cli.config(ExperimentKind::Grid)?),
        Cmd::Flip(a) => {
            let mut cfg = cli.config(ExperimentKind::LabelFlip)?;
            if a.uniform {
                cfg.flip_mode = FlipMode::Uniform;
            }
            run_kind(cli, cfg)
        }
        Cmd::Subsample(a) => run_kind(
            cli,
            cli.config(if a.vocab {
                ExperimentKind::VocabSubsample
            } else {
                ExperimentKind::DataSubsample
            })?,
        ),
        Cmd::Prune => run_kind(cli, cli.config(ExperimentKind::PruneCompare)?),
        Cmd::Srm => run_kind(cli, cli.config(ExperimentKind::SrmCompare)?),
        Cmd::Validate(a) => {
            let mut cfg = cli.config(ExperimentKind::BoundValidity)?;
            if let Some(t) = a.trials {
                cfg.trials = t;
            }
            if !matches!(cfg.source, DataSource::Synthetic { .. }) {
                return Err(config_error("validate needs a synthetic source".into()));
            }
            run_kind(cli, cfg)
        }
        Cmd::ExportReport(a) => export_report(cli, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source text.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.ends_with(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
