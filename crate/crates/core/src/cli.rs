//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (non-finite values or divergence).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{stored_dtype, Checkpoint};
use crate::config::{parse_pairs, HaqaeConfig};
use crate::corpus::{
    build_vocabulary, default_grammar, filter_corpus, generate_synthetic_corpus, read_corpus,
    write_corpus, write_labels, EventSequence, EventTuple, FilterConfig, SyntheticGrammar,
    Vocabulary,
};
use crate::error::Error;
use crate::eval::{
    build_cloze_set, cloze_accuracy, export_cloze, latent_probe, perplexity_eval, probe_sweep,
    render_table, ProbeMode, RandomScorer, UniformScorer,
};
use crate::generate::{generate, DecodeMode, GenerationConstraints};
use crate::model::build_variant;
use crate::tensor::Real;
use crate::train::{train, Split};

#[derive(Parser, Debug)]
#[command(
    name = "haqae",
    version,
    about = "Hierarchical quantized autoencoder for event scripts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter a raw corpus by length and split it into train/valid/test.
    PrepareData(PrepareArgs),
    /// Sample a labeled corpus from a script grammar.
    SynthCorpus(SynthArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Per-word perplexity with EOS excluded.
    EvalPpl(EvalPplArgs),
    /// Inverse narrative cloze accuracy.
    EvalCloze(EvalClozeArgs),
    /// Continue a two-event seed.
    Generate(GenerateArgs),
    /// Override latent codes and measure the change in greedy output.
    ProbeLatents(ProbeArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Corpus file to filter.
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving train.tsv, valid.tsv and test.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    valid_frac: f64,
    #[arg(long, default_value_t = 0.05)]
    test_frac: f64,
    /// Minimum flat token length, separators included.
    #[arg(long, default_value_t = 8)]
    min_tokens: usize,
    #[arg(long, default_value_t = 50)]
    max_tokens: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Grammar file (TOML, `format = 1`). The bundled grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Number of sequences.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth topic/track labels, one line per sequence.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a preset: `paper` or `desk`.
    #[arg(long)]
    preset: Option<String>,
    /// haqae, nohier, rnnlm or rnnlm_role.
    #[arg(long)]
    variant: Option<String>,
    /// Extra `key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Best checkpoint (lowest validation NLL, or final without --valid).
    #[arg(long)]
    out: PathBuf,
    /// Final checkpoint, for resuming or inspection.
    #[arg(long)]
    last: Option<PathBuf>,
    /// Metric log, one JSON record per line.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
    /// Print every training step, not only validations.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct EvalPplArgs {
    /// Checkpoint path, or `uniform` for the uniform baseline.
    #[arg(long)]
    model: String,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalClozeArgs {
    /// Checkpoint path, `random` or `uniform`.
    #[arg(long)]
    model: String,
    /// Source corpus. Without it, a corpus of twice --sets sequences is
    /// sampled from the bundled grammar with --seed.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    sets: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write candidates to PREFIX.tsv and labels to PREFIX.labels.
    #[arg(long, value_name = "PREFIX")]
    export: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Seed event `verb,subject,object,preposition`; give exactly two.
    #[arg(long = "event", value_name = "V,S,O,P", required = true)]
    events: Vec<String>,
    /// Events to generate after the seed.
    #[arg(long, default_value_t = 3)]
    max_events: usize,
    /// Sample at temperature 1 instead of greedy decoding.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Allow repeated predicates and subject = object.
    #[arg(long)]
    no_constraints: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeModeArg {
    Frozen,
    Recompute,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Probe the first N sequences, every latent once.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Single probe: sequence index into the corpus (needs --latent and --value).
    #[arg(long, requires_all = ["latent", "value"])]
    index: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    value: Option<usize>,
    #[arg(long, value_enum, default_value_t = ProbeModeArg::Frozen)]
    mode: ProbeModeArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Individual probe reports, one JSON record per line.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            _ if e.is_numeric() => 3,
            Error::Config(_) => 1,
            _ => 2,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs a command line (program name first) with standard streams.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Like [`run`] with explicit output streams.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            let text = e.render().to_string();
            return if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = write!(out, "{text}");
                0
            } else {
                let _ = write!(err, "{text}");
                1
            };
        }
    };
    let result = match cli.command {
        Command::PrepareData(a) => prepare_data(a, out),
        Command::SynthCorpus(a) => synth_corpus(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::EvalPpl(a) => eval_ppl(a, out),
        Command::EvalCloze(a) => eval_cloze(a, out),
        Command::Generate(a) => generate_cmd(a, out),
        Command::ProbeLatents(a) => probe_latents(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}

fn load_corpus(path: &Path) -> Result<Vec<EventSequence>, Failure> {
    read_corpus(path).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    })
}

fn write_json_lines<S: serde::Serialize>(path: &Path, records: &[S]) -> Outcome {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("report serializes"));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Loads a checkpoint at its stored precision and runs `$body` with it
/// bound to `$c`.
macro_rules! with_checkpoint {
    ($path:expr, |$c:ident| $body:expr) => {{
        let path: &Path = $path;
        let bytes = fs::read(path).map_err(|e| Failure {
            code: 2,
            msg: format!("cannot read checkpoint {}: {e}", path.display()),
        })?;
        if stored_dtype(&bytes)? == "f64" {
            let $c = Checkpoint::<f64>::from_bytes(&bytes)?;
            $body
        } else {
            let $c = Checkpoint::<f32>::from_bytes(&bytes)?;
            $body
        }
    }};
}

fn prepare_data(a: PrepareArgs, out: &mut dyn Write) -> Outcome {
    let fracs_ok = (0.0..1.0).contains(&a.valid_frac)
        && (0.0..1.0).contains(&a.test_frac)
        && a.valid_frac + a.test_frac < 1.0;
    if !fracs_ok {
        return Err(Failure::usage(
            "--valid-frac and --test-frac must be in [0, 1) and sum below 1",
        ));
    }
    let raw = load_corpus(&a.input)?;
    let cfg = FilterConfig {
        min_len: a.min_tokens,
        max_len: a.max_tokens,
        ..FilterConfig::default()
    };
    let mut kept = filter_corpus(&raw, &cfg)?;
    if kept.is_empty() {
        return Err(Error::Empty("corpus after filtering").into());
    }
    kept.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
    let n = kept.len();
    let n_valid = (n as f64 * a.valid_frac).round() as usize;
    let n_test = (n as f64 * a.test_frac).round() as usize;
    let test = kept.split_off(n - n_test);
    let valid = kept.split_off(kept.len() - n_valid);
    fs::create_dir_all(&a.out_dir)?;
    let mut rows = Vec::new();
    for (name, part) in [("train", &kept), ("valid", &valid), ("test", &test)] {
        write_corpus(part, a.out_dir.join(format!("{name}.tsv")))?;
        rows.push(vec![name.to_string(), part.len().to_string()]);
    }
    rows.push(vec!["filtered out".into(), (raw.len() - n).to_string()]);
    write!(out, "{}", render_table(&["split", "sequences"], &rows))?;
    Ok(())
}

fn synth_corpus(a: SynthArgs, out: &mut dyn Write) -> Outcome {
    let grammar = match &a.grammar {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure {
                code: 2,
                msg: format!("cannot read grammar {}: {e}", p.display()),
            })?;
            SyntheticGrammar::from_toml(&text)?
        }
        None => default_grammar(),
    };
    let corpus = generate_synthetic_corpus(&grammar, a.n, a.seed)?;
    let seqs: Vec<EventSequence> = corpus.iter().map(|l| l.sequence.clone()).collect();
    write_corpus(&seqs, &a.out)?;
    if let Some(p) = &a.labels {
        let labels: Vec<_> = corpus
            .into_iter()
            .map(|l| (l.sequence.source_id, l.label))
            .collect();
        write_labels(&labels, p)?;
    }
    writeln!(out, "wrote {} sequences to {}", seqs.len(), a.out.display())?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<HaqaeConfig, Failure> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut pairs = parse_pairs(&text).map_err(|e| Failure::usage(e.to_string()))?;
    if a.config.is_none() {
        pairs.push(("preset", "desk"));
    }
    if let Some(p) = &a.preset {
        pairs.push(("preset", p));
    }
    if let Some(v) = &a.variant {
        pairs.push(("model.variant", v));
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.push((k.trim(), v.trim()));
    }
    let seed = a.seed.map(|s| s.to_string());
    if let Some(s) = &seed {
        pairs.push(("train.seed", s));
    }
    HaqaeConfig::from_pairs(pairs).map_err(|e| Failure::usage(e.to_string()))
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Outcome {
    let cfg = train_config(&a)?;
    let train_corpus = load_corpus(&a.train)?;
    let valid_corpus = match &a.valid {
        Some(p) => load_corpus(p)?,
        None => Vec::new(),
    };
    let vocab = build_vocabulary(&train_corpus, cfg.vocab_max)?;
    match a.dtype {
        Dtype::F32 => train_typed::<f32>(&a, cfg, vocab, &train_corpus, &valid_corpus, out),
        Dtype::F64 => train_typed::<f64>(&a, cfg, vocab, &train_corpus, &valid_corpus, out),
    }
}

fn train_typed<T: Real>(
    a: &TrainArgs,
    cfg: HaqaeConfig,
    vocab: Vocabulary,
    train_corpus: &[EventSequence],
    valid_corpus: &[EventSequence],
    out: &mut dyn Write,
) -> Outcome {
    let encode = |c: &[EventSequence]| {
        c.iter()
            .map(|s| vocab.encode_words(s))
            .collect::<crate::Result<Vec<_>>>()
    };
    let (train_ids, valid_ids) = (encode(train_corpus)?, encode(valid_corpus)?);
    let model = build_variant::<T>(&cfg, vocab.len())?;
    writeln!(
        out,
        "{} model, {} parameters, vocabulary {}, {} train / {} valid sequences",
        cfg.variant,
        model.params.numel(),
        vocab.len(),
        train_ids.len(),
        valid_ids.len()
    )?;
    let verbose = a.verbose;
    let mut io_err = None;
    let outcome = train(
        Checkpoint::new(model, vocab.clone()),
        &train_ids,
        &valid_ids,
        |r| {
            if verbose || r.split == Split::Valid {
                if let Err(e) = writeln!(out, "{r}") {
                    io_err.get_or_insert(e);
                }
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(p) = &a.log {
        write_json_lines(p, &outcome.log)?;
    }
    outcome.best.save(&a.out)?;
    if let Some(p) = &a.last {
        outcome.last.save(p)?;
    }
    if let Some(e) = outcome.stopped {
        writeln!(
            out,
            "stopped at step {}; saved last good state",
            outcome.last.state.step
        )?;
        return Err(e.into());
    }
    let best = outcome
        .best
        .state
        .best_valid_nll
        .map_or("n/a".into(), |n| format!("{n:.4}"));
    writeln!(
        out,
        "done: {} steps, best valid nll {best}",
        outcome.last.state.step
    )?;
    Ok(())
}

fn eval_ppl(a: EvalPplArgs, out: &mut dyn Write) -> Outcome {
    let corpus = load_corpus(&a.corpus)?;
    let (label, report) = if a.model == "uniform" {
        let vocab = build_vocabulary(&corpus, usize::MAX)?;
        let ids = encode_all(&vocab, &corpus)?;
        (
            "uniform".to_string(),
            perplexity_eval(
                &mut UniformScorer {
                    vocab_size: vocab.len(),
                },
                &ids,
            )?,
        )
    } else {
        with_checkpoint!(Path::new(&a.model), |c| {
            let ids = encode_all(&c.vocab, &corpus)?;
            let mut model = c.model;
            (
                model.config.variant.to_string(),
                perplexity_eval(&mut model, &ids)?,
            )
        })
    };
    let rows = vec![vec![
        label,
        report.sequences.to_string(),
        report.words.to_string(),
        format!("{:.4}", report.nll),
        format!("{:.3}", report.ppl),
    ]];
    write!(
        out,
        "{}",
        render_table(&["model", "sequences", "words", "nll", "ppl"], &rows)
    )?;
    if let Some(p) = &a.report {
        write_json_lines(p, &[&report])?;
    }
    Ok(())
}

fn encode_all(vocab: &Vocabulary, corpus: &[EventSequence]) -> Result<Vec<Vec<u32>>, Failure> {
    Ok(corpus
        .iter()
        .map(|s| vocab.encode_words(s))
        .collect::<crate::Result<Vec<_>>>()?)
}

fn eval_cloze(a: EvalClozeArgs, out: &mut dyn Write) -> Outcome {
    let corpus = match &a.corpus {
        Some(p) => load_corpus(p)?,
        None => generate_synthetic_corpus(&default_grammar(), a.sets.max(1) * 2, a.seed)?
            .into_iter()
            .map(|l| l.sequence)
            .collect(),
    };
    let set = build_cloze_set(&corpus, a.sets, a.seed)?;
    if let Some(prefix) = &a.export {
        export_cloze(
            &set,
            &prefix.with_extension("tsv"),
            &prefix.with_extension("labels"),
        )?;
    }
    let report = match a.model.as_str() {
        "random" | "uniform" => {
            let vocab = build_vocabulary(&corpus, usize::MAX)?;
            if a.model == "random" {
                cloze_accuracy(&mut RandomScorer::new(a.seed), &vocab, &set)?
            } else {
                cloze_accuracy(
                    &mut UniformScorer {
                        vocab_size: vocab.len(),
                    },
                    &vocab,
                    &set,
                )?
            }
        }
        path => with_checkpoint!(Path::new(path), |c| {
            let mut model = c.model;
            cloze_accuracy(&mut model, &c.vocab, &set)?
        }),
    };
    writeln!(
        out,
        "cloze accuracy: {:.2}% ({}/{})",
        100.0 * report.accuracy,
        report.correct,
        report.instances
    )?;
    if let Some(p) = &a.report {
        write_json_lines(p, &[&report])?;
    }
    Ok(())
}

fn parse_event(s: &str) -> Result<EventTuple, Failure> {
    let slots: Vec<&str> = s.split(',').map(str::trim).collect();
    match slots.as_slice() {
        [v, s, o, p] if !v.is_empty() && !s.is_empty() && !o.is_empty() && !p.is_empty() => {
            Ok(EventTuple::from_slots([v, s, o, p]))
        }
        _ => Err(Failure::usage(format!(
            "--event expects verb,subject,object,preposition (use `null`), got {s:?}"
        ))),
    }
}

fn generate_cmd(a: GenerateArgs, out: &mut dyn Write) -> Outcome {
    if a.events.len() != 2 {
        return Err(Failure::usage(format!(
            "give exactly two --event flags, got {}",
            a.events.len()
        )));
    }
    if a.max_events == 0 {
        return Err(Failure::usage("--max-events must be at least 1"));
    }
    let seed_events = a
        .events
        .iter()
        .map(|e| parse_event(e))
        .collect::<Result<Vec<_>, _>>()?;
    let constraints = if a.no_constraints {
        GenerationConstraints::unconstrained(a.max_events)
    } else {
        GenerationConstraints {
            max_events: a.max_events,
            ..GenerationConstraints::default()
        }
    };
    let mode = if a.sample {
        DecodeMode::Sample { seed: a.seed }
    } else {
        DecodeMode::Greedy
    };
    let seq = with_checkpoint!(&a.model, |c| {
        let seed_seq = EventSequence::new("seed", seed_events.clone());
        let stepper = c.model.stepper_for(&c.vocab.encode_words(&seed_seq)?)?;
        generate(&stepper, &c.vocab, &seed_events, &constraints, mode)?
    });
    for (i, e) in seq.events.iter().enumerate() {
        let tag = if i < 2 { "seed" } else { "gen " };
        writeln!(out, "{tag} {e}")?;
    }
    Ok(())
}

fn probe_latents(a: ProbeArgs, out: &mut dyn Write) -> Outcome {
    let corpus = load_corpus(&a.corpus)?;
    let mode = match a.mode {
        ProbeModeArg::Frozen => ProbeMode::Frozen,
        ProbeModeArg::Recompute => ProbeMode::Recompute,
    };
    with_checkpoint!(&a.model, |c| {
        if let (Some(i), Some(latent), Some(value)) = (a.index, a.latent, a.value) {
            let seq = corpus.get(i).ok_or_else(|| Failure {
                code: 2,
                msg: format!(
                    "sequence index {i} out of range ({} sequences)",
                    corpus.len()
                ),
            })?;
            let r = latent_probe(&c.model, &c.vocab, seq, latent, value, mode)?;
            writeln!(out, "codes {:?} -> {:?}", r.base_codes, r.probed_codes)?;
            for e in &r.base {
                writeln!(out, "base  {e}")?;
            }
            for e in &r.regenerated {
                writeln!(out, "probe {e}")?;
            }
            writeln!(out, "edit distance {}", r.edit_distance)?;
            if let Some(p) = &a.report {
                write_json_lines(p, &[&r])?;
            }
        } else {
            let n = a.n.min(corpus.len());
            let (reports, summary) = probe_sweep(&c.model, &c.vocab, &corpus[..n], mode, a.seed)?;
            let rows: Vec<Vec<String>> = summary
                .iter()
                .map(|s| {
                    vec![
                        format!("z{}", s.latent),
                        s.probes.to_string(),
                        format!("{:.3}", s.mean_edit_distance),
                    ]
                })
                .collect();
            write!(
                out,
                "{}",
                render_table(&["latent", "probes", "mean edit distance"], &rows)
            )?;
            if let Some(p) = &a.report {
                write_json_lines(p, &reports)?;
            }
        }
    });
    Ok(())
}
