//! Per-word perplexity, inverse narrative cloze and latent probes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{write_corpus, EventSequence, EventTuple, Vocabulary};
use crate::decoder::SeqScore;
use crate::error::{Error, Result};
use crate::generate::{continue_events, DecodeMode, GenerationConstraints};
use crate::model::Model;
use crate::tensor::Real;

/// Events per cloze candidate: the shared seed event plus five more.
pub const CLOZE_EVENTS: usize = 6;
pub const CLOZE_CHOICES: usize = 6;

/// Anything that assigns a likelihood to word-id sequences (no EOS).
pub trait SequenceScorer {
    fn score(&mut self, seqs: &[Vec<u32>]) -> Result<Vec<SeqScore>>;
}

/// Latent variants score the reconstruction likelihood under their
/// deterministically inferred codes; the uniform prior over codes is a
/// constant and is left out.
impl<T: Real> SequenceScorer for Model<T> {
    fn score(&mut self, seqs: &[Vec<u32>]) -> Result<Vec<SeqScore>> {
        Ok(self.evaluate(seqs, self.config.batch_size)?.scores)
    }
}

/// Equal probability for every vocabulary entry at every position.
#[derive(Clone, Copy, Debug)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl SequenceScorer for UniformScorer {
    fn score(&mut self, seqs: &[Vec<u32>]) -> Result<Vec<SeqScore>> {
        let per_token = (self.vocab_size as f64).ln();
        Ok(seqs
            .iter()
            .map(|s| SeqScore {
                word_nll: per_token * s.len() as f64,
                words: s.len(),
                eos_nll: per_token,
            })
            .collect())
    }
}

/// Independent uniform random log-probabilities: the chance baseline for
/// ranking tasks. Not a distribution; do not use for perplexity.
#[derive(Clone, Debug)]
pub struct RandomScorer {
    rng: ChaCha8Rng,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl SequenceScorer for RandomScorer {
    fn score(&mut self, seqs: &[Vec<u32>]) -> Result<Vec<SeqScore>> {
        Ok(seqs
            .iter()
            .map(|s| SeqScore {
                word_nll: self.rng.gen::<f64>(),
                words: s.len(),
                eos_nll: 0.0,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerplexityReport {
    pub sequences: usize,
    /// Scored word positions; one EOS per sequence is not counted.
    pub words: usize,
    /// Every predicted position including EOS.
    pub tokens: usize,
    pub nll: f64,
    pub ppl: f64,
}

pub fn perplexity_eval(
    scorer: &mut impl SequenceScorer,
    seqs: &[Vec<u32>],
) -> Result<PerplexityReport> {
    if seqs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let scores = scorer.score(seqs)?;
    let nll_sum: f64 = scores.iter().map(|s| s.word_nll).sum();
    let words: usize = scores.iter().map(|s| s.words).sum();
    if words == 0 {
        return Err(Error::Empty("scored words"));
    }
    let nll = nll_sum / words as f64;
    if !nll.is_finite() {
        return Err(Error::NonFinite("per-word NLL".into()));
    }
    Ok(PerplexityReport {
        sequences: seqs.len(),
        words,
        tokens: words + seqs.len(),
        nll,
        ppl: nll.exp(),
    })
}

/// A six-event sequence and five detractors sharing its first event.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeInstance {
    pub legit: EventSequence,
    pub detractors: Vec<EventSequence>,
}

impl ClozeInstance {
    pub fn seed_event(&self) -> &EventTuple {
        &self.legit.events[0]
    }

    /// Legit first, then the detractors in construction order.
    pub fn candidates(&self) -> impl Iterator<Item = &EventSequence> {
        std::iter::once(&self.legit).chain(&self.detractors)
    }
}

/// Draws `n_sets` instances. Legit windows come from distinct sequences
/// (no replacement); each detractor tail is a contiguous five-event span
/// from a uniformly chosen sequence with a different source id, redrawn if
/// it equals the legit tail.
pub fn build_cloze_set(
    corpus: &[EventSequence],
    n_sets: usize,
    seed: u64,
) -> Result<Vec<ClozeInstance>> {
    let tail_len = CLOZE_EVENTS - 1;
    let legit_pool: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].len() >= CLOZE_EVENTS)
        .collect();
    let tail_pool: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].len() >= tail_len)
        .collect();
    if legit_pool.len() < n_sets.max(1) {
        return Err(Error::Invalid(format!(
            "{n_sets} cloze sets need at least {} sequences with {CLOZE_EVENTS} or more events; the corpus has {}",
            n_sets.max(1),
            legit_pool.len()
        )));
    }
    let first = &corpus[tail_pool[0]].source_id;
    if tail_pool.iter().all(|&i| &corpus[i].source_id == first) {
        return Err(Error::Invalid(format!(
            "cloze detractors need at least 2 source documents with {tail_len} or more events"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, legit_pool.len(), n_sets);
    let mut out = Vec::with_capacity(n_sets);
    for (n, pick) in chosen.into_iter().enumerate() {
        let doc = &corpus[legit_pool[pick]];
        let start = rng.gen_range(0..=doc.len() - CLOZE_EVENTS);
        let window = &doc.events[start..start + CLOZE_EVENTS];
        let legit = EventSequence::new(&format!("cloze{n:05}.0"), window.to_vec());
        let mut detractors = Vec::with_capacity(CLOZE_CHOICES - 1);
        let mut attempts = 0;
        while detractors.len() < CLOZE_CHOICES - 1 {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Invalid(
                    "cannot find detractor tails that differ from the legit tail".into(),
                ));
            }
            let other = &corpus[tail_pool[rng.gen_range(0..tail_pool.len())]];
            if other.source_id == doc.source_id {
                continue;
            }
            let s = rng.gen_range(0..=other.len() - tail_len);
            let tail = &other.events[s..s + tail_len];
            if tail == &window[1..] {
                continue;
            }
            let mut events = vec![window[0].clone()];
            events.extend_from_slice(tail);
            let id = format!("cloze{n:05}.{}", detractors.len() + 1);
            detractors.push(EventSequence::new(&id, events));
        }
        out.push(ClozeInstance { legit, detractors });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClozeReport {
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Fraction of instances whose legit candidate has the strictly highest
/// total log-probability. A tie for first counts as a miss.
pub fn cloze_accuracy(
    scorer: &mut impl SequenceScorer,
    vocab: &Vocabulary,
    instances: &[ClozeInstance],
) -> Result<ClozeReport> {
    if instances.is_empty() {
        return Err(Error::Empty("cloze set"));
    }
    let seqs = instances
        .iter()
        .flat_map(ClozeInstance::candidates)
        .map(|s| vocab.encode_words(s))
        .collect::<Result<Vec<_>>>()?;
    let scores = scorer.score(&seqs)?;
    let correct = scores
        .chunks(CLOZE_CHOICES)
        .filter(|c| {
            let legit = c[0].total_log_prob();
            c[1..].iter().all(|d| legit > d.total_log_prob())
        })
        .count();
    Ok(ClozeReport {
        instances: instances.len(),
        correct,
        accuracy: correct as f64 / instances.len() as f64,
    })
}

/// Writes every candidate in corpus format and a sidecar with one
/// `source_id TAB instance TAB legit|detractor` line per candidate.
pub fn export_cloze(
    instances: &[ClozeInstance],
    corpus_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let all: Vec<EventSequence> = instances
        .iter()
        .flat_map(|i| i.candidates().cloned())
        .collect();
    write_corpus(&all, corpus_path)?;
    let mut labels = String::new();
    for (n, inst) in instances.iter().enumerate() {
        for (k, c) in inst.candidates().enumerate() {
            let kind = if k == 0 { "legit" } else { "detractor" };
            writeln!(labels, "{}\t{n}\t{kind}", c.source_id).expect("string write");
        }
    }
    fs::write(labels_path, labels)?;
    Ok(())
}

/// How descendants of a probed latent are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    /// Every other latent keeps its inferred code.
    #[default]
    Frozen,
    /// Descendants are re-inferred from the overridden parent.
    Recompute,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub latent: usize,
    pub old_value: usize,
    pub new_value: usize,
    pub mode: ProbeMode,
    pub base_codes: Vec<usize>,
    pub probed_codes: Vec<usize>,
    pub base: Vec<String>,
    pub regenerated: Vec<String>,
    /// Token-level Levenshtein distance between the two regenerations.
    pub edit_distance: usize,
}

fn regenerate<T: Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    codes: &[usize],
    events: usize,
) -> Result<Vec<EventTuple>> {
    let stepper = model.stepper(codes)?;
    continue_events(
        &stepper,
        vocab,
        &[],
        &GenerationConstraints::unconstrained(events),
        DecodeMode::Greedy,
    )
}

fn flat_tokens(events: &[EventTuple]) -> Vec<String> {
    events
        .iter()
        .flat_map(|e| e.slots().map(str::to_string))
        .collect()
}

/// Overrides latent `latent` with code `new_value` and compares greedy
/// regenerations with and without the override. Both regenerations are
/// capped at the event count of `seq`.
pub fn latent_probe<T: Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seq: &EventSequence,
    latent: usize,
    new_value: usize,
    mode: ProbeMode,
) -> Result<ProbeReport> {
    model.check_code(latent, new_value)?;
    let words = vocab.encode_words(seq)?;
    let base_codes = model.infer_codes(&words)?;
    let probed_codes = match mode {
        ProbeMode::Frozen => {
            let mut c = base_codes.clone();
            c[latent] = new_value;
            c
        }
        ProbeMode::Recompute => model.infer_codes_forced(&words, latent, new_value)?,
    };
    let base = regenerate(model, vocab, &base_codes, seq.len())?;
    let regenerated = if probed_codes == base_codes {
        base.clone()
    } else {
        regenerate(model, vocab, &probed_codes, seq.len())?
    };
    let (a, b) = (flat_tokens(&base), flat_tokens(&regenerated));
    Ok(ProbeReport {
        latent,
        old_value: base_codes[latent],
        new_value,
        mode,
        base_codes,
        probed_codes,
        edit_distance: strsim::generic_levenshtein(&a, &b),
        base: base.iter().map(|e| e.slots().join(" ")).collect(),
        regenerated: regenerated.iter().map(|e| e.slots().join(" ")).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub latent: usize,
    pub probes: usize,
    pub mean_edit_distance: f64,
}

/// Probes every latent of each sequence once with a seeded random code
/// different from the inferred one. Returns the individual reports and
/// per-latent means.
pub fn probe_sweep<T: Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seqs: &[EventSequence],
    mode: ProbeMode,
    seed: u64,
) -> Result<(Vec<ProbeReport>, Vec<ProbeSummary>)> {
    let arch = model
        .latent()
        .ok_or_else(|| Error::Invalid("latent probes need a latent-variable model".into()))?;
    if seqs.is_empty() {
        return Err(Error::Empty("probe sequences"));
    }
    let (m, k) = (arch.chain.len(), arch.chain.codes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(seqs.len() * m);
    let mut sums = vec![0usize; m];
    for seq in seqs {
        let codes = model.infer_codes(&vocab.encode_words(seq)?)?;
        for (latent, &old) in codes.iter().enumerate() {
            // Uniform over the other k - 1 codes.
            let mut v = rng.gen_range(0..k - 1);
            if v >= old {
                v += 1;
            }
            let r = latent_probe(model, vocab, seq, latent, v, mode)?;
            sums[latent] += r.edit_distance;
            reports.push(r);
        }
    }
    let summary = sums
        .iter()
        .enumerate()
        .map(|(latent, &s)| ProbeSummary {
            latent,
            probes: seqs.len(),
            mean_edit_distance: s as f64 / seqs.len() as f64,
        })
        .collect();
    Ok((reports, summary))
}

/// Plain-text table with right-aligned columns after the first.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i == 0 {
                write!(s, "{c:<w$}").expect("string write");
            } else {
                write!(s, "  {c:>w$}").expect("string write");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(rule.iter().map(String::as_str).collect()));
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{HaqaeConfig, Variant};
    use crate::corpus::{build_vocabulary, default_grammar, generate_synthetic_corpus};
    use crate::model::build_variant;

    fn ev(v: &str) -> EventTuple {
        EventTuple::new(v, "x", "y", None)
    }

    fn doc(id: &str, verbs: &[&str]) -> EventSequence {
        EventSequence::new(id, verbs.iter().map(|v| ev(v)).collect())
    }

    fn synth(n: usize) -> Vec<EventSequence> {
        generate_synthetic_corpus(&default_grammar(), n, 3)
            .unwrap()
            .into_iter()
            .map(|l| l.sequence)
            .collect()
    }

    #[test]
    fn uniform_scorer_has_perplexity_v() {
        let seqs = vec![vec![6, 7, 8, 9], vec![6; 14]];
        let r = perplexity_eval(&mut UniformScorer { vocab_size: 50 }, &seqs).unwrap();
        assert!((r.ppl - 50.0).abs() < 1e-9);
        assert_eq!(r.words, 18);
        assert_eq!(r.tokens - r.sequences, r.words);
    }

    struct Fixed(Vec<SeqScore>);
    impl SequenceScorer for Fixed {
        fn score(&mut self, _: &[Vec<u32>]) -> Result<Vec<SeqScore>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn corpus_nll_is_token_weighted() {
        // Per-sequence per-word NLL 1.0 over 3 words and 4.0 over 9 words.
        let mut s = Fixed(vec![
            SeqScore {
                word_nll: 3.0,
                words: 3,
                eos_nll: 100.0,
            },
            SeqScore {
                word_nll: 36.0,
                words: 9,
                eos_nll: 100.0,
            },
        ]);
        let r = perplexity_eval(&mut s, &[vec![6; 3], vec![6; 9]]).unwrap();
        assert_eq!(r.nll, (3.0 + 36.0) / 12.0);
        assert!((r.ppl.ln() - r.nll).abs() <= 1e-9 * r.nll);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(perplexity_eval(&mut UniformScorer { vocab_size: 9 }, &[]).is_err());
    }

    #[test]
    fn two_documents_force_the_other_tail() {
        let corpus = vec![
            doc("a", &["a0", "a1", "a2", "a3", "a4", "a5", "a6"]),
            doc("b", &["b0", "b1", "b2", "b3", "b4", "b5"]),
        ];
        let set = build_cloze_set(&corpus, 2, 9).unwrap();
        for inst in &set {
            let own = &inst.legit.events[1].verb[..1];
            for d in &inst.detractors {
                assert!(d.events[1..].iter().all(|e| &e.verb[..1] != own));
                let other = if own == "a" { "b" } else { "a" };
                assert!(d.events[1..].iter().all(|e| e.verb.starts_with(other)));
            }
        }
    }

    #[test]
    fn instances_have_shared_seed_and_fixed_shape() {
        let corpus = synth(300);
        let set = build_cloze_set(&corpus, 200, 4).unwrap();
        assert_eq!(set, build_cloze_set(&corpus, 200, 4).unwrap());
        let mut legit_sources = std::collections::BTreeSet::new();
        for inst in &set {
            assert_eq!(inst.candidates().count(), 6);
            for c in inst.candidates() {
                assert_eq!(c.len(), 6);
                assert_eq!(&c.events[0], inst.seed_event());
            }
            for d in &inst.detractors {
                assert_ne!(d.events[1..], inst.legit.events[1..]);
            }
            legit_sources.insert(format!("{:?}", inst.legit.events));
        }
        assert!(legit_sources.len() > 150);
    }

    #[test]
    fn insufficient_corpus_states_minimum() {
        let corpus = vec![doc("a", &["a0", "a1", "a2", "a3", "a4", "a5"])];
        let e = build_cloze_set(&corpus, 1, 0).unwrap_err().to_string();
        assert!(e.contains("2 source documents"), "{e}");
        let e = build_cloze_set(&corpus, 3, 0).unwrap_err().to_string();
        assert!(e.contains("at least 3 sequences"), "{e}");
    }

    struct Oracle;
    impl SequenceScorer for Oracle {
        fn score(&mut self, seqs: &[Vec<u32>]) -> Result<Vec<SeqScore>> {
            Ok((0..seqs.len())
                .map(|i| SeqScore {
                    word_nll: if i % CLOZE_CHOICES == 0 {
                        f64::NEG_INFINITY
                    } else {
                        1.0
                    },
                    words: 1,
                    eos_nll: 0.0,
                })
                .collect())
        }
    }

    #[test]
    fn oracle_uniform_and_random_scorers() {
        let corpus = synth(2500);
        let vocab = build_vocabulary(&corpus, 1000).unwrap();
        let set = build_cloze_set(&corpus, 2000, 1).unwrap();
        assert_eq!(
            cloze_accuracy(&mut Oracle, &vocab, &set).unwrap().accuracy,
            1.0
        );
        let uniform = cloze_accuracy(
            &mut UniformScorer {
                vocab_size: vocab.len(),
            },
            &vocab,
            &set,
        )
        .unwrap();
        assert_eq!(uniform.correct, 0, "ties count as misses");
        let r = cloze_accuracy(&mut RandomScorer::new(1), &vocab, &set).unwrap();
        // Binomial(2000, 1/6): sd is about 0.83 points; 2.58 sd is about 2.15.
        assert!((r.accuracy - 1.0 / 6.0).abs() < 0.0215, "{}", r.accuracy);
    }

    #[test]
    fn export_writes_candidates_and_labels() {
        let corpus = synth(40);
        let set = build_cloze_set(&corpus, 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c, l) = (dir.path().join("c.tsv"), dir.path().join("c.labels"));
        export_cloze(&set, &c, &l).unwrap();
        let back = crate::corpus::read_corpus(&c).unwrap();
        assert_eq!(back.len(), 18);
        assert_eq!(back[6], set[1].legit);
        let labels = fs::read_to_string(&l).unwrap();
        assert_eq!(labels.lines().filter(|l| l.ends_with("\tlegit")).count(), 3);
    }

    fn probe_model() -> (Model<f64>, Vocabulary, Vec<EventSequence>) {
        let corpus = synth(20);
        let vocab = build_vocabulary(&corpus, 1000).unwrap();
        let cfg = HaqaeConfig {
            latents: 3,
            codes: 5,
            latent_dim: 6,
            enc_hidden: 6,
            dec_hidden: 8,
            word_dim: 6,
            ..HaqaeConfig::desk(Variant::Haqae)
        };
        (build_variant(&cfg, vocab.len()).unwrap(), vocab, corpus)
    }

    #[test]
    fn same_value_probe_is_a_no_op() {
        let (m, vocab, corpus) = probe_model();
        let codes = m
            .infer_codes(&vocab.encode_words(&corpus[0]).unwrap())
            .unwrap();
        for mode in [ProbeMode::Frozen, ProbeMode::Recompute] {
            for (i, &c) in codes.iter().enumerate() {
                let r = latent_probe(&m, &vocab, &corpus[0], i, c, mode).unwrap();
                assert_eq!(r.edit_distance, 0);
                assert_eq!(r.base, r.regenerated);
                assert!(r.base.len() <= corpus[0].len());
            }
        }
    }

    #[test]
    fn probes_are_deterministic_and_validated() {
        let (m, vocab, corpus) = probe_model();
        let a = probe_sweep(&m, &vocab, &corpus[..5], ProbeMode::Recompute, 8).unwrap();
        let b = probe_sweep(&m, &vocab, &corpus[..5], ProbeMode::Recompute, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 15);
        assert!(a.0.iter().all(|r| r.new_value != r.old_value));
        assert!(latent_probe(&m, &vocab, &corpus[0], 3, 0, ProbeMode::Frozen).is_err());
        assert!(latent_probe(&m, &vocab, &corpus[0], 0, 5, ProbeMode::Frozen).is_err());
    }

    #[test]
    fn frozen_probe_changes_only_one_code() {
        let (m, vocab, corpus) = probe_model();
        let r = latent_probe(&m, &vocab, &corpus[1], 0, 4, ProbeMode::Frozen).unwrap();
        assert_eq!(r.probed_codes[1..], r.base_codes[1..]);
        assert_eq!(r.probed_codes[0], 4);
    }

    #[test]
    fn table_aligns_columns() {
        let t = render_table(&["model", "ppl"], &[vec!["haqae".into(), "12.5".into()]]);
        assert_eq!(t, "model   ppl\n-----  ----\nhaqae  12.5\n");
    }
}
