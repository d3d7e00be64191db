//! Synthetic multi-track script corpora with known ground truth.
//!
//! A grammar has topics; each topic has tracks chosen with fixed
//! probabilities; each track is an ordered list of stages and each stage a
//! list of alternative event templates. Templates are `verb subject object
//! preposition` with `@role` placeholders bound once per sequence from the
//! topic's entity pools. Noise events are inserted after a stage with
//! probability `noise_rate`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EventSequence, EventTuple};
use crate::error::{Error, Result};

pub const DEFAULT_GRAMMAR_TOML: &str = include_str!("default_grammar.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub format: u32,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub noise_events: Vec<String>,
    #[serde(rename = "topic")]
    pub topics: Vec<Topic>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub entities: BTreeMap<String, Vec<String>>,
    #[serde(rename = "track")]
    pub tracks: Vec<Track>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub name: String,
    pub probability: f64,
    pub stages: Vec<Vec<String>>,
}

fn one() -> f64 {
    1.0
}

/// Ground truth attached to each generated sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLabel {
    pub topic: usize,
    pub track: usize,
    /// Chosen alternative per stage.
    pub stages: Vec<usize>,
    /// Event positions holding inserted noise events.
    pub noise_positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub sequence: EventSequence,
    pub label: SequenceLabel,
}

pub fn default_grammar() -> SyntheticGrammar {
    SyntheticGrammar::from_toml(DEFAULT_GRAMMAR_TOML).expect("bundled grammar is valid")
}

fn template_tokens(t: &str) -> Option<[&str; 4]> {
    let toks: Vec<&str> = t.split_whitespace().collect();
    toks.try_into().ok()
}

impl SyntheticGrammar {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Grammar(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grammar serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Grammar(m));
        if self.format != 1 {
            return bad(format!("unsupported format {}", self.format));
        }
        if self.topics.is_empty() {
            return bad("no topics".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        if self.noise_rate > 0.0 && self.noise_events.is_empty() {
            return bad("noise_rate > 0 but no noise_events".into());
        }
        for t in &self.noise_events {
            match template_tokens(t) {
                Some(toks) if toks.iter().all(|s| !s.starts_with('@')) => {}
                _ => return bad(format!("noise event {t:?} must be 4 literal tokens")),
            }
        }
        for topic in &self.topics {
            if !(topic.weight > 0.0) {
                return bad(format!("topic {}: weight must be positive", topic.name));
            }
            if topic.tracks.is_empty() {
                return bad(format!("topic {}: no tracks", topic.name));
            }
            let total: f64 = topic.tracks.iter().map(|t| t.probability).sum();
            if topic.tracks.iter().any(|t| t.probability < 0.0) || (total - 1.0).abs() > 1e-9 {
                return bad(format!(
                    "topic {}: track probabilities sum to {total}, expected 1",
                    topic.name
                ));
            }
            for (role, pool) in &topic.entities {
                if pool.is_empty() {
                    return bad(format!(
                        "topic {}: entity pool @{role} is empty",
                        topic.name
                    ));
                }
            }
            for track in &topic.tracks {
                if track.stages.is_empty() {
                    return bad(format!("track {}/{}: no stages", topic.name, track.name));
                }
                for (si, stage) in track.stages.iter().enumerate() {
                    if stage.is_empty() {
                        return bad(format!(
                            "track {}/{}: stage {si} has no alternatives",
                            topic.name, track.name
                        ));
                    }
                    for tpl in stage {
                        let Some(toks) = template_tokens(tpl) else {
                            return bad(format!("template {tpl:?} must have 4 tokens"));
                        };
                        for tok in toks {
                            if let Some(role) = tok.strip_prefix('@') {
                                if !topic.entities.contains_key(role) {
                                    return bad(format!(
                                        "template {tpl:?} uses undefined role @{role}"
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn categorical(rng: &mut ChaCha8Rng, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if u < w {
            return i;
        }
        u -= w;
        if w > 0.0 {
            last = i;
        }
    }
    last
}

/// Samples `n` labeled sequences; identical `(grammar, n, seed)` give
/// identical output.
pub fn generate_synthetic_corpus(
    grammar: &SyntheticGrammar,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledSequence>> {
    grammar.validate()?;
    if n == 0 {
        return Err(Error::Invalid("requested 0 sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ti = categorical(&mut rng, grammar.topics.iter().map(|t| t.weight));
        let topic = &grammar.topics[ti];
        let ki = categorical(&mut rng, topic.tracks.iter().map(|t| t.probability));
        let track = &topic.tracks[ki];

        let bindings: BTreeMap<&str, &str> = topic
            .entities
            .iter()
            .map(|(role, pool)| (role.as_str(), pool[rng.gen_range(0..pool.len())].as_str()))
            .collect();

        let mut events = Vec::new();
        let mut stages = Vec::with_capacity(track.stages.len());
        let mut noise_positions = Vec::new();
        for stage in &track.stages {
            let ai = rng.gen_range(0..stage.len());
            stages.push(ai);
            let toks = template_tokens(&stage[ai]).expect("validated");
            let slots = toks.map(|t| t.strip_prefix('@').map_or(t, |r| bindings[r]));
            events.push(EventTuple::from_slots(slots));

            if grammar.noise_rate > 0.0 && rng.gen::<f64>() < grammar.noise_rate {
                let ni = rng.gen_range(0..grammar.noise_events.len());
                let toks = template_tokens(&grammar.noise_events[ni]).expect("validated");
                noise_positions.push(events.len());
                events.push(EventTuple::from_slots(toks));
            }
        }
        out.push(LabeledSequence {
            sequence: EventSequence::new(&format!("synth-{i:06}"), events),
            label: SequenceLabel {
                topic: ti,
                track: ki,
                stages,
                noise_positions,
            },
        });
    }
    Ok(out)
}
