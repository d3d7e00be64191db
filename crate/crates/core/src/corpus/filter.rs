use std::collections::BTreeSet;

use super::{EventSequence, EventTuple};
use crate::error::{Error, Result};

pub const DEFAULT_STOP_PREDICATES: [&str; 9] = [
    "is", "are", "be", "was", "were", "has", "have", "had", "said",
];

#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub stop_predicates: BTreeSet<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_len: 8,
            max_len: 50,
            stop_predicates: DEFAULT_STOP_PREDICATES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Drops stop-predicate events, collapses consecutive repeats of the same
/// predicate, then keeps sequences whose flat length lies in
/// `[min_len, max_len]` (separators counted, EOS not).
pub fn filter_corpus(corpus: &[EventSequence], cfg: &FilterConfig) -> Result<Vec<EventSequence>> {
    if cfg.min_len > cfg.max_len {
        return Err(Error::Invalid(format!(
            "min_len {} exceeds max_len {}",
            cfg.min_len, cfg.max_len
        )));
    }
    Ok(corpus
        .iter()
        .filter_map(|seq| {
            let mut events: Vec<EventTuple> = Vec::with_capacity(seq.events.len());
            for ev in &seq.events {
                if cfg.stop_predicates.contains(&ev.verb) {
                    continue;
                }
                if events.last().is_some_and(|prev| prev.verb == ev.verb) {
                    continue;
                }
                events.push(ev.clone());
            }
            let out = EventSequence {
                source_id: seq.source_id.clone(),
                events,
            };
            let n = out.token_length();
            (n >= cfg.min_len && n <= cfg.max_len).then_some(out)
        })
        .collect())
}

/// Lower-cases each slot and truncates multi-word slots to their last word
/// (the head of an English noun or verb phrase). Empty prepositions become
/// `null`; other empty slots are an error.
pub fn normalize_event(slots: [&str; 4]) -> Result<EventTuple> {
    let head = |s: &str| s.split_whitespace().last().map(str::to_lowercase);
    let mut out: [String; 4] = Default::default();
    for (i, s) in slots.iter().enumerate() {
        out[i] = match head(s) {
            Some(h) => h,
            None if i == 3 => super::NULL_TOKEN.to_string(),
            None => return Err(Error::Invalid(format!("empty slot {i} in event {slots:?}"))),
        };
    }
    Ok(EventTuple::new(&out[0], &out[1], &out[2], Some(&out[3])))
}
