//! Event tuples, their flat token rendering, and corpus handling.
//!
//! An event is a `(verb, subject, object, preposition)` 4-tuple. A
//! sequence of events is rendered as one flat token stream with the
//! reserved separator `tup` between events and `null` for a missing
//! preposition:
//!
//! ```
//! use haqae::corpus::{tokenize_events, EventSequence, EventTuple};
//!
//! let seq = EventSequence::new(
//!     "doc-1",
//!     vec![
//!         EventTuple::new("played", "he", "harp", None),
//!         EventTuple::new("touched", "he", "moon", None),
//!     ],
//! );
//! assert_eq!(
//!     tokenize_events(&seq).unwrap().join(" "),
//!     "played he harp null tup touched he moon null"
//! );
//! ```

mod filter;
mod io;
mod synth;
mod vocab;

pub use filter::{filter_corpus, normalize_event, FilterConfig, DEFAULT_STOP_PREDICATES};
pub use io::{
    parse_corpus_line, read_corpus, read_corpus_from, read_labels, write_corpus, write_corpus_to,
    write_labels,
};
pub use synth::{
    default_grammar, generate_synthetic_corpus, LabeledSequence, SequenceLabel, SyntheticGrammar,
    Topic, Track, DEFAULT_GRAMMAR_TOML,
};
pub use vocab::{build_vocabulary, Vocabulary};

use std::fmt;

use crate::error::{Error, Result};

pub const NULL_TOKEN: &str = "null";
pub const SEP_TOKEN: &str = "tup";
pub const EOS_TOKEN: &str = "</s>";

/// Flat tokens per event, excluding the separator.
pub const SLOTS_PER_EVENT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EventTuple {
    pub verb: String,
    pub subject: String,
    pub object: String,
    /// `None` renders as the `null` token.
    pub preposition: Option<String>,
}

impl EventTuple {
    pub fn new(verb: &str, subject: &str, object: &str, preposition: Option<&str>) -> Self {
        Self {
            verb: verb.to_string(),
            subject: subject.to_string(),
            object: object.to_string(),
            preposition: preposition.filter(|p| *p != NULL_TOKEN).map(str::to_string),
        }
    }

    /// Builds an event from four slot tokens, mapping `null` to `None`.
    pub fn from_slots(slots: [&str; 4]) -> Self {
        Self::new(slots[0], slots[1], slots[2], Some(slots[3]))
    }

    pub fn slots(&self) -> [&str; 4] {
        [
            &self.verb,
            &self.subject,
            &self.object,
            self.preposition.as_deref().unwrap_or(NULL_TOKEN),
        ]
    }
}

impl fmt::Display for EventTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.slots().join(", "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventSequence {
    pub source_id: String,
    pub events: Vec<EventTuple>,
}

impl EventSequence {
    pub fn new(source_id: &str, events: Vec<EventTuple>) -> Self {
        Self {
            source_id: source_id.to_string(),
            events,
        }
    }

    /// Flat token count including separators, excluding EOS.
    pub fn token_length(&self) -> usize {
        token_length(self.events.len())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Flat length of `n` events: four slots each plus `n - 1` separators.
pub fn token_length(n_events: usize) -> usize {
    if n_events == 0 {
        0
    } else {
        n_events * (SLOTS_PER_EVENT + 1) - 1
    }
}

/// Renders `seq` as `v s o p tup v s o p ...`. EOS is not included; the
/// vocabulary appends it when encoding for a model.
pub fn tokenize_events(seq: &EventSequence) -> Result<Vec<&str>> {
    if seq.events.is_empty() {
        return Err(Error::Empty("event sequence"));
    }
    let mut out = Vec::with_capacity(seq.token_length());
    for (i, ev) in seq.events.iter().enumerate() {
        if i > 0 {
            out.push(SEP_TOKEN);
        }
        out.extend_from_slice(&ev.slots());
    }
    Ok(out)
}

/// Inverse of [`tokenize_events`]. A trailing EOS token is ignored.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<EventTuple>> {
    let mut toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    if toks.last() == Some(&EOS_TOKEN) {
        toks.pop();
    }
    if toks.is_empty() {
        return Err(Error::Empty("token list"));
    }
    toks.split(|t| *t == SEP_TOKEN)
        .map(|group| {
            let slots: [&str; 4] = group.try_into().map_err(|_| {
                Error::Invalid(format!(
                    "event needs {SLOTS_PER_EVENT} slots, got {}: {:?}",
                    group.len(),
                    group
                ))
            })?;
            Ok(EventTuple::from_slots(slots))
        })
        .collect()
}
