//! Slot-aware constrained generation over any autoregressive scorer.
//!
//! Output follows the `v s o p tup v s o p ...` cycle. Reserved tokens are
//! never emitted except `null` at preposition slots; after each event only
//! `tup` (continue) or `</s>` (stop) is allowed.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EventSequence, EventTuple, Vocabulary};
use crate::error::{Error, Result};

/// A model that yields next-token logits one step at a time.
pub trait Autoregressive {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial_state(&self) -> Result<Self::State>;

    /// Consumes `token` and returns logits for the following position.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationConstraints {
    pub forbid_repeated_predicates: bool,
    pub forbid_equal_subject_object: bool,
    /// Upper bound on newly generated events.
    pub max_events: usize,
}

impl Default for GenerationConstraints {
    fn default() -> Self {
        Self {
            forbid_repeated_predicates: true,
            forbid_equal_subject_object: true,
            max_events: 6,
        }
    }
}

impl GenerationConstraints {
    pub fn unconstrained(max_events: usize) -> Self {
        Self {
            forbid_repeated_predicates: false,
            forbid_equal_subject_object: false,
            max_events,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    /// Temperature-1 ancestral sampling.
    Sample {
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Verb,
    Subject,
    Object,
    Preposition,
    Boundary,
}

impl Slot {
    const EVENT: [Slot; 4] = [Slot::Verb, Slot::Subject, Slot::Object, Slot::Preposition];

    fn name(self) -> &'static str {
        match self {
            Slot::Verb => "verb",
            Slot::Subject => "subject",
            Slot::Object => "object",
            Slot::Preposition => "preposition",
            Slot::Boundary => "event boundary",
        }
    }
}

/// What earlier slots imply for the masks of later ones.
#[derive(Clone, Debug, Default)]
pub struct MaskState {
    pub used_verbs: BTreeSet<u32>,
    pub subject: Option<u32>,
}

/// Sets disallowed logits to `-inf`.
pub fn apply_mask(logits: &mut [f64], slot: Slot, state: &MaskState, c: &GenerationConstraints) {
    let n = logits.len();
    let mut ban = |id: u32| {
        if (id as usize) < n {
            logits[id as usize] = f64::NEG_INFINITY;
        }
    };
    if slot == Slot::Boundary {
        for id in 0..n as u32 {
            if id != Vocabulary::SEP && id != Vocabulary::EOS {
                ban(id);
            }
        }
        return;
    }
    for id in 0..Vocabulary::RESERVED.len() as u32 {
        if !(slot == Slot::Preposition && id == Vocabulary::NULL) {
            ban(id);
        }
    }
    match slot {
        Slot::Verb if c.forbid_repeated_predicates => state.used_verbs.iter().for_each(|&v| ban(v)),
        Slot::Object if c.forbid_equal_subject_object => {
            if let Some(s) = state.subject {
                ban(s);
            }
        }
        _ => {}
    }
}

fn choose(logits: &[f64], slot: Slot, rng: Option<&mut ChaCha8Rng>) -> Result<u32> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::ConstraintSaturated(slot.name()));
    }
    let Some(rng) = rng else {
        let i = logits.iter().position(|&l| l == max).expect("max exists");
        return Ok(i as u32);
    };
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return Ok(i as u32);
            }
            u -= w;
            last = i;
        }
    }
    Ok(last as u32)
}

/// Feeds `prefix` after the start token, then generates up to
/// `max_events` further events. Returns only the new events.
pub fn continue_events<M: Autoregressive>(
    model: &M,
    vocab: &Vocabulary,
    prefix: &[EventTuple],
    constraints: &GenerationConstraints,
    mode: DecodeMode,
) -> Result<Vec<EventTuple>> {
    if constraints.max_events == 0 {
        return Err(Error::Config("max_events must be at least 1".into()));
    }
    if model.vocab_size() != vocab.len() {
        return Err(Error::Invalid(format!(
            "model vocabulary {} differs from {}",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let mut rng = match mode {
        DecodeMode::Greedy => None,
        DecodeMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut state = model.initial_state()?;
    let mut logits = model.step(&mut state, Vocabulary::START)?;
    let mut mask = MaskState::default();
    for ev in prefix {
        for tok in ev.slots() {
            model.step(&mut state, vocab.encode(tok))?;
        }
        mask.used_verbs.insert(vocab.encode(&ev.verb));
        logits = model.step(&mut state, Vocabulary::SEP)?;
    }

    let mut out = Vec::new();
    loop {
        let mut ids = [0u32; 4];
        for (k, slot) in Slot::EVENT.into_iter().enumerate() {
            apply_mask(&mut logits, slot, &mask, constraints);
            let id = choose(&logits, slot, rng.as_mut())?;
            match slot {
                Slot::Verb => {
                    mask.used_verbs.insert(id);
                }
                Slot::Subject => mask.subject = Some(id),
                _ => {}
            }
            ids[k] = id;
            logits = model.step(&mut state, id)?;
        }
        out.push(EventTuple::from_slots(ids.map(|i| vocab.decode(i))));
        mask.subject = None;
        if out.len() >= constraints.max_events {
            break;
        }
        apply_mask(&mut logits, Slot::Boundary, &mask, constraints);
        if choose(&logits, Slot::Boundary, rng.as_mut())? == Vocabulary::EOS {
            break;
        }
        logits = model.step(&mut state, Vocabulary::SEP)?;
    }
    Ok(out)
}

/// Continues a two-event seed. The result holds the seed followed by the
/// generated events.
pub fn generate<M: Autoregressive>(
    model: &M,
    vocab: &Vocabulary,
    seed_events: &[EventTuple],
    constraints: &GenerationConstraints,
    mode: DecodeMode,
) -> Result<EventSequence> {
    if seed_events.len() != 2 {
        return Err(Error::Invalid(format!(
            "a seed is two events, got {}",
            seed_events.len()
        )));
    }
    let new = continue_events(model, vocab, seed_events, constraints, mode)?;
    let mut events = seed_events.to_vec();
    events.extend(new);
    Ok(EventSequence::new("generated", events))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let words = ["ate", "ran", "man", "dog", "park", "in", "saw", "cat"];
        Vocabulary::from_tokens(
            Vocabulary::RESERVED
                .iter()
                .chain(words.iter())
                .map(|s| s.to_string())
                .collect(),
        )
    }

    /// Puts all mass on a fixed cycle of tokens, advancing once per
    /// generated (non-prefix) step.
    pub(crate) struct Cycle {
        pub v: usize,
        pub cycle: Vec<u32>,
    }

    impl Autoregressive for Cycle {
        type State = usize;
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn initial_state(&self) -> Result<usize> {
            Ok(0)
        }
        fn step(&self, pos: &mut usize, _token: u32) -> Result<Vec<f64>> {
            let mut l = vec![-30.0; self.v];
            l[self.cycle[*pos % self.cycle.len()] as usize] = 30.0;
            *pos += 1;
            Ok(l)
        }
    }

    #[test]
    fn greedy_follows_forced_cycle() {
        let v = vocab();
        let e = |w: &str| v.encode(w);
        let m = Cycle {
            v: v.len(),
            cycle: vec![
                e("ate"),
                e("man"),
                e("dog"),
                Vocabulary::NULL,
                Vocabulary::SEP,
            ],
        };
        let c = GenerationConstraints::unconstrained(3);
        let out = continue_events(&m, &v, &[], &c, DecodeMode::Greedy).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out
            .iter()
            .all(|ev| *ev == EventTuple::new("ate", "man", "dog", None)));
    }

    #[test]
    fn eos_at_boundary_stops() {
        let v = vocab();
        let e = |w: &str| v.encode(w);
        let m = Cycle {
            v: v.len(),
            cycle: vec![e("ate"), e("man"), e("dog"), e("in"), Vocabulary::EOS],
        };
        let out = continue_events(
            &m,
            &v,
            &[],
            &GenerationConstraints::default(),
            DecodeMode::Greedy,
        )
        .unwrap();
        assert_eq!(out, [EventTuple::new("ate", "man", "dog", Some("in"))]);
    }

    #[test]
    fn used_predicate_is_masked_at_verb_slots() {
        let v = vocab();
        let mut state = MaskState::default();
        state.used_verbs.insert(v.encode("ran"));
        let c = GenerationConstraints::default();
        let mut logits = vec![0.0; v.len()];
        apply_mask(&mut logits, Slot::Verb, &state, &c);
        assert_eq!(logits[v.encode("ran") as usize], f64::NEG_INFINITY);
        assert_eq!(logits[v.encode("ate") as usize], 0.0);
        assert!(logits[..Vocabulary::RESERVED.len()].iter().all(|&l| l == f64::NEG_INFINITY));
    }

    #[test]
    fn repeated_predicate_is_replaced_by_next_best() {
        let v = vocab();
        let e = |w: &str| v.encode(w);
        // Always prefers "ate", with "saw" second.
        struct Pref(usize, u32, u32, u32);
        impl Autoregressive for Pref {
            type State = ();
            fn vocab_size(&self) -> usize {
                self.0
            }
            fn initial_state(&self) -> Result<()> {
                Ok(())
            }
            fn step(&self, _: &mut (), _: u32) -> Result<Vec<f64>> {
                let mut l = vec![0.0; self.0];
                l[self.1 as usize] = 5.0;
                l[self.2 as usize] = 4.0;
                l[self.3 as usize] = 3.0;
                l[Vocabulary::SEP as usize] = 6.0;
                Ok(l)
            }
        }
        let m = Pref(v.len(), e("ate"), e("saw"), e("man"));
        let seed = [
            EventTuple::new("ate", "man", "dog", None),
            EventTuple::new("ran", "dog", "park", None),
        ];
        let out = generate(
            &m,
            &v,
            &seed,
            &GenerationConstraints {
                max_events: 2,
                ..Default::default()
            },
            DecodeMode::Greedy,
        )
        .unwrap();
        assert_eq!(out.events.len(), 4);
        assert_eq!(out.events[2].verb, "saw");
        assert_eq!(out.events[3].verb, "man");
        // Subject "ate" would be the top choice; object must differ from it.
        for ev in &out.events[2..] {
            assert_ne!(ev.subject, ev.object);
        }
    }

    #[test]
    fn exhausted_verbs_signal_saturation() {
        let v = vocab();
        let m = Cycle {
            v: v.len(),
            cycle: vec![Vocabulary::SEP],
        };
        let c = GenerationConstraints {
            max_events: 50,
            ..Default::default()
        };
        let err = continue_events(&m, &v, &[], &c, DecodeMode::Greedy).unwrap_err();
        assert!(matches!(err, Error::ConstraintSaturated("verb")), "{err}");
    }

    #[test]
    fn seeded_sampling_is_reproducible_and_masked() {
        let v = vocab();
        struct Flat(usize);
        impl Autoregressive for Flat {
            type State = ();
            fn vocab_size(&self) -> usize {
                self.0
            }
            fn initial_state(&self) -> Result<()> {
                Ok(())
            }
            fn step(&self, _: &mut (), _: u32) -> Result<Vec<f64>> {
                Ok(vec![0.0; self.0])
            }
        }
        let c = GenerationConstraints {
            max_events: 3,
            ..Default::default()
        };
        let run = |seed| {
            continue_events(&Flat(v.len()), &v, &[], &c, DecodeMode::Sample { seed }).unwrap()
        };
        assert_eq!(run(4), run(4));
        for seed in 0..50 {
            let out = run(seed);
            let mut verbs = BTreeSet::new();
            for ev in &out {
                assert!(verbs.insert(ev.verb.clone()));
                assert_ne!(ev.subject, ev.object);
                for tok in &ev.slots()[..3] {
                    assert!(!Vocabulary::RESERVED.contains(tok), "{tok}");
                }
            }
        }
    }

    #[test]
    fn seed_must_be_two_events() {
        let v = vocab();
        let m = Cycle {
            v: v.len(),
            cycle: vec![6],
        };
        let one = [EventTuple::new("ate", "man", "dog", None)];
        assert!(generate(
            &m,
            &v,
            &one,
            &GenerationConstraints::default(),
            DecodeMode::Greedy
        )
        .is_err());
    }
}
