//! Line-delimited corpus files.
//!
//! One sequence per line: `source_id TAB v|s|o|p TAB v|s|o|p ...`, UTF-8,
//! with `null` for an absent preposition. Blank lines are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::synth::SequenceLabel;
use super::{EventSequence, EventTuple};
use crate::error::{Error, Result};

pub fn parse_corpus_line(line: &str, line_no: usize) -> Result<EventSequence> {
    let err = |msg: String| Error::Parse { line: line_no, msg };
    let mut fields = line.split('\t');
    let source_id = fields.next().unwrap_or_default();
    if source_id.is_empty() {
        return Err(err("missing source id".into()));
    }
    let mut events = Vec::new();
    for (i, field) in fields.enumerate() {
        let slots: Vec<&str> = field.split('|').collect();
        let slots: [&str; 4] = slots.as_slice().try_into().map_err(|_| {
            err(format!(
                "event {} has {} slots, expected 4: {field:?}",
                i + 1,
                slots.len()
            ))
        })?;
        if let Some(j) = slots.iter().position(|s| s.is_empty()) {
            return Err(err(format!("event {} has an empty slot {j}", i + 1)));
        }
        events.push(EventTuple::from_slots(slots));
    }
    if events.is_empty() {
        return Err(err("sequence has no events".into()));
    }
    Ok(EventSequence {
        source_id: source_id.to_string(),
        events,
    })
}

pub fn read_corpus_from<R: Read>(reader: R) -> Result<Vec<EventSequence>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_corpus_line(line, i + 1)?);
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<EventSequence>> {
    read_corpus_from(File::open(path)?)
}

pub fn write_corpus_to<W: Write>(corpus: &[EventSequence], writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for seq in corpus {
        w.write_all(seq.source_id.as_bytes())?;
        for ev in &seq.events {
            write!(w, "\t{}", ev.slots().join("|"))?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_corpus(corpus: &[EventSequence], path: impl AsRef<Path>) -> Result<()> {
    write_corpus_to(corpus, File::create(path)?)
}

/// Sidecar for synthetic corpora: `source_id TAB topic TAB track TAB
/// stage choices TAB noise positions` with comma-separated lists.
pub fn write_labels(labels: &[(String, SequenceLabel)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, l) in labels {
        let join = |xs: &[usize]| {
            xs.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(
            w,
            "{id}\t{}\t{}\t{}\t{}",
            l.topic,
            l.track,
            join(&l.stages),
            join(&l.noise_positions)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<(String, SequenceLabel)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err("label line needs 5 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
        let list = |s: &str| -> Result<Vec<usize>> {
            if s.is_empty() {
                Ok(vec![])
            } else {
                s.split(',').map(num).collect()
            }
        };
        out.push((
            f[0].to_string(),
            SequenceLabel {
                topic: num(f[1])?,
                track: num(f[2])?,
                stages: list(f[3])?,
                noise_positions: list(f[4])?,
            },
        ));
    }
    Ok(out)
}
