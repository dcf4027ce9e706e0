//! Events, labeled event sequences and the JSONL dataset format.
//!
//! A dataset file holds one sequence per line:
//!
//! ```text
//! {"id":"s1","events":["Emma felt hungry.", "..."],"labels":[true,false,...],"split":"validation"}
//! ```
//!
//! Story corpora (unlabeled) use the same record without `labels` and `split`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("event text is empty")]
    Empty,
    #[error("event text contains a line break")]
    Multiline,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("sequence {0}: label count does not match events - 1")]
    LabelLengthMismatch(String),
    #[error("sequence {0}: contains an empty event")]
    EmptyEvent(String),
    #[error("sequence {0}: needs at least two events")]
    TooFewEvents(String),
    #[error("sequence {0}: not labeled")]
    UnlabeledSequence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single free-text event. Always trimmed, non-empty and single-line.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Event(String);

impl Event {
    pub fn new(text: impl AsRef<str>) -> Result<Self, EventError> {
        let trimmed = text.as_ref().trim();
        if trimmed.is_empty() {
            return Err(EventError::Empty);
        }
        if trimmed.contains(['\n', '\r']) {
            return Err(EventError::Multiline);
        }
        Ok(Event(trimmed.to_owned()))
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Event {
    type Error = EventError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Event::new(value)
    }
}

impl From<Event> for String {
    fn from(e: Event) -> String {
        e.0
    }
}

impl AsRef<str> for Event {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Testing,
    Unsplit,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Testing => "testing",
            Split::Unsplit => "unsplit",
        }
    }
}

/// Ordered events `E1..En`. `labels[i]` says whether event `i + 1` (1-based)
/// causes the final event. An empty label list marks an unlabeled story.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSequence {
    pub id: String,
    pub events: Vec<Event>,
    pub labels: Vec<bool>,
    pub split: Split,
}

impl EventSequence {
    pub fn new(
        id: impl Into<String>,
        events: Vec<Event>,
        labels: Vec<bool>,
        split: Split,
    ) -> Result<Self, DatasetError> {
        let id = id.into();
        if events.len() < 2 {
            return Err(DatasetError::TooFewEvents(id));
        }
        if !labels.is_empty() && labels.len() != events.len() - 1 {
            return Err(DatasetError::LabelLengthMismatch(id));
        }
        Ok(EventSequence { id, events, labels, split })
    }

    /// Unlabeled story, as found in a raw corpus.
    pub fn story(id: impl Into<String>, events: Vec<Event>) -> Result<Self, DatasetError> {
        Self::new(id, events, Vec::new(), Split::Unsplit)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.len() + 1 == self.events.len()
    }

    /// Number of gold causes of the final event.
    pub fn k(&self) -> Option<usize> {
        self.is_labeled().then(|| self.labels.iter().filter(|&&l| l).count())
    }

    /// Event by 1-based index.
    pub fn event(&self, index: usize) -> &Event {
        &self.events[index - 1]
    }

    pub fn last(&self) -> &Event {
        self.events.last().expect("sequence has at least two events")
    }

    /// Candidate pairs `(E_i, E_n)` for `i` in `1..n`.
    pub fn pairs(&self) -> Vec<EventPair> {
        let n = self.events.len();
        (1..n)
            .map(|i| EventPair {
                sequence_id: self.id.clone(),
                cause_index: i,
                effect_index: n,
                gold: self.labels.get(i - 1).copied(),
            })
            .collect()
    }
}

/// A (cause candidate, final event) pair inside a sequence, 1-based indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventPair {
    pub sequence_id: String,
    pub cause_index: usize,
    pub effect_index: usize,
    pub gold: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    id: String,
    events: Vec<String>,
    labels: Vec<bool>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct StoryRecord {
    id: String,
    events: Vec<String>,
}

fn malformed(line: usize, reason: impl ToString) -> DatasetError {
    DatasetError::MalformedRecord { line, reason: reason.to_string() }
}

fn to_events(id: &str, raw: Vec<String>) -> Result<Vec<Event>, DatasetError> {
    raw.into_iter().map(|t| Event::new(t).map_err(|_| DatasetError::EmptyEvent(id.to_owned()))).collect()
}

/// Parse labeled sequences from JSONL. Blank lines are skipped.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<EventSequence>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| malformed(lineno, e))?;
        if rec.events.len() >= 2 && rec.labels.len() + 1 != rec.events.len() {
            return Err(DatasetError::LabelLengthMismatch(rec.id));
        }
        let events = to_events(&rec.id, rec.events)?;
        out.push(EventSequence::new(rec.id, events, rec.labels, rec.split)?);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<EventSequence>, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file))
}

/// Write sequences in canonical form (one compact record per line).
pub fn write_dataset<W: Write>(mut w: W, data: &[EventSequence]) -> Result<(), DatasetError> {
    for seq in data {
        let rec = DatasetRecord {
            id: seq.id.clone(),
            events: seq.events.iter().map(|e| e.text().to_owned()).collect(),
            labels: seq.labels.clone(),
            split: seq.split,
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_stories<R: BufRead>(reader: R) -> Result<Vec<EventSequence>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoryRecord = serde_json::from_str(&line).map_err(|e| malformed(i + 1, e))?;
        let events = to_events(&rec.id, rec.events)?;
        out.push(EventSequence::story(rec.id, events)?);
    }
    Ok(out)
}

pub fn load_stories(path: impl AsRef<Path>) -> Result<Vec<EventSequence>, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_stories(std::io::BufReader::new(file))
}

/// All candidate pairs of a dataset, sorted by `(sequence_id, cause_index)`.
pub fn enumerate_pairs(data: &[EventSequence]) -> Vec<EventPair> {
    let mut pairs: Vec<EventPair> = data.iter().flat_map(EventSequence::pairs).collect();
    pairs.sort_by(|a, b| (&a.sequence_id, a.cause_index).cmp(&(&b.sequence_id, b.cause_index)));
    pairs
}

/// Breakdown of a labeled dataset by number of gold causes `k`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub per_k: BTreeMap<usize, usize>,
    pub positives: usize,
    pub negatives: usize,
    /// Distinct candidate counts (`n - 1`) seen across sequences.
    pub candidate_counts: BTreeSet<usize>,
}

impl SplitCounts {
    pub fn sequences(&self) -> usize {
        self.per_k.values().sum()
    }

    pub fn pairs(&self) -> usize {
        self.positives + self.negatives
    }
}

pub fn split_counts(data: &[EventSequence]) -> Result<SplitCounts, DatasetError> {
    let mut counts = SplitCounts::default();
    for seq in data {
        let k = seq.k().ok_or_else(|| DatasetError::UnlabeledSequence(seq.id.clone()))?;
        *counts.per_k.entry(k).or_default() += 1;
        counts.positives += k;
        counts.negatives += seq.labels.len() - k;
        counts.candidate_counts.insert(seq.labels.len());
    }
    Ok(counts)
}
