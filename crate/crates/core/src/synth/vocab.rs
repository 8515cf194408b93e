//! Code vocabulary with channel-prefixed code strings.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{data_err, usage_err, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[UNK]", "[SEP]"];
const VOCAB_HEADER: &str = "# pcb-vocab v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Special,
    Diagnosis,
    Medication,
    Procedure,
    Test,
    MeasurementBucket,
    Lifestyle,
}

impl Channel {
    pub fn prefix(self) -> &'static str {
        match self {
            Channel::Special => "",
            Channel::Diagnosis => "DX:",
            Channel::Medication => "MED:",
            Channel::Procedure => "PROC:",
            Channel::Test => "TEST:",
            Channel::MeasurementBucket => "MEAS:",
            Channel::Lifestyle => "LIFE:",
        }
    }

    pub fn of_code(code: &str) -> Option<Channel> {
        if SPECIALS.contains(&code) {
            return Some(Channel::Special);
        }
        [
            Channel::Diagnosis,
            Channel::Medication,
            Channel::Procedure,
            Channel::Test,
            Channel::MeasurementBucket,
            Channel::Lifestyle,
        ]
        .into_iter()
        .find(|c| code.starts_with(c.prefix()) && code.len() > c.prefix().len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabEntry {
    pub id: usize,
    pub code: String,
    pub channel: Channel,
}

/// Dense id ↔ code mapping. Ids 0..4 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeVocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
}

impl Default for CodeVocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl CodeVocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string(), Channel::Special);
        }
        v
    }

    fn push(&mut self, code: String, channel: Channel) -> usize {
        let id = self.entries.len();
        self.index.insert(code.clone(), id);
        self.entries.push(VocabEntry { id, code, channel });
        id
    }

    /// Adds a code (or returns its existing id). The channel is taken from the prefix.
    pub fn insert(&mut self, code: &str) -> Result<usize> {
        if let Some(&id) = self.index.get(code) {
            return Ok(id);
        }
        let channel = Channel::of_code(code)
            .ok_or_else(|| usage_err(format!("code `{code}` has no channel prefix")))?;
        Ok(self.push(code.to_string(), channel))
    }

    pub fn id(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Id of a code, mapping unknown codes to UNK.
    pub fn id_or_unk(&self, code: &str) -> usize {
        self.id(code).unwrap_or(UNK)
    }

    pub fn code(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|e| e.code.as_str())
    }

    pub fn entry(&self, id: usize) -> Option<&VocabEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{VOCAB_HEADER}")?;
        for e in &self.entries {
            writeln!(w, "{}\t{}", e.id, e.code)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim_end() == VOCAB_HEADER => {}
            Some(Ok(h)) => return Err(data_err(format!("unsupported vocabulary header `{h}`"))),
            Some(Err(e)) => return Err(e.into()),
            None => return Err(data_err("empty vocabulary file")),
        }
        let mut v = Self {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, code) = line
                .split_once('\t')
                .ok_or_else(|| data_err(format!("vocabulary line {}: expected `id<TAB>code`", n + 2)))?;
            let id: usize = id
                .parse()
                .map_err(|_| data_err(format!("vocabulary line {}: bad id `{id}`", n + 2)))?;
            if id != v.entries.len() {
                return Err(data_err(format!(
                    "vocabulary ids must be dense, expected {} got {id}",
                    v.entries.len()
                )));
            }
            if v.index.contains_key(code) {
                return Err(data_err(format!("duplicate code `{code}` in vocabulary")));
            }
            let channel = Channel::of_code(code)
                .ok_or_else(|| data_err(format!("code `{code}` has no channel prefix")))?;
            v.push(code.to_string(), channel);
        }
        if v.entries.len() < SPECIALS.len()
            || v.entries[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(e, s)| e.code != s)
        {
            return Err(data_err("vocabulary must start with the special tokens"));
        }
        Ok(v)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Channel::Special => "special",
            Channel::Diagnosis => "diagnosis",
            Channel::Medication => "medication",
            Channel::Procedure => "procedure",
            Channel::Test => "test",
            Channel::MeasurementBucket => "measurement-bucket",
            Channel::Lifestyle => "lifestyle",
        };
        f.write_str(s)
    }
}
