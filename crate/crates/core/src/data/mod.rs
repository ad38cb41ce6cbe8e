//! Byte vocabulary, diagnostic task generators, span corruption and batching.

mod span;
mod tasks;
mod vocab;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use span::{noise_mask, reconstruct, span_corrupt, span_corrupt_ids};
pub use tasks::{
    contextual_vowel_example, contextual_vowel_rule, example_rng, is_lower_consonant, is_vowel, merge_rule,
    sequence_merge_example, simple_vowel_example, simple_vowel_rule, target_for, TaskExample, LETTERS, VOWELS,
};
pub use vocab::{byte_of, id_of, ByteVocab, BOS_ID, BYTE_OFFSET, EOS_ID, FIRST_SENTINEL, PAD_ID};

use crate::model::Batch;
use crate::{Error, Result};

/// `n` examples from the generator `f(seed, index)`.
pub fn gen_simple_vowel(seed: u64, count: usize) -> Vec<TaskExample> {
    (0..count as u64).map(|i| simple_vowel_example(seed, i)).collect()
}

pub fn gen_contextual_vowel(seed: u64, count: usize) -> Vec<TaskExample> {
    (0..count as u64).map(|i| contextual_vowel_example(seed, i)).collect()
}

pub fn gen_sequence_merge(seed: u64, count: usize) -> Vec<TaskExample> {
    (0..count as u64).map(|i| sequence_merge_example(seed, i)).collect()
}

fn default_chunk() -> usize {
    128
}
fn default_density() -> f64 {
    0.15
}
fn default_mean_span() -> f64 {
    20.0
}
fn default_sentinels() -> usize {
    100
}

/// Example source selected by configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    SimpleVowel,
    ContextualVowel,
    SequenceMerge,
    SpanCorruption {
        corpus: PathBuf,
        #[serde(default = "default_chunk")]
        chunk_len: usize,
        #[serde(default = "default_density")]
        density: f64,
        #[serde(default = "default_mean_span")]
        mean_span: f64,
        #[serde(default = "default_sentinels")]
        sentinels: usize,
    },
}

impl TaskSpec {
    pub fn vocab(&self) -> ByteVocab {
        match self {
            TaskSpec::SpanCorruption { sentinels, .. } => ByteVocab::new(*sentinels),
            _ => ByteVocab::new(0),
        }
    }
}

/// A loaded task: pure `(seed, index) → example`.
#[derive(Clone, Debug)]
pub enum Task {
    SimpleVowel,
    ContextualVowel,
    SequenceMerge,
    SpanCorruption { bytes: Vec<u8>, chunk_len: usize, density: f64, mean_span: f64, vocab: ByteVocab },
}

impl Task {
    pub fn load(spec: &TaskSpec) -> Result<Self> {
        Ok(match spec {
            TaskSpec::SimpleVowel => Task::SimpleVowel,
            TaskSpec::ContextualVowel => Task::ContextualVowel,
            TaskSpec::SequenceMerge => Task::SequenceMerge,
            TaskSpec::SpanCorruption { corpus, chunk_len, density, mean_span, sentinels } => {
                let bytes = fs::read(corpus)?;
                if *chunk_len < 2 || bytes.len() < *chunk_len {
                    return Err(Error::Invalid(format!(
                        "corpus {} has {} bytes, chunk length is {chunk_len}",
                        corpus.display(),
                        bytes.len()
                    )));
                }
                if *sentinels < 2 {
                    return Err(Error::Invalid("span corruption needs at least 2 sentinels".into()));
                }
                Task::SpanCorruption {
                    bytes,
                    chunk_len: *chunk_len,
                    density: *density,
                    mean_span: *mean_span,
                    vocab: ByteVocab::new(*sentinels),
                }
            }
        })
    }

    pub fn vocab(&self) -> ByteVocab {
        match self {
            Task::SpanCorruption { vocab, .. } => *vocab,
            _ => ByteVocab::new(0),
        }
    }

    pub fn example(&self, seed: u64, index: u64) -> Result<TaskExample> {
        Ok(match self {
            Task::SimpleVowel => simple_vowel_example(seed, index),
            Task::ContextualVowel => contextual_vowel_example(seed, index),
            Task::SequenceMerge => sequence_merge_example(seed, index),
            Task::SpanCorruption { bytes, chunk_len, density, mean_span, vocab } => {
                let mut rng = example_rng(seed, index);
                let start = rng.random_range(0..=bytes.len() - chunk_len);
                let mask = noise_mask(&mut rng, *chunk_len, *density, *mean_span, vocab.sentinels - 1)?;
                span_corrupt_ids(&vocab.encode(&bytes[start..start + chunk_len]), &mask, vocab)?
            }
        })
    }

    pub fn examples(&self, seed: u64, start: u64, count: usize) -> Result<Vec<TaskExample>> {
        (start..start + count as u64).map(|i| self.example(seed, i)).collect()
    }
}

/// Pads examples into a [`Batch`]. Targets must start with bos: the decoder
/// reads `target[..-1]` and predicts `target[1..]`.
pub fn collate(examples: &[TaskExample]) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::Empty("cannot collate zero examples".into()));
    }
    if let Some(i) = examples.iter().position(|e| e.input.is_empty() || e.target.len() < 2) {
        return Err(Error::Invalid(format!("example {i} needs a non-empty input and a target of length >= 2")));
    }
    let batch = examples.len();
    let enc_len = examples.iter().map(|e| e.input.len()).max().unwrap_or(0);
    let dec_len = examples.iter().map(|e| e.target.len() - 1).max().unwrap_or(0);
    let mut b = Batch {
        batch,
        enc_len,
        enc_ids: vec![PAD_ID; batch * enc_len],
        enc_valid: vec![false; batch * enc_len],
        dec_len,
        dec_ids: vec![PAD_ID; batch * dec_len],
        dec_targets: vec![None; batch * dec_len],
    };
    for (r, e) in examples.iter().enumerate() {
        for (j, &t) in e.input.iter().enumerate() {
            b.enc_ids[r * enc_len + j] = t;
            b.enc_valid[r * enc_len + j] = true;
        }
        for j in 0..e.target.len() - 1 {
            b.dec_ids[r * dec_len + j] = e.target[j];
            b.dec_targets[r * dec_len + j] = Some(e.target[j + 1]);
        }
    }
    Ok(b)
}

/// Writes one `{"input": [...], "target": [...]}` record per line.
pub fn write_ndjson(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson(path: &Path) -> Result<Vec<TaskExample>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
