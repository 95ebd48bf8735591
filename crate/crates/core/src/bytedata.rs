//! Byte-level tokenization, synthetic sequence generators, corpus loading and
//! batching.
//!
//! Token layout: `PAD = 0`, `BOS = 1`, `EOS = 2`, and byte `b` maps to
//! `b + 3`, for a vocabulary of 259 ids.

use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BYTE_OFFSET: u32 = 3;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET as usize;

/// First byte of the toy-task alphabet (`'A'`); symbol `k` is byte `0x41 + k`.
const TOY_BASE_BYTE: u32 = 0x41;
/// Largest toy alphabet that stays within printable ASCII (`'A'..='~'`).
pub const MAX_TOY_VOCAB: usize = 62;

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ByteSequence {
    pub ids: Vec<u32>,
}

impl ByteSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    pub fn decode(&self) -> Result<String> {
        byte_decode(&self.ids)
    }
}

/// Encodes UTF-8 text as byte ids, optionally appending `EOS`.
pub fn byte_encode(text: &str, append_eos: bool) -> ByteSequence {
    let mut ids: Vec<u32> = text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect();
    if append_eos {
        ids.push(EOS);
    }
    ByteSequence { ids }
}

/// Like [`byte_encode`] for raw bytes, rejecting invalid UTF-8.
pub fn byte_encode_bytes(bytes: &[u8], append_eos: bool) -> Result<ByteSequence> {
    let text = std::str::from_utf8(bytes)?;
    Ok(byte_encode(text, append_eos))
}

fn id_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .filter(|&&id| id >= BYTE_OFFSET && (id as usize) < VOCAB_SIZE)
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect()
}

/// Decodes ids up to the first `EOS`, skipping `PAD`/`BOS`.
pub fn byte_decode(ids: &[u32]) -> Result<String> {
    let bytes = id_bytes(ids);
    Ok(String::from_utf8(bytes).map_err(|e| e.utf8_error())?)
}

/// Decoding that replaces invalid UTF-8 (e.g. from an untrained model).
pub fn byte_decode_lossy(ids: &[u32]) -> String {
    String::from_utf8_lossy(&id_bytes(ids)).into_owned()
}

/// Settings of the random-sequence leak probe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub seq_len: usize,
    pub probe_vocab: usize,
    pub delta: usize,
    /// BOS padding is `pad_multiplier · delta`.
    pub pad_multiplier: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            seq_len: 12,
            probe_vocab: 100,
            delta: 4,
            pad_multiplier: 1,
            seed: 0,
        }
    }
}

impl ProbeSpec {
    pub fn new(delta: usize, pad_multiplier: usize, seed: u64) -> Self {
        Self {
            delta,
            pad_multiplier,
            seed,
            ..Self::default()
        }
    }

    pub fn pad_len(&self) -> usize {
        self.pad_multiplier * self.delta
    }

    /// Model input length: the BOS prefix followed by the whole target.
    pub fn input_len(&self) -> usize {
        self.seq_len + self.pad_len()
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.probe_vocab as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::Config("delta must be >= 1".into()));
        }
        if !(1..=2).contains(&self.pad_multiplier) {
            return Err(Error::Config("pad_multiplier must be 1 or 2".into()));
        }
        if self.seq_len == 0 || self.seq_len % self.delta != 0 {
            return Err(Error::Config(format!(
                "seq_len {} must be a positive multiple of delta {}",
                self.seq_len, self.delta
            )));
        }
        if self.pad_len() >= self.seq_len {
            return Err(Error::Config(format!(
                "padding {} must be shorter than seq_len {}",
                self.pad_len(),
                self.seq_len
            )));
        }
        if self.probe_vocab == 0 || self.probe_vocab > 256 {
            return Err(Error::Config("probe_vocab must be in 1..=256".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbePair {
    pub input: ByteSequence,
    pub target: ByteSequence,
}

/// Draws one probe pair from `rng`.
///
/// The target is `seq_len` uniform ids from `[3, 3 + probe_vocab)`; the input
/// is `BOS × pad_len` followed by the full target, so `input[i + pad_len] ==
/// target[i]`. Block `b` of the input is used to predict target positions
/// `[bδ, (b+1)δ)`; keeping the tail of the target in the input lets the probe
/// see leaks out of the final block too.
pub fn sample_probe_pair(spec: &ProbeSpec, rng: &mut impl Rng) -> ProbePair {
    let target: Vec<u32> = (0..spec.seq_len)
        .map(|_| BYTE_OFFSET + rng.gen_range(0..spec.probe_vocab as u32))
        .collect();
    let mut input = vec![BOS; spec.pad_len()];
    input.extend_from_slice(&target);
    ProbePair {
        input: ByteSequence::new(input),
        target: ByteSequence::new(target),
    }
}

/// Deterministic probe pair for `spec.seed`.
pub fn make_probe_pair(spec: &ProbeSpec) -> Result<ProbePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(sample_probe_pair(spec, &mut rng))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelPair {
    pub src: ByteSequence,
    pub tgt: ByteSequence,
}

impl ParallelPair {
    /// Both sides end with `EOS` and contain no `PAD`.
    pub fn is_well_formed(&self) -> bool {
        [&self.src, &self.tgt]
            .iter()
            .all(|s| s.ends_with_eos() && !s.ids.contains(&PAD))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    Copy,
    Reverse,
}

impl ToyTask {
    pub fn apply(self, src: &[u32]) -> Vec<u32> {
        match self {
            ToyTask::Copy => src.to_vec(),
            ToyTask::Reverse => src.iter().rev().copied().collect(),
        }
    }
}

/// Byte id of toy symbol `k`.
pub fn toy_symbol(k: usize) -> u32 {
    BYTE_OFFSET + TOY_BASE_BYTE + k as u32
}

/// Random copy/reverse pairs over a `vocab`-symbol printable alphabet.
/// Lengths (before `EOS`) are uniform in `len_range`.
pub fn gen_toy_pairs(
    task: ToyTask,
    count: usize,
    len_range: RangeInclusive<usize>,
    vocab: usize,
    seed: u64,
) -> Result<Vec<ParallelPair>> {
    if vocab == 0 || vocab > MAX_TOY_VOCAB {
        return Err(Error::Config(format!("toy vocab must be in 1..={MAX_TOY_VOCAB}")));
    }
    if len_range.is_empty() || *len_range.start() == 0 {
        return Err(Error::Config(
            "toy length range must be non-empty and start at >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            let src: Vec<u32> = (0..len).map(|_| toy_symbol(rng.gen_range(0..vocab))).collect();
            let mut tgt = task.apply(&src);
            let mut src = src;
            src.push(EOS);
            tgt.push(EOS);
            ParallelPair {
                src: ByteSequence::new(src),
                tgt: ByteSequence::new(tgt),
            }
        })
        .collect())
}

/// Reads a line-aligned parallel corpus, dropping pairs whose source has
/// more than `max_src_chars` characters. Both sides get `EOS`.
pub fn load_parallel_corpus(src_path: &Path, tgt_path: &Path, max_src_chars: usize) -> Result<Vec<ParallelPair>> {
    let src = read_utf8(src_path)?;
    let tgt = read_utf8(tgt_path)?;
    let src_lines: Vec<&str> = src.lines().collect();
    let tgt_lines: Vec<&str> = tgt.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
        });
    }
    Ok(src_lines
        .into_iter()
        .zip(tgt_lines)
        .filter(|(s, _)| s.chars().count() <= max_src_chars)
        .map(|(s, t)| ParallelPair {
            src: byte_encode(s, true),
            tgt: byte_encode(t, true),
        })
        .collect())
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidUtf8(e.utf8_error()))
}

/// Right-padded batch. Masks are `true` exactly at `PAD` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Unpadded source length of row `i`.
    pub fn src_len(&self, i: usize) -> usize {
        self.src_mask[i].iter().filter(|&&m| !m).count()
    }

    pub fn tgt_len(&self, i: usize) -> usize {
        self.tgt_mask[i].iter().filter(|&&m| !m).count()
    }
}

pub fn round_up(len: usize, delta: usize) -> usize {
    len.div_ceil(delta) * delta
}

fn pad_side(seqs: &[&ByteSequence], delta: usize) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
    let max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let width = round_up(max, delta);
    let mut ids = Vec::with_capacity(seqs.len());
    let mut mask = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut row = s.ids.clone();
        row.resize(width, PAD);
        let mut m = vec![false; s.len()];
        m.resize(width, true);
        ids.push(row);
        mask.push(m);
    }
    (ids, mask)
}

/// Groups consecutive pairs into batches padded to the batch maximum, then
/// up to a multiple of `delta`.
pub fn batch_pad(pairs: &[ParallelPair], batch_size: usize, delta: usize) -> Vec<PaddedBatch> {
    assert!(batch_size >= 1 && delta >= 1);
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let srcs: Vec<&ByteSequence> = chunk.iter().map(|p| &p.src).collect();
            let tgts: Vec<&ByteSequence> = chunk.iter().map(|p| &p.tgt).collect();
            let (src, src_mask) = pad_side(&srcs, delta);
            let (tgt, tgt_mask) = pad_side(&tgts, delta);
            PaddedBatch {
                src,
                tgt,
                src_mask,
                tgt_mask,
            }
        })
        .collect()
}
