//! Best-fit-decreasing packing of token sequences into fixed-capacity blocks,
//! and EOS-separated concatenation of task items and documents.
//!
//! Sequences longer than the capacity are split at capacity boundaries; nothing
//! is truncated and no padding is inserted.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error("sequence {0:?} has no tokens")]
    EmptySequence(String),
    #[error("{0}")]
    MissingInput(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>) -> Self {
        TokenSequence { id: id.into(), tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One contiguous chunk of a sequence placed in a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub chunk: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBlock {
    pub capacity: usize,
    pub segments: Vec<Segment>,
    pub tokens: Vec<u32>,
}

impl PackedBlock {
    pub fn fill(&self) -> usize {
        self.tokens.len()
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.fill()
    }

    fn push(&mut self, id: &str, chunk: usize, tokens: &[u32]) {
        self.segments.push(Segment {
            id: id.to_string(),
            chunk,
            start: self.tokens.len(),
            len: tokens.len(),
        });
        self.tokens.extend_from_slice(tokens);
    }
}

struct Chunk<'a> {
    order: usize,
    id: &'a str,
    index: usize,
    tokens: &'a [u32],
}

/// Splits oversized sequences into capacity-sized chunks, then places chunks
/// longest first into the open block with the least sufficient room.
///
/// Equal lengths keep input order; equal room prefers the lowest block index.
/// Empty sequences contribute no chunks.
pub fn best_fit_pack(sequences: &[TokenSequence], capacity: usize) -> Result<Vec<PackedBlock>, PackError> {
    if capacity == 0 {
        return Err(PackError::ZeroCapacity);
    }
    let mut chunks: Vec<Chunk> = Vec::new();
    for seq in sequences {
        for (index, tokens) in seq.tokens.chunks(capacity).enumerate() {
            chunks.push(Chunk {
                order: chunks.len(),
                id: &seq.id,
                index,
                tokens,
            });
        }
    }
    chunks.sort_by(|a, b| b.tokens.len().cmp(&a.tokens.len()).then(a.order.cmp(&b.order)));

    let mut blocks: Vec<PackedBlock> = Vec::new();
    // Remaining room -> block indices with that room, ascending.
    let mut by_room: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
    for c in chunks {
        let need = c.tokens.len();
        let slot = by_room
            .range(need..)
            .next()
            .map(|(&room, ids)| (room, *ids.iter().next().expect("non-empty room bucket")));
        let block = match slot {
            Some((room, b)) => {
                let ids = by_room.get_mut(&room).expect("room bucket");
                ids.remove(&b);
                if ids.is_empty() {
                    by_room.remove(&room);
                }
                b
            }
            None => {
                blocks.push(PackedBlock {
                    capacity,
                    segments: Vec::new(),
                    tokens: Vec::with_capacity(capacity),
                });
                blocks.len() - 1
            }
        };
        blocks[block].push(c.id, c.index, c.tokens);
        let room = blocks[block].remaining();
        if room > 0 {
            by_room.entry(room).or_default().insert(block);
        }
    }
    Ok(blocks)
}

/// Packs in arrival order, opening a new block whenever the current one cannot
/// take the next chunk. Used as a reference point for block counts.
pub fn sequential_pack(sequences: &[TokenSequence], capacity: usize) -> Result<Vec<PackedBlock>, PackError> {
    if capacity == 0 {
        return Err(PackError::ZeroCapacity);
    }
    let mut blocks: Vec<PackedBlock> = Vec::new();
    for seq in sequences {
        for (index, tokens) in seq.tokens.chunks(capacity).enumerate() {
            if blocks.last().is_none_or(|b| b.remaining() < tokens.len()) {
                blocks.push(PackedBlock {
                    capacity,
                    segments: Vec::new(),
                    tokens: Vec::new(),
                });
            }
            blocks.last_mut().expect("block").push(&seq.id, index, tokens);
        }
    }
    Ok(blocks)
}

/// Attention spans of a block's segments, in order; they partition `[0, fill)`.
pub fn segment_mask_bounds(block: &PackedBlock) -> Vec<(usize, usize)> {
    block.segments.iter().map(|s| (s.start, s.start + s.len)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PitPhase {
    TaskOnly,
    TaskPlusDocument,
}

impl FromStr for PitPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task_only" => Ok(PitPhase::TaskOnly),
            "task_plus_document" => Ok(PitPhase::TaskPlusDocument),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

/// Joins task items with single EOS separators; in the second phase the
/// document follows the items after one more EOS.
pub fn pit_concat(
    task_items: &[TokenSequence],
    document: Option<&TokenSequence>,
    eos_id: u32,
    phase: PitPhase,
) -> Result<TokenSequence, PackError> {
    let mut parts: Vec<&TokenSequence> = task_items.iter().collect();
    match phase {
        PitPhase::TaskOnly if parts.is_empty() => {
            return Err(PackError::MissingInput("task_only needs at least one task item"))
        }
        PitPhase::TaskOnly => {}
        PitPhase::TaskPlusDocument => {
            parts.push(document.ok_or(PackError::MissingInput("task_plus_document needs a document"))?)
        }
    }
    let total = parts.iter().map(|p| p.len()).sum::<usize>() + parts.len() - 1;
    let mut tokens = Vec::with_capacity(total);
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            tokens.push(eos_id);
        }
        tokens.extend_from_slice(&p.tokens);
    }
    let id = match document {
        Some(d) if phase == PitPhase::TaskPlusDocument => d.id.clone(),
        _ => parts[0].id.clone(),
    };
    Ok(TokenSequence { id, tokens })
}

/// Role of an input line when building concatenated sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitRole {
    #[default]
    Task,
    Document,
}

/// Input line for concatenation: task items and documents sharing a `group`
/// are joined into one sequence. `group` defaults to the line's id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PitRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub role: PitRole,
}

/// Concatenates each group, in order of first appearance. Documents are
/// ignored in the task-only phase; the second phase needs exactly one per group.
pub fn pit_groups(records: &[PitRecord], eos_id: u32, phase: PitPhase) -> Result<Vec<TokenSequence>, PackError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, (Vec<TokenSequence>, Vec<TokenSequence>)> = BTreeMap::new();
    for r in records {
        let key = r.group.as_deref().unwrap_or(&r.id);
        let entry = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (Vec::new(), Vec::new())
        });
        let seq = TokenSequence::new(r.id.clone(), r.tokens.clone());
        match r.role {
            PitRole::Task => entry.0.push(seq),
            PitRole::Document => entry.1.push(seq),
        }
    }
    order
        .into_iter()
        .filter_map(|key| {
            let (items, docs) = &groups[key];
            let joined = match phase {
                PitPhase::TaskOnly if items.is_empty() => return None,
                PitPhase::TaskOnly => pit_concat(items, None, eos_id, phase),
                PitPhase::TaskPlusDocument => match docs.as_slice() {
                    [doc] => pit_concat(items, Some(doc), eos_id, phase),
                    [] => Err(PackError::MissingInput("task_plus_document needs a document in every group")),
                    _ => Err(PackError::MissingInput("task_plus_document allows one document per group")),
                },
            };
            Some(joined.map(|mut s| {
                s.id = key.to_string();
                s
            }))
        })
        .collect()
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, PackError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PackError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads one `{"id", "tokens"}` object per non-blank line.
pub fn read_sequences(reader: impl BufRead) -> Result<Vec<TokenSequence>, PackError> {
    let seqs: Vec<TokenSequence> = read_jsonl(reader)?;
    if let Some(empty) = seqs.iter().find(|s| s.is_empty()) {
        return Err(PackError::EmptySequence(empty.id.clone()));
    }
    Ok(seqs)
}

pub fn write_blocks(mut writer: impl Write, blocks: &[PackedBlock]) -> Result<(), PackError> {
    for b in blocks {
        serde_json::to_writer(&mut writer, b).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(lengths: &[usize]) -> Vec<TokenSequence> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| TokenSequence::new(format!("s{i}"), vec![i as u32; n]))
            .collect()
    }

    fn layout(blocks: &[PackedBlock]) -> Vec<Vec<usize>> {
        blocks.iter().map(|b| b.segments.iter().map(|s| s.len).collect()).collect()
    }

    #[test]
    fn worked_example() {
        let blocks = best_fit_pack(&seqs(&[2000, 2500, 1500, 4000]), 4096).unwrap();
        assert_eq!(layout(&blocks), vec![vec![4000], vec![2500, 1500], vec![2000]]);
        assert_eq!(segment_mask_bounds(&blocks[1]), vec![(0, 2500), (2500, 4000)]);
        assert_eq!(segment_mask_bounds(&blocks[0]), vec![(0, 4000)]);
    }

    #[test]
    fn oversized_sequence_is_split() {
        let blocks = best_fit_pack(&seqs(&[10_000]), 4096).unwrap();
        assert_eq!(layout(&blocks), vec![vec![4096], vec![4096], vec![1808]]);
        let chunks: Vec<usize> = blocks.iter().map(|b| b.segments[0].chunk).collect();
        assert_eq!(chunks, vec![0, 1, 2]);
    }

    #[test]
    fn full_blocks() {
        let blocks = best_fit_pack(&seqs(&[8, 8, 8]), 8).unwrap();
        assert_eq!(blocks.len(), 3);
        assert!(blocks.iter().all(|b| b.fill() == 8));
    }

    #[test]
    fn best_fit_prefers_tightest_then_lowest_index() {
        // After 6 and 5 open two blocks (room 4 and 5), a 4 goes to the first.
        let blocks = best_fit_pack(&seqs(&[6, 5, 4]), 10).unwrap();
        assert_eq!(layout(&blocks), vec![vec![6, 4], vec![5]]);
        let blocks = best_fit_pack(&seqs(&[5, 5, 3]), 10).unwrap();
        assert_eq!(layout(&blocks), vec![vec![5, 5], vec![3]]);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(matches!(best_fit_pack(&seqs(&[1]), 0), Err(PackError::ZeroCapacity)));
    }

    #[test]
    fn pit_examples() {
        let a = TokenSequence::new("a", vec![1, 2]);
        let b = TokenSequence::new("b", vec![3]);
        let out = pit_concat(&[a, b], None, 0, PitPhase::TaskOnly).unwrap();
        assert_eq!(out.tokens, vec![1, 2, 0, 3]);
        let item = TokenSequence::new("q", vec![5]);
        let doc = TokenSequence::new("d", vec![7, 8]);
        let out = pit_concat(&[item], Some(&doc), 0, PitPhase::TaskPlusDocument).unwrap();
        assert_eq!(out.tokens, vec![5, 0, 7, 8]);
        assert!(pit_concat(&[], None, 0, PitPhase::TaskOnly).is_err());
        assert!(pit_concat(&[], None, 0, PitPhase::TaskPlusDocument).is_err());
    }

    #[test]
    fn pit_grouping() {
        let lines = concat!(
            "{\"id\": \"q1\", \"tokens\": [1, 2], \"group\": \"g\"}\n",
            "{\"id\": \"doc\", \"tokens\": [7, 8], \"group\": \"g\", \"role\": \"document\"}\n",
            "{\"id\": \"q2\", \"tokens\": [3], \"group\": \"g\"}\n",
            "{\"id\": \"solo\", \"tokens\": [4]}\n",
        );
        let records: Vec<PitRecord> = read_jsonl(lines.as_bytes()).unwrap();
        let first = pit_groups(&records, 0, PitPhase::TaskOnly).unwrap();
        assert_eq!(first, vec![TokenSequence::new("g", vec![1, 2, 0, 3]), TokenSequence::new("solo", vec![4])]);
        assert!(pit_groups(&records, 0, PitPhase::TaskPlusDocument).is_err());
        let second = pit_groups(&records[..3], 0, PitPhase::TaskPlusDocument).unwrap();
        assert_eq!(second, vec![TokenSequence::new("g", vec![1, 2, 0, 3, 0, 7, 8])]);
    }

    #[test]
    fn jsonl_round_trip() {
        let input = "{\"id\": \"x\", \"tokens\": [1, 2, 3]}\n\n{\"id\": \"y\", \"tokens\": [4]}\n";
        let s = read_sequences(input.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        let mut out = Vec::new();
        write_blocks(&mut out, &best_fit_pack(&s, 4).unwrap()).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "{\"capacity\":4,\"segments\":[{\"id\":\"x\",\"chunk\":0,\"start\":0,\"len\":3},{\"id\":\"y\",\"chunk\":0,\"start\":3,\"len\":1}],\"tokens\":[1,2,3,4]}\n"
        );
        assert!(matches!(read_sequences("nope".as_bytes()), Err(PackError::Parse { line: 1, .. })));
    }
}
