//! Blocked, randomly accessible storage of the reference sequence, and the
//! provenance table of the extra-phrase reservoir.
//!
//! The reference is cut into blocks of [`REF_BLOCK_SIZE`] symbols. Blocks made
//! only of `N` produce no payload at all; every other block is packed three
//! symbols per byte (base 5) and Huffman-coded with one table shared by the
//! whole reference. Each block's bits are flushed to a byte boundary so the
//! block index can address blocks by byte offset.

use crate::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};
use crate::genome::{CODE_A, CODE_N};
use crate::huffman::{build_table, HuffmanTable};

pub const REF_BLOCK_SIZE: usize = 8192;

/// Largest packed triplet value (`4*25 + 4*5 + 4`).
pub const MAX_TRIPLET: u8 = 124;

/// Packs symbols three per byte, first symbol most significant. A trailing
/// partial triplet is padded with `A`.
pub fn pack_triplets(symbols: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(symbols.len().div_ceil(3));
    pack_triplets_into(symbols, &mut out);
    out
}

pub fn pack_triplets_into(symbols: &[u8], out: &mut Vec<u8>) {
    let mut chunks = symbols.chunks_exact(3);
    for c in &mut chunks {
        out.push(25 * c[0] + 5 * c[1] + c[2]);
    }
    match *chunks.remainder() {
        [a] => out.push(25 * a + 5 * CODE_A + CODE_A),
        [a, b] => out.push(25 * a + 5 * b + CODE_A),
        _ => {}
    }
}

/// Inverse of a single packed byte.
#[inline]
pub fn unpack_triplet(byte: u8) -> Result<[u8; 3]> {
    if byte > MAX_TRIPLET {
        return Err(Error::corrupt(format!("packed triplet byte {byte} out of range")));
    }
    Ok([byte / 25, byte / 5 % 5, byte % 5])
}

/// Unpacks `count` symbols from packed bytes.
pub fn unpack_triplets(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if bytes.len() < count.div_ceil(3) {
        return Err(Error::Truncated);
    }
    let mut out = Vec::with_capacity(count + 2);
    for &b in &bytes[..count.div_ceil(3)] {
        out.extend_from_slice(&unpack_triplet(b)?);
    }
    out.truncate(count);
    Ok(out)
}

/// Byte offsets of each block in the coded reference payload, plus a final
/// terminator. Equal consecutive offsets mark an all-`N` block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefBlockIndex {
    pub block_size: usize,
    pub start_offsets: Vec<u64>,
}

impl RefBlockIndex {
    pub fn block_count(&self) -> usize {
        self.start_offsets.len().saturating_sub(1)
    }

    pub fn block_bytes(&self, block: usize) -> std::ops::Range<usize> {
        self.start_offsets[block] as usize..self.start_offsets[block + 1] as usize
    }

    pub fn is_all_n(&self, block: usize) -> bool {
        self.start_offsets[block] == self.start_offsets[block + 1]
    }
}

/// The coded reference: block index, Huffman table and payload metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceStore {
    pub len: u64,
    pub index: RefBlockIndex,
    /// `None` when the reference has no non-`N` block (empty payload).
    pub table: Option<HuffmanTable>,
}

/// Outcome of a ranged reference decode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeReadStats {
    pub blocks_decoded: usize,
    pub payload_bytes_read: usize,
}

/// Encodes `symbols` into a [`ReferenceStore`] and its coded payload.
pub fn encode_reference(symbols: &[u8]) -> Result<(ReferenceStore, Vec<u8>)> {
    let blocks: Vec<Option<Vec<u8>>> = symbols
        .chunks(REF_BLOCK_SIZE)
        .map(|b| {
            if b.iter().all(|&s| s == CODE_N) {
                None
            } else {
                Some(pack_triplets(b))
            }
        })
        .collect();

    let mut freqs = [0u64; 256];
    for packed in blocks.iter().flatten() {
        for &b in packed {
            freqs[b as usize] += 1;
        }
    }
    let table = if freqs.iter().any(|&f| f > 0) {
        Some(build_table(&freqs)?)
    } else {
        None
    };

    let mut w = BitWriter::new();
    let mut start_offsets = Vec::with_capacity(blocks.len() + 1);
    for packed in &blocks {
        start_offsets.push(w.byte_len() as u64);
        if let (Some(packed), Some(table)) = (packed, &table) {
            for &b in packed {
                table.encode_symbol(&mut w, b)?;
            }
            w.flush_to_byte_boundary();
        }
    }
    start_offsets.push(w.byte_len() as u64);

    let store = ReferenceStore {
        len: symbols.len() as u64,
        index: RefBlockIndex {
            block_size: REF_BLOCK_SIZE,
            start_offsets,
        },
        table,
    };
    Ok((store, w.finish()))
}

impl ReferenceStore {
    /// Symbol count of block `block`.
    pub fn block_len(&self, block: usize) -> usize {
        let start = block as u64 * self.index.block_size as u64;
        (self.len - start).min(self.index.block_size as u64) as usize
    }

    /// Decodes one whole block, reading only that block's payload bytes.
    pub fn decode_block(&self, payload: &[u8], block: usize) -> Result<Vec<u8>> {
        self.decode_block_counted(payload, block).map(|(s, _)| s)
    }

    fn decode_block_counted(&self, payload: &[u8], block: usize) -> Result<(Vec<u8>, usize)> {
        if block >= self.index.block_count() {
            return Err(Error::OutOfRange {
                start: block as u64,
                end: block as u64 + 1,
                len: self.index.block_count() as u64,
            });
        }
        let n = self.block_len(block);
        if self.index.is_all_n(block) {
            return Ok((vec![CODE_N; n], 0));
        }
        let range = self.index.block_bytes(block);
        let bytes = payload
            .get(range.clone())
            .ok_or_else(|| Error::corrupt("reference block lies outside the payload"))?;
        let table = self
            .table
            .as_ref()
            .ok_or_else(|| Error::corrupt("reference payload present without a Huffman table"))?;
        let mut r = BitReader::new(bytes);
        let mut out = Vec::with_capacity(n + 2);
        for _ in 0..n.div_ceil(3) {
            out.extend_from_slice(&unpack_triplet(table.decode_symbol(&mut r)?)?);
        }
        out.truncate(n);
        Ok((out, range.len()))
    }

    /// Decodes `[start, end)` touching only the overlapping blocks.
    pub fn decode_range(&self, payload: &[u8], start: u64, end: u64) -> Result<Vec<u8>> {
        self.decode_range_counted(payload, start, end).map(|(s, _)| s)
    }

    pub fn decode_range_counted(
        &self,
        payload: &[u8],
        start: u64,
        end: u64,
    ) -> Result<(Vec<u8>, RangeReadStats)> {
        if start > end || end > self.len {
            return Err(Error::OutOfRange {
                start,
                end,
                len: self.len,
            });
        }
        let mut stats = RangeReadStats::default();
        let mut out = Vec::with_capacity((end - start) as usize);
        if start == end {
            return Ok((out, stats));
        }
        let bs = self.index.block_size as u64;
        for block in (start / bs)..=((end - 1) / bs) {
            let (symbols, read) = self.decode_block_counted(payload, block as usize)?;
            stats.blocks_decoded += 1;
            stats.payload_bytes_read += read;
            let block_start = block * bs;
            let lo = start.max(block_start) - block_start;
            let hi = end.min(block_start + symbols.len() as u64) - block_start;
            out.extend_from_slice(&symbols[lo as usize..hi as usize]);
        }
        Ok((out, stats))
    }

    pub fn decode_all(&self, payload: &[u8]) -> Result<Vec<u8>> {
        self.decode_range(payload, 0, self.len)
    }
}

/// One reservoir phrase: a literal run copied from an already-parsed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReservoirEntry {
    pub origin_sequence: u32,
    pub origin_position: u64,
    pub len: u64,
}

/// A contiguous slice of an origin sequence covered by part of a reservoir range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OriginPiece {
    pub origin_sequence: u32,
    pub origin_position: u64,
    pub len: u64,
}

/// Where every reservoir phrase came from. The reservoir content itself is
/// never stored; it is recovered from the origin sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReservoirProvenance {
    min_len: u64,
    entries: Vec<ReservoirEntry>,
    // cumulative_starts[i] is the reservoir offset of entry i; one extra
    // trailing element holds the total length.
    cumulative_starts: Vec<u64>,
}

impl ReservoirProvenance {
    pub fn new(min_len: u64) -> Self {
        ReservoirProvenance {
            min_len,
            entries: Vec::new(),
            cumulative_starts: vec![0],
        }
    }

    pub fn from_entries(min_len: u64, entries: Vec<ReservoirEntry>) -> Result<Self> {
        let mut prov = ReservoirProvenance::new(min_len);
        for e in entries {
            prov.append(e)?;
        }
        Ok(prov)
    }

    /// Appends a phrase and returns its reservoir offset.
    pub fn append(&mut self, entry: ReservoirEntry) -> Result<u64> {
        if entry.len < self.min_len {
            return Err(Error::PhraseTooShort {
                len: entry.len,
                min: self.min_len,
            });
        }
        let offset = self.total_len();
        self.entries.push(entry);
        self.cumulative_starts.push(offset + entry.len);
        Ok(offset)
    }

    pub fn min_len(&self) -> u64 {
        self.min_len
    }

    pub fn entries(&self) -> &[ReservoirEntry] {
        &self.entries
    }

    pub fn entry_start(&self, i: usize) -> u64 {
        self.cumulative_starts[i]
    }

    pub fn total_len(&self) -> u64 {
        *self.cumulative_starts.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Maps `[offset, offset + len)` of the reservoir back to origin
    /// coordinates, split at phrase boundaries.
    pub fn resolve(&self, offset: u64, len: u64) -> Result<Vec<OriginPiece>> {
        let end = offset.checked_add(len).filter(|&e| e <= self.total_len()).ok_or(
            Error::OutOfRange {
                start: offset,
                end: offset.saturating_add(len),
                len: self.total_len(),
            },
        )?;
        let mut pieces = Vec::new();
        if len == 0 {
            return Ok(pieces);
        }
        // Last entry whose start is <= offset.
        let mut i = self.cumulative_starts.partition_point(|&s| s <= offset) - 1;
        let mut pos = offset;
        while pos < end {
            let e = &self.entries[i];
            let entry_start = self.cumulative_starts[i];
            let entry_end = self.cumulative_starts[i + 1];
            let take = end.min(entry_end) - pos;
            pieces.push(OriginPiece {
                origin_sequence: e.origin_sequence,
                origin_position: e.origin_position + (pos - entry_start),
                len: take,
            });
            pos += take;
            i += 1;
        }
        Ok(pieces)
    }
}
