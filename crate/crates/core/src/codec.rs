//! Serialization of a [`Parse`] into four byte streams (offsets, lengths,
//! literals, flags), entropy-coded with six shared order-0 Huffman models
//! and cut into byte-aligned checkpoint windows for random access.
//!
//! Offset record, first byte:
//!
//! | byte      | meaning                                            |
//! |-----------|----------------------------------------------------|
//! | 0..=250   | delta `byte - 125` (range -125..=125)              |
//! | 251       | delta < -125, 4-byte LE two's-complement delta     |
//! | 252       | delta > 125, 4-byte LE delta                       |
//! | 253       | `N` run (no payload)                               |
//! | 254       | reservoir match, 4-byte LE absolute offset         |
//!
//! The delta is `(source_pos - ref_pos) - previous`, where `previous` is the
//! same quantity for the last reference match in the window (0 at a window
//! start). Lengths: byte `len - 1` for 1..=255, else 255 then 4-byte LE
//! length. Literals are packed three per byte like the reference. Flags are
//! two bits, four per byte, first flag in the low bits: 0 literal run,
//! 1..=3 match with 0..=2 gaps (`N` runs use 1).

use crate::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};
use crate::huffman::{build_table, HuffmanTable};
use crate::parse::{CheckpointCursor, Factor, GappedSpan, Parse, ParseParams, MAX_GAPS};
use crate::reference::{pack_triplets_into, unpack_triplet};

pub const OFFSET_BIAS: i64 = 125;
pub const OFFSET_ESCAPE_NEGATIVE: u8 = 251;
pub const OFFSET_ESCAPE_POSITIVE: u8 = 252;
pub const OFFSET_N_RUN: u8 = 253;
pub const OFFSET_RESERVOIR: u8 = 254;
pub const LENGTH_ESCAPE: u8 = 255;

pub const FLAG_LITERAL: u8 = 0;

pub const STREAM_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Stream {
    Offsets = 0,
    Lengths = 1,
    Literals = 2,
    Flags = 3,
}

pub const MODEL_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Model {
    OffsetFirst = 0,
    OffsetExtra = 1,
    LengthFirst = 2,
    LengthExtra = 3,
    Literal = 4,
    Flag = 5,
}

impl Model {
    pub const ALL: [Model; MODEL_COUNT] = [
        Model::OffsetFirst,
        Model::OffsetExtra,
        Model::LengthFirst,
        Model::LengthExtra,
        Model::Literal,
        Model::Flag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Model::OffsetFirst => "offset_first",
            Model::OffsetExtra => "offset_extra",
            Model::LengthFirst => "length_first",
            Model::LengthExtra => "length_extra",
            Model::Literal => "literal",
            Model::Flag => "flag",
        }
    }
}

/// Appends the offset record for a reference-match delta.
pub fn push_offset_delta(out: &mut Vec<u8>, delta: i64) -> Result<()> {
    if (-OFFSET_BIAS..=OFFSET_BIAS).contains(&delta) {
        out.push((delta + OFFSET_BIAS) as u8);
        return Ok(());
    }
    let v = i32::try_from(delta)
        .map_err(|_| Error::InvalidFactor(format!("offset delta {delta} exceeds 32 bits")))?;
    out.push(if delta < 0 {
        OFFSET_ESCAPE_NEGATIVE
    } else {
        OFFSET_ESCAPE_POSITIVE
    });
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn push_length(out: &mut Vec<u8>, len: u64) -> Result<()> {
    match len {
        0 => Err(Error::InvalidFactor("zero length".into())),
        1..=255 => {
            out.push((len - 1) as u8);
            Ok(())
        }
        _ => {
            let v = u32::try_from(len)
                .map_err(|_| Error::InvalidFactor(format!("length {len} exceeds 32 bits")))?;
            out.push(LENGTH_ESCAPE);
            out.extend_from_slice(&v.to_le_bytes());
            Ok(())
        }
    }
}

/// Where a checkpoint window starts in the raw (pre-Huffman) streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCheckpoint {
    pub source_pos: u64,
    pub raw_offsets: [usize; STREAM_COUNT],
    /// Symbols emitted before this window: offset bytes, length bytes,
    /// literal symbols, flags.
    pub counts: [u64; STREAM_COUNT],
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawStreams {
    pub streams: [Vec<u8>; STREAM_COUNT],
    pub counts: [u64; STREAM_COUNT],
    pub checkpoints: Vec<RawCheckpoint>,
    pub source_len: u64,
}

impl RawStreams {
    pub fn stream(&self, s: Stream) -> &[u8] {
        &self.streams[s as usize]
    }
}

#[derive(Default)]
struct WindowPacker {
    pending_literals: Vec<u8>,
    flag_byte: u8,
    flag_count: u8,
}

impl WindowPacker {
    fn literal(&mut self, raw: &mut RawStreams, symbol: u8) {
        self.pending_literals.push(symbol);
        raw.counts[Stream::Literals as usize] += 1;
        if self.pending_literals.len() == 3 {
            pack_triplets_into(&self.pending_literals, &mut raw.streams[Stream::Literals as usize]);
            self.pending_literals.clear();
        }
    }

    fn flag(&mut self, raw: &mut RawStreams, flag: u8) {
        self.flag_byte |= flag << (2 * self.flag_count);
        self.flag_count += 1;
        raw.counts[Stream::Flags as usize] += 1;
        if self.flag_count == 4 {
            raw.streams[Stream::Flags as usize].push(self.flag_byte);
            self.flag_byte = 0;
            self.flag_count = 0;
        }
    }

    fn flush(&mut self, raw: &mut RawStreams) {
        if !self.pending_literals.is_empty() {
            pack_triplets_into(&self.pending_literals, &mut raw.streams[Stream::Literals as usize]);
            self.pending_literals.clear();
        }
        if self.flag_count > 0 {
            raw.streams[Stream::Flags as usize].push(self.flag_byte);
            self.flag_byte = 0;
            self.flag_count = 0;
        }
    }
}

/// Lays out the raw streams of one parse.
pub fn encode_parse(parse: &Parse, params: &ParseParams) -> Result<RawStreams> {
    let mut raw = RawStreams {
        source_len: parse.source_len,
        ..Default::default()
    };
    let mut packer = WindowPacker::default();
    let mut cursor = CheckpointCursor::new(params.checkpoint_interval);
    let mut prev_delta: i64 = 0;
    let mut pos = 0u64;

    for factor in &parse.factors {
        factor.check_shape()?;
        if cursor.start_factor(pos) {
            packer.flush(&mut raw);
            raw.checkpoints.push(RawCheckpoint {
                source_pos: pos,
                raw_offsets: std::array::from_fn(|i| raw.streams[i].len()),
                counts: raw.counts,
            });
            prev_delta = 0;
        }
        let before = [raw.streams[0].len(), raw.streams[1].len()];
        match factor {
            Factor::Literal(symbols) => {
                packer.flag(&mut raw, FLAG_LITERAL);
                push_length(&mut raw.streams[Stream::Lengths as usize], symbols.len() as u64)?;
                for &s in symbols {
                    packer.literal(&mut raw, s);
                }
            }
            Factor::NRun(len) => {
                packer.flag(&mut raw, 1);
                raw.streams[Stream::Offsets as usize].push(OFFSET_N_RUN);
                push_length(&mut raw.streams[Stream::Lengths as usize], *len)?;
            }
            Factor::Match { ref_pos, span } => {
                let d = pos as i64 - *ref_pos as i64;
                push_offset_delta(&mut raw.streams[Stream::Offsets as usize], d - prev_delta)?;
                prev_delta = d;
                encode_span(&mut raw, &mut packer, span)?;
            }
            Factor::Reservoir { offset, span } => {
                let v = u32::try_from(*offset)
                    .map_err(|_| Error::InvalidFactor("reservoir offset exceeds 32 bits".into()))?;
                let offs = &mut raw.streams[Stream::Offsets as usize];
                offs.push(OFFSET_RESERVOIR);
                offs.extend_from_slice(&v.to_le_bytes());
                encode_span(&mut raw, &mut packer, span)?;
            }
        }
        raw.counts[0] += (raw.streams[0].len() - before[0]) as u64;
        raw.counts[1] += (raw.streams[1].len() - before[1]) as u64;
        pos += factor.source_len();
    }
    packer.flush(&mut raw);
    if pos != parse.source_len {
        return Err(Error::InvalidFactor("parse does not tile its source".into()));
    }
    Ok(raw)
}

fn encode_span(raw: &mut RawStreams, packer: &mut WindowPacker, span: &GappedSpan) -> Result<()> {
    packer.flag(raw, 1 + span.gaps.len() as u8);
    for &p in &span.pieces {
        push_length(&mut raw.streams[Stream::Lengths as usize], p)?;
    }
    for &g in &span.gaps {
        packer.literal(raw, g);
    }
    Ok(())
}

/// Calls `f(model, byte)` for every byte of a raw stream segment.
fn for_each_modeled_byte(
    stream: Stream,
    bytes: &[u8],
    mut f: impl FnMut(Model, u8) -> Result<()>,
) -> Result<()> {
    match stream {
        Stream::Offsets | Stream::Lengths => {
            let (first, extra) = if stream == Stream::Offsets {
                (Model::OffsetFirst, Model::OffsetExtra)
            } else {
                (Model::LengthFirst, Model::LengthExtra)
            };
            let mut i = 0;
            while i < bytes.len() {
                let b = bytes[i];
                f(first, b)?;
                let escaped = match stream {
                    Stream::Offsets => {
                        if b == LENGTH_ESCAPE {
                            return Err(Error::InvalidFactor("invalid offset byte 255".into()));
                        }
                        matches!(b, OFFSET_ESCAPE_NEGATIVE | OFFSET_ESCAPE_POSITIVE | OFFSET_RESERVOIR)
                    }
                    _ => b == LENGTH_ESCAPE,
                };
                i += 1;
                if escaped {
                    let ext = bytes
                        .get(i..i + 4)
                        .ok_or_else(|| Error::InvalidFactor("escape without payload".into()))?;
                    for &e in ext {
                        f(extra, e)?;
                    }
                    i += 4;
                }
            }
            Ok(())
        }
        Stream::Literals => bytes.iter().try_for_each(|&b| f(Model::Literal, b)),
        Stream::Flags => bytes.iter().try_for_each(|&b| f(Model::Flag, b)),
    }
}

const ALL_STREAMS: [Stream; STREAM_COUNT] =
    [Stream::Offsets, Stream::Lengths, Stream::Literals, Stream::Flags];

/// Byte frequencies per model, accumulated over any number of parses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelTallies {
    pub freqs: [[u64; 256]; MODEL_COUNT],
}

impl Default for ModelTallies {
    fn default() -> Self {
        ModelTallies {
            freqs: [[0; 256]; MODEL_COUNT],
        }
    }
}

impl ModelTallies {
    pub fn add(&mut self, raw: &RawStreams) -> Result<()> {
        for s in ALL_STREAMS {
            for_each_modeled_byte(s, raw.stream(s), |m, b| {
                self.freqs[m as usize][b as usize] += 1;
                Ok(())
            })?;
        }
        Ok(())
    }
}

/// The six shared Huffman models. A model is absent when no byte used it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Models {
    pub tables: [Option<HuffmanTable>; MODEL_COUNT],
}

impl Models {
    pub fn from_tallies(tallies: &ModelTallies) -> Result<Self> {
        let mut tables: [Option<HuffmanTable>; MODEL_COUNT] = Default::default();
        for (t, freqs) in tables.iter_mut().zip(&tallies.freqs) {
            if freqs.iter().any(|&f| f > 0) {
                *t = Some(build_table(freqs)?);
            }
        }
        Ok(Models { tables })
    }

    pub fn get(&self, m: Model) -> Option<&HuffmanTable> {
        self.tables[m as usize].as_ref()
    }

    fn require(&self, m: Model) -> Result<&HuffmanTable> {
        self.get(m)
            .ok_or_else(|| Error::corrupt(format!("stream uses missing model {}", m.name())))
    }
}

/// Builds one model set from the raw streams of every sequence.
pub fn build_models<'a>(raws: impl IntoIterator<Item = &'a RawStreams>) -> Result<Models> {
    let mut tallies = ModelTallies::default();
    let mut any = false;
    for raw in raws {
        tallies.add(raw)?;
        any = true;
    }
    if !any {
        return Err(Error::InvalidCollection("no streams to model".into()));
    }
    Models::from_tallies(&tallies)
}

/// A checkpoint in the coded streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    /// Start of the first factor in the window.
    pub source_pos: u64,
    /// Coded byte offset of the window in each stream payload.
    pub byte_offsets: [u64; STREAM_COUNT],
    /// Symbols consumed before the window, per stream.
    pub counts: [u64; STREAM_COUNT],
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodedStreams {
    pub payloads: [Vec<u8>; STREAM_COUNT],
    pub checkpoints: Vec<Checkpoint>,
    pub counts: [u64; STREAM_COUNT],
    pub source_len: u64,
}

impl CodedStreams {
    pub fn view(&self) -> StreamView<'_> {
        StreamView {
            payloads: std::array::from_fn(|i| self.payloads[i].as_slice()),
            checkpoints: &self.checkpoints,
            counts: self.counts,
            source_len: self.source_len,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.payloads.iter().map(Vec::len).sum()
    }
}

/// Huffman-codes every window, flushing all streams at each window end.
pub fn compress_streams(raw: &RawStreams, models: &Models) -> Result<CodedStreams> {
    let mut writers: [BitWriter; STREAM_COUNT] = Default::default();
    let mut checkpoints = Vec::with_capacity(raw.checkpoints.len());
    for (w, cp) in raw.checkpoints.iter().enumerate() {
        checkpoints.push(Checkpoint {
            source_pos: cp.source_pos,
            byte_offsets: std::array::from_fn(|i| writers[i].byte_len() as u64),
            counts: cp.counts,
        });
        for s in ALL_STREAMS {
            let i = s as usize;
            let end = raw
                .checkpoints
                .get(w + 1)
                .map_or(raw.streams[i].len(), |next| next.raw_offsets[i]);
            let writer = &mut writers[i];
            for_each_modeled_byte(s, &raw.streams[i][cp.raw_offsets[i]..end], |m, b| {
                models
                    .get(m)
                    .ok_or(Error::UnencodableByte(b))?
                    .encode_symbol(writer, b)
            })?;
            writer.flush_to_byte_boundary();
        }
    }
    Ok(CodedStreams {
        payloads: writers.map(BitWriter::finish),
        checkpoints,
        counts: raw.counts,
        source_len: raw.source_len,
    })
}

/// Borrowed coded streams of one sequence part.
#[derive(Debug, Clone, Copy)]
pub struct StreamView<'a> {
    pub payloads: [&'a [u8]; STREAM_COUNT],
    pub checkpoints: &'a [Checkpoint],
    pub counts: [u64; STREAM_COUNT],
    pub source_len: u64,
}

impl StreamView<'_> {
    /// Index of the last checkpoint at or before `pos`.
    pub fn checkpoint_for(&self, pos: u64) -> usize {
        self.checkpoints
            .partition_point(|c| c.source_pos <= pos)
            .saturating_sub(1)
    }
}

/// Sequential factor decoder starting at a checkpoint.
pub struct FactorDecoder<'a> {
    view: StreamView<'a>,
    models: &'a Models,
    window: usize,
    readers: [BitReader<'a>; STREAM_COUNT],
    consumed: [u64; STREAM_COUNT],
    pos: u64,
    prev_delta: i64,
    literals: [u8; 3],
    literals_left: u8,
    flag_byte: u8,
    flags_left: u8,
    bytes_touched: usize,
}

impl<'a> FactorDecoder<'a> {
    pub fn new(view: StreamView<'a>, models: &'a Models, checkpoint: usize) -> Result<Self> {
        let mut dec = FactorDecoder {
            view,
            models,
            window: checkpoint,
            readers: std::array::from_fn(|_| BitReader::new(&[])),
            consumed: [0; STREAM_COUNT],
            pos: 0,
            prev_delta: 0,
            literals: [0; 3],
            literals_left: 0,
            flag_byte: 0,
            flags_left: 0,
            bytes_touched: 0,
        };
        if checkpoint < view.checkpoints.len() {
            dec.enter_window(checkpoint)?;
        } else if !(checkpoint == 0 && view.source_len == 0) {
            return Err(Error::corrupt(format!("checkpoint {checkpoint} does not exist")));
        }
        Ok(dec)
    }

    fn enter_window(&mut self, w: usize) -> Result<()> {
        self.bytes_touched += self.readers.iter().map(BitReader::bytes_touched).sum::<usize>();
        let cp = &self.view.checkpoints[w];
        for i in 0..STREAM_COUNT {
            let payload = self.view.payloads[i];
            let start = cp.byte_offsets[i] as usize;
            let bytes = payload
                .get(start..)
                .ok_or_else(|| Error::corrupt("checkpoint offset beyond payload"))?;
            self.readers[i] = BitReader::new(bytes);
        }
        self.window = w;
        self.consumed = cp.counts;
        self.pos = cp.source_pos;
        self.prev_delta = 0;
        self.literals_left = 0;
        self.flags_left = 0;
        Ok(())
    }

    /// Source position of the next factor.
    pub fn position(&self) -> u64 {
        self.pos
    }

    /// Payload bytes pulled from the streams so far.
    pub fn bytes_touched(&self) -> usize {
        self.bytes_touched + self.readers.iter().map(BitReader::bytes_touched).sum::<usize>()
    }

    fn take(&mut self, s: Stream, m: Model) -> Result<u8> {
        let i = s as usize;
        if self.consumed[i] >= self.view.counts[i] {
            return Err(Error::corrupt("stream read past its symbol count"));
        }
        let table = self.models.require(m)?;
        let b = table.decode_symbol(&mut self.readers[i]).map_err(|e| match e {
            Error::Truncated => Error::corrupt("coded stream truncated"),
            other => other,
        })?;
        Ok(b)
    }

    fn read_flag(&mut self) -> Result<u8> {
        if self.flags_left == 0 {
            self.flag_byte = self.take(Stream::Flags, Model::Flag)?;
            self.flags_left = 4;
        }
        let f = self.flag_byte & 3;
        self.flag_byte >>= 2;
        self.flags_left -= 1;
        self.consumed[Stream::Flags as usize] += 1;
        Ok(f)
    }

    fn read_literal(&mut self) -> Result<u8> {
        if self.literals_left == 0 {
            let b = self.take(Stream::Literals, Model::Literal)?;
            self.literals = unpack_triplet(b)?;
            self.literals_left = 3;
        }
        let s = self.literals[3 - self.literals_left as usize];
        self.literals_left -= 1;
        self.consumed[Stream::Literals as usize] += 1;
        Ok(s)
    }

    fn read_extra(&mut self, s: Stream, m: Model) -> Result<[u8; 4]> {
        let mut v = [0u8; 4];
        for b in &mut v {
            *b = self.take(s, m)?;
            self.consumed[s as usize] += 1;
        }
        Ok(v)
    }

    fn read_length(&mut self) -> Result<u64> {
        let b = self.take(Stream::Lengths, Model::LengthFirst)?;
        self.consumed[Stream::Lengths as usize] += 1;
        if b == LENGTH_ESCAPE {
            let v = u32::from_le_bytes(self.read_extra(Stream::Lengths, Model::LengthExtra)?);
            if v < 256 {
                return Err(Error::corrupt("escaped length below 256"));
            }
            Ok(v as u64)
        } else {
            Ok(b as u64 + 1)
        }
    }

    fn read_span(&mut self, gaps: usize) -> Result<GappedSpan> {
        let mut pieces = Vec::with_capacity(gaps + 1);
        for _ in 0..=gaps {
            pieces.push(self.read_length()?);
        }
        let mut g = Vec::with_capacity(gaps);
        for _ in 0..gaps {
            g.push(self.read_literal()?);
        }
        Ok(GappedSpan { pieces, gaps: g })
    }

    /// Decodes the next factor, or `None` at the end of the source.
    pub fn next_factor(&mut self) -> Result<Option<(u64, Factor)>> {
        if let Some(next) = self.view.checkpoints.get(self.window + 1) {
            if self.pos == next.source_pos {
                if self.consumed != next.counts {
                    return Err(Error::corrupt("window symbol counts disagree with checkpoint"));
                }
                self.enter_window(self.window + 1)?;
            } else if self.pos > next.source_pos {
                return Err(Error::corrupt("factor overruns a checkpoint"));
            }
        }
        if self.pos >= self.view.source_len {
            return Ok(None);
        }
        let start = self.pos;
        let flag = self.read_flag()?;
        let factor = if flag == FLAG_LITERAL {
            let n = self.read_length()?;
            if n > self.view.source_len - start {
                return Err(Error::corrupt("literal run beyond sequence end"));
            }
            let mut symbols = Vec::with_capacity(n as usize);
            for _ in 0..n {
                symbols.push(self.read_literal()?);
            }
            Factor::Literal(symbols)
        } else {
            let gaps = (flag - 1) as usize;
            debug_assert!(gaps <= MAX_GAPS);
            let first = self.take(Stream::Offsets, Model::OffsetFirst)?;
            self.consumed[Stream::Offsets as usize] += 1;
            match first {
                OFFSET_N_RUN => {
                    if gaps != 0 {
                        return Err(Error::corrupt("N run with gaps"));
                    }
                    Factor::NRun(self.read_length()?)
                }
                OFFSET_RESERVOIR => {
                    let offset = u32::from_le_bytes(self.read_extra(Stream::Offsets, Model::OffsetExtra)?);
                    Factor::Reservoir {
                        offset: offset as u64,
                        span: self.read_span(gaps)?,
                    }
                }
                LENGTH_ESCAPE => return Err(Error::corrupt("invalid offset byte 255")),
                b => {
                    let delta = match b {
                        OFFSET_ESCAPE_NEGATIVE | OFFSET_ESCAPE_POSITIVE => {
                            let v = i32::from_le_bytes(self.read_extra(Stream::Offsets, Model::OffsetExtra)?) as i64;
                            let ok = if b == OFFSET_ESCAPE_NEGATIVE { v < -OFFSET_BIAS } else { v > OFFSET_BIAS };
                            if !ok {
                                return Err(Error::corrupt("escaped offset delta inside the direct range"));
                            }
                            v
                        }
                        _ => b as i64 - OFFSET_BIAS,
                    };
                    let d = delta + self.prev_delta;
                    let ref_pos = start as i64 - d;
                    if ref_pos < 0 {
                        return Err(Error::corrupt("match points before the reference start"));
                    }
                    self.prev_delta = d;
                    Factor::Match {
                        ref_pos: ref_pos as u64,
                        span: self.read_span(gaps)?,
                    }
                }
            }
        };
        let len = factor.source_len();
        if len == 0 || len > self.view.source_len - start {
            return Err(Error::corrupt("factor length out of range"));
        }
        self.pos += len;
        Ok(Some((start, factor)))
    }

    /// Checks that a full decode consumed every stream exactly.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.view.source_len || self.consumed != self.view.counts {
            return Err(Error::corrupt("stream symbol counts disagree with header"));
        }
        Ok(())
    }
}

/// Decodes factors from `checkpoint` until coverage reaches `until`.
/// Returns each factor with its source start.
pub fn decode_window(
    view: StreamView<'_>,
    models: &Models,
    checkpoint: usize,
    until: u64,
) -> Result<Vec<(u64, Factor)>> {
    let mut dec = FactorDecoder::new(view, models, checkpoint)?;
    let mut out = Vec::new();
    while dec.position() < until {
        match dec.next_factor()? {
            Some(f) => out.push(f),
            None => break,
        }
    }
    Ok(out)
}

/// Decodes every factor of a part and checks stream totals.
pub fn decode_all(view: StreamView<'_>, models: &Models) -> Result<Vec<Factor>> {
    let mut dec = FactorDecoder::new(view, models, 0)?;
    let mut out = Vec::new();
    while let Some((_, f)) = dec.next_factor()? {
        out.push(f);
    }
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::CODE_N;
    use crate::huffman::byte_frequencies;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn m(ref_pos: u64, pieces: &[u64], gaps: &[u8]) -> Factor {
        Factor::Match {
            ref_pos,
            span: GappedSpan { pieces: pieces.to_vec(), gaps: gaps.to_vec() },
        }
    }

    fn parse_of(factors: Vec<Factor>) -> Parse {
        let source_len = factors.iter().map(Factor::source_len).sum();
        Parse { factors, source_len }
    }

    fn round_trip(parse: &Parse, params: &ParseParams) -> CodedStreams {
        let raw = encode_parse(parse, params).unwrap();
        let models = build_models([&raw]).unwrap();
        let coded = compress_streams(&raw, &models).unwrap();
        assert_eq!(decode_all(coded.view(), &models).unwrap(), parse.factors);
        coded
    }

    #[test]
    fn offset_layout() {
        let mut out = vec![];
        push_offset_delta(&mut out, 0).unwrap();
        push_offset_delta(&mut out, 200).unwrap();
        push_offset_delta(&mut out, -126).unwrap();
        push_offset_delta(&mut out, 125).unwrap();
        push_offset_delta(&mut out, -125).unwrap();
        assert_eq!(out, vec![125, 252, 200, 0, 0, 0, 251, 0x82, 0xFF, 0xFF, 0xFF, 250, 0]);
        assert!(push_offset_delta(&mut out, 1 << 40).is_err());
    }

    #[test]
    fn length_layout() {
        let mut out = vec![];
        for l in [1, 255, 256, 70_000] {
            push_length(&mut out, l).unwrap();
        }
        assert_eq!(out, vec![0, 254, 255, 0, 1, 0, 0, 255, 0x70, 0x11, 0x01, 0x00]);
        assert!(push_length(&mut out, 0).is_err());
    }

    #[test]
    fn first_match_and_escape_example() {
        let params = ParseParams::default();
        let parse = parse_of(vec![
            Factor::Literal(vec![0; 300]),
            m(300, &[50], &[]),
            m(150, &[20], &[]),
        ]);
        let raw = encode_parse(&parse, &params).unwrap();
        // second match: d = 350 - 150 = 200, predictor 0 -> 200
        assert_eq!(raw.stream(Stream::Offsets), &[125, 252, 200, 0, 0, 0]);
        round_trip(&parse, &params);
    }

    #[test]
    fn flags_pack_low_bits_first() {
        let params = ParseParams::default();
        let parse = parse_of(vec![
            Factor::Literal(vec![1]),
            m(1, &[20], &[]),
            m(21, &[20, 5], &[2]),
            m(47, &[20, 5, 5], &[2, 3]),
        ]);
        let raw = encode_parse(&parse, &params).unwrap();
        assert_eq!(raw.stream(Stream::Flags), &[228]);
        assert_eq!(raw.counts, [3, 7, 4, 4]);
        round_trip(&parse, &params);
    }

    #[test]
    fn n_run_and_reservoir_records() {
        let params = ParseParams::default();
        let parse = parse_of(vec![
            Factor::NRun(40),
            Factor::Reservoir { offset: 7, span: GappedSpan { pieces: vec![33, 4], gaps: vec![CODE_N] } },
            m(10, &[13], &[]),
        ]);
        let raw = encode_parse(&parse, &params).unwrap();
        // N run and reservoir leave the predictor at 0: d = 78 - 10 = 68.
        assert_eq!(raw.stream(Stream::Offsets), &[253, 254, 7, 0, 0, 0, 125 + 68]);
        assert_eq!(raw.stream(Stream::Lengths), &[39, 32, 3, 12]);
        round_trip(&parse, &params);
    }

    #[test]
    fn empty_parse() {
        let raw = encode_parse(&Parse::default(), &ParseParams::default()).unwrap();
        assert!(raw.streams.iter().all(Vec::is_empty));
        let models = Models::default();
        let coded = compress_streams(&raw, &models).unwrap();
        assert_eq!(coded.payload_bytes(), 0);
        assert!(decode_all(coded.view(), &models).unwrap().is_empty());
    }

    #[test]
    fn single_delta_model_is_one_bit() {
        let params = ParseParams::default();
        let parse = parse_of(vec![m(0, &[100], &[]), Factor::Literal(vec![1]), m(101, &[100], &[])]);
        let raw = encode_parse(&parse, &params).unwrap();
        let models = build_models([&raw]).unwrap();
        let off = models.get(Model::OffsetFirst).unwrap();
        assert_eq!(off.symbol_count(), 1);
        assert_eq!(off.code_len(125), 1);
    }

    #[test]
    fn shared_models_scale_invariant() {
        let params = ParseParams::default();
        let parse = parse_of(vec![Factor::Literal(vec![0, 1, 2, 3, 3]), m(0, &[30, 7], &[1]), m(900, &[300], &[])]);
        let raw = encode_parse(&parse, &params).unwrap();
        let single = build_models([&raw]).unwrap();
        let double = build_models([&raw, &raw]).unwrap();
        assert_eq!(single, double);
        let mut t = ModelTallies::default();
        t.add(&raw).unwrap();
        t.add(&raw).unwrap();
        assert_eq!(Models::from_tallies(&t).unwrap(), double);
        assert!(build_models(std::iter::empty()).is_err());
    }

    #[test]
    fn coded_size_matches_model_costs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let factors: Vec<Factor> = (0..500)
            .map(|i| match rng.gen_range(0..4) {
                0 => Factor::Literal((0..rng.gen_range(1..40)).map(|_| rng.gen_range(0..5)).collect()),
                1 => Factor::NRun(rng.gen_range(13..1000)),
                _ => m(rng.gen_range(0..5000u64) + i, &[rng.gen_range(13..600)], &[]),
            })
            .collect();
        let parse = parse_of(factors);
        let params = ParseParams { checkpoint_interval: 1 << 40, ..Default::default() };
        let raw = encode_parse(&parse, &params).unwrap();
        let models = build_models([&raw]).unwrap();
        let coded = compress_streams(&raw, &models).unwrap();
        // Independent recount: split streams by model by hand, cost each with
        // its own freshly built table.
        let mut per_model: [Vec<u8>; MODEL_COUNT] = Default::default();
        let offs = raw.stream(Stream::Offsets);
        let mut i = 0;
        while i < offs.len() {
            per_model[0].push(offs[i]);
            if [251, 252, 254].contains(&offs[i]) {
                per_model[1].extend_from_slice(&offs[i + 1..i + 5]);
                i += 4;
            }
            i += 1;
        }
        let lens = raw.stream(Stream::Lengths);
        let mut i = 0;
        while i < lens.len() {
            per_model[2].push(lens[i]);
            if lens[i] == 255 {
                per_model[3].extend_from_slice(&lens[i + 1..i + 5]);
                i += 4;
            }
            i += 1;
        }
        per_model[4] = raw.stream(Stream::Literals).to_vec();
        per_model[5] = raw.stream(Stream::Flags).to_vec();
        let expected_bits: [u64; 4] = [
            [0usize, 1].iter().map(|&k| cost(&per_model[k])).sum(),
            [2usize, 3].iter().map(|&k| cost(&per_model[k])).sum(),
            cost(&per_model[4]),
            cost(&per_model[5]),
        ];
        for (s, bits) in expected_bits.iter().enumerate() {
            assert_eq!(coded.payloads[s].len() as u64, bits.div_ceil(8), "stream {s}");
        }
        assert_eq!(decode_all(coded.view(), &models).unwrap(), parse.factors);

        fn cost(bytes: &[u8]) -> u64 {
            if bytes.is_empty() {
                return 0;
            }
            let f = byte_frequencies(bytes);
            build_table(&f).unwrap().cost_bits(&f).unwrap()
        }
    }

    #[test]
    fn windows_decode_independently() {
        let params = ParseParams { checkpoint_interval: 100, ..Default::default() };
        let parse = parse_of(vec![
            Factor::Literal(vec![1; 30]),
            m(40, &[20, 4], &[3]),
            m(1000, &[250], &[]),
            Factor::Literal(vec![2; 5]),
            m(300, &[90], &[]),
            Factor::NRun(20),
            m(350, &[13], &[]),
        ]);
        let coded = round_trip(&parse, &params);
        let starts: Vec<u64> = coded.checkpoints.iter().map(|c| c.source_pos).collect();
        // Factor starts: 0, 30, 55, 305, 310, 400, 420.
        assert_eq!(starts, vec![0, 305, 400]);
        let models = build_models([&encode_parse(&parse, &params).unwrap()]).unwrap();
        let view = coded.view();

        // Window starting mid-factor: the covering factor comes back first.
        let cp = view.checkpoint_for(200);
        assert_eq!(cp, 0);
        let got = decode_window(view, &models, view.checkpoint_for(350), 420).unwrap();
        assert_eq!(got[0], (305, Factor::Literal(vec![2; 5])));
        assert_eq!(got.last().unwrap().0, 400);

        assert!(decode_window(view, &models, 1, 305).unwrap().is_empty());

        let from_last = decode_window(view, &models, 2, 433).unwrap();
        assert_eq!(from_last, vec![(400, Factor::NRun(20)), (420, m(350, &[13], &[]))]);
        for w in coded.checkpoints.windows(2) {
            for s in 0..STREAM_COUNT {
                assert!(w[0].byte_offsets[s] <= w[1].byte_offsets[s]);
            }
        }
    }

    #[test]
    fn corrupt_streams_are_reported() {
        let params = ParseParams::default();
        let parse = parse_of(vec![Factor::Literal(vec![1, 2, 3]), m(0, &[300], &[])]);
        let raw = encode_parse(&parse, &params).unwrap();
        let models = build_models([&raw]).unwrap();
        let mut coded = compress_streams(&raw, &models).unwrap();
        coded.payloads[1].clear();
        assert!(decode_all(coded.view(), &models).unwrap_err().is_corruption());
    }

    #[test]
    fn invalid_factor_rejected() {
        let p = ParseParams::default();
        let bad = parse_of(vec![m(0, &[5, 5], &[])]);
        assert!(matches!(encode_parse(&bad, &p), Err(Error::InvalidFactor(_))));
        let too_many = parse_of(vec![m(0, &[5, 5, 5, 5], &[1, 1, 1])]);
        assert!(encode_parse(&too_many, &p).is_err());
    }

    fn arb_factor() -> impl Strategy<Value = Factor> {
        let span = (proptest::collection::vec(1u64..400, 1..=3), proptest::collection::vec(0u8..5, 2))
            .prop_map(|(pieces, g)| { let n = pieces.len() - 1; GappedSpan { pieces, gaps: g[..n].to_vec() } });
        prop_oneof![
            proptest::collection::vec(0u8..5, 1..80).prop_map(Factor::Literal),
            (1u64..100_000).prop_map(Factor::NRun),
            (0u64..2000, span.clone()).prop_map(|(ref_pos, span)| Factor::Match { ref_pos, span }),
            (0u64..1_000_000, span).prop_map(|(offset, span)| Factor::Reservoir { offset, span }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_identity(factors in proptest::collection::vec(arb_factor(), 0..60), interval in 1usize..5000) {
            // Reference positions must stay non-negative relative to their start.
            let mut pos = 0u64;
            let factors: Vec<Factor> = factors.into_iter().map(|f| {
                let f = match f { Factor::Match { ref_pos, span } => Factor::Match { ref_pos: ref_pos.min(pos + 3000), span }, o => o };
                pos += f.source_len();
                f
            }).collect();
            let parse = parse_of(factors);
            let params = ParseParams { checkpoint_interval: interval, ..Default::default() };
            let raw = encode_parse(&parse, &params).unwrap();
            let models = build_models([&raw]).unwrap();
            let coded = compress_streams(&raw, &models).unwrap();
            let view = coded.view();
            prop_assert_eq!(&decode_all(view, &models).unwrap(), &parse.factors);
            // Every window decodes on its own and agrees with the full decode.
            let starts = parse.factor_starts();
            for (w, cp) in coded.checkpoints.iter().enumerate() {
                let got = decode_window(view, &models, w, parse.source_len).unwrap();
                let first = starts.iter().position(|&s| s == cp.source_pos).unwrap();
                let want: Vec<(u64, Factor)> = starts[first..].iter().copied().zip(parse.factors[first..].iter().cloned()).collect();
                prop_assert_eq!(got, want);
            }
            // Re-encoding is byte-identical.
            let again = compress_streams(&encode_parse(&parse, &params).unwrap(), &models).unwrap();
            prop_assert_eq!(again, coded);
        }
    }
}
