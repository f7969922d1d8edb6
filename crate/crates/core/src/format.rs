//! On-disk container.
//!
//! ```text
//! "RLZG" | version u8 | header_len u64 | header | header_xxh64 u64
//!        | payload_len u64 | payload_xxh64 u64 | payload
//! ```
//!
//! Fixed-width integers are little-endian. The header is a list of
//! sections, each `tag u8 | len u64 | body`; readers skip unknown tags.
//! Section bodies use LEB128 varints. The payload holds the coded
//! reference followed by the four coded streams of every part.

use std::ops::Range;

use xxhash_rust::xxh64::xxh64;

use crate::codec::{Checkpoint, Models, MODEL_COUNT, STREAM_COUNT};
use crate::error::{Error, Result};
use crate::genome::{Granularity, Record};
use crate::huffman::{HuffmanTable, SERIALIZED_TABLE_LEN};
use crate::parse::ParseParams;
use crate::reference::{RefBlockIndex, ReferenceStore, ReservoirEntry, ReservoirProvenance};

pub const MAGIC: &[u8; 4] = b"RLZG";
pub const FORMAT_VERSION: u8 = 1;

const TAG_PARAMS: u8 = 1;
const TAG_SEQUENCES: u8 = 2;
const TAG_REFERENCE: u8 = 3;
const TAG_UNIVERSES: u8 = 4;
const TAG_MODELS: u8 = 5;
const TAG_PARTS: u8 = 6;

const CHECKSUM_SEED: u64 = 0;

pub fn section_name(tag: u8) -> &'static str {
    match tag {
        TAG_PARAMS => "params",
        TAG_SEQUENCES => "sequences",
        TAG_REFERENCE => "reference",
        TAG_UNIVERSES => "universes",
        TAG_MODELS => "models",
        TAG_PARTS => "parts",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceEntry {
    pub name: String,
    pub records: Vec<Record>,
}

impl SequenceEntry {
    pub fn len(&self) -> u64 {
        self.records.iter().map(|r| r.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A matching domain: a slice of the reference plus its own reservoir.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniverseEntry {
    pub ref_start: u64,
    pub ref_len: u64,
    pub provenance: ReservoirProvenance,
}

/// A contiguous range of one sequence, parsed against one universe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartEntry {
    pub sequence: u32,
    pub universe: u32,
    pub source_start: u64,
    pub source_len: u64,
    /// Byte ranges of the coded streams inside the payload.
    pub streams: [Range<u64>; STREAM_COUNT],
    pub counts: [u64; STREAM_COUNT],
    pub checkpoints: Vec<Checkpoint>,
}

impl PartEntry {
    pub fn source_range(&self) -> Range<u64> {
        self.source_start..self.source_start + self.source_len
    }

    pub fn payload_bytes(&self) -> u64 {
        self.streams.iter().map(|r| r.end - r.start).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub params: ParseParams,
    pub granularity: Granularity,
    pub reference_index: usize,
    pub sequences: Vec<SequenceEntry>,
    pub reference: ReferenceStore,
    pub reference_payload: Range<u64>,
    pub universes: Vec<UniverseEntry>,
    pub models: Models,
    pub parts: Vec<PartEntry>,
}

/// A parsed archive borrowing its payload.
#[derive(Debug, Clone)]
pub struct Container<'a> {
    pub header: ArchiveHeader,
    pub payload: &'a [u8],
    payload_checksum: u64,
    /// `(tag, body length)` for every header section, in file order.
    pub sections: Vec<(u8, u64)>,
    pub file_len: u64,
}

impl Container<'_> {
    pub fn verify_payload(&self) -> Result<()> {
        if xxh64(self.payload, CHECKSUM_SEED) != self.payload_checksum {
            return Err(Error::corrupt("payload checksum mismatch"));
        }
        Ok(())
    }

    /// Fixed framing bytes outside header sections and payload.
    pub fn framing_bytes(&self) -> u64 {
        let section_total: u64 = self.sections.iter().map(|&(_, len)| 9 + len).sum();
        self.file_len - self.payload.len() as u64 - section_total
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn var(&mut self, v: u64) {
        leb128::write::unsigned(&mut self.0, v).expect("writing to a Vec cannot fail");
    }

    fn str(&mut self, s: &str) {
        self.var(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Dec<'a>(&'a [u8]);

impl<'a> Dec<'a> {
    fn var(&mut self) -> Result<u64> {
        leb128::read::unsigned(&mut self.0).map_err(|_| Error::corrupt("bad varint in header"))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.var()?).map_err(|_| Error::corrupt("header value exceeds usize"))
    }

    fn u32(&mut self) -> Result<u32> {
        u32::try_from(self.var()?).map_err(|_| Error::corrupt("header value exceeds u32"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Truncated);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::corrupt("name is not UTF-8"))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A count that must be plausible for the remaining bytes.
    fn count(&mut self, min_item_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_item_bytes) > self.0.len() {
            return Err(Error::corrupt("header count exceeds section size"));
        }
        Ok(n)
    }

    fn done(&self) -> Result<()> {
        if !self.0.is_empty() {
            return Err(Error::corrupt("trailing bytes in header section"));
        }
        Ok(())
    }
}

fn encode_params(h: &ArchiveHeader, e: &mut Enc) {
    let p = &h.params;
    for v in [
        p.min_match as u64,
        p.min_extension as u64,
        p.min_phrase as u64,
        p.gap_limit as u64,
        p.cheap_offset_bound,
        p.length_slack as u64,
        p.candidate_cap as u64,
        p.checkpoint_interval as u64,
    ] {
        e.var(v);
    }
    e.var(match h.granularity {
        Granularity::WholeSequence => 0,
        Granularity::PerRecord => 1,
    });
    e.var(h.reference_index as u64);
}

fn encode_sequences(h: &ArchiveHeader, e: &mut Enc) {
    e.var(h.sequences.len() as u64);
    for s in &h.sequences {
        e.str(&s.name);
        e.var(s.records.len() as u64);
        for r in &s.records {
            e.str(&r.name);
            e.var(r.len);
        }
    }
}

fn encode_reference(h: &ArchiveHeader, e: &mut Enc) {
    let r = &h.reference;
    e.var(r.len);
    e.var(r.index.block_size as u64);
    e.var(r.index.start_offsets.len() as u64);
    let mut prev = 0;
    for &o in &r.index.start_offsets {
        e.var(o - prev);
        prev = o;
    }
    match &r.table {
        Some(t) => {
            e.0.push(1);
            e.0.extend_from_slice(&t.serialize());
        }
        None => e.0.push(0),
    }
    e.var(h.reference_payload.start);
    e.var(h.reference_payload.end - h.reference_payload.start);
}

fn encode_universes(h: &ArchiveHeader, e: &mut Enc) {
    e.var(h.universes.len() as u64);
    for u in &h.universes {
        e.var(u.ref_start);
        e.var(u.ref_len);
        e.var(u.provenance.min_len());
        e.var(u.provenance.entries().len() as u64);
        for en in u.provenance.entries() {
            e.var(en.origin_sequence as u64);
            e.var(en.origin_position);
            e.var(en.len);
        }
    }
}

fn encode_models(h: &ArchiveHeader, e: &mut Enc) {
    for t in &h.models.tables {
        match t {
            Some(t) => {
                e.0.push(1);
                e.0.extend_from_slice(&t.serialize());
            }
            None => e.0.push(0),
        }
    }
}

fn encode_parts(h: &ArchiveHeader, e: &mut Enc) {
    e.var(h.parts.len() as u64);
    for p in &h.parts {
        e.var(p.sequence as u64);
        e.var(p.universe as u64);
        e.var(p.source_start);
        e.var(p.source_len);
        for r in &p.streams {
            e.var(r.start);
            e.var(r.end - r.start);
        }
        for &c in &p.counts {
            e.var(c);
        }
        e.var(p.checkpoints.len() as u64);
        let mut prev = Checkpoint {
            source_pos: 0,
            byte_offsets: [0; STREAM_COUNT],
            counts: [0; STREAM_COUNT],
        };
        for cp in &p.checkpoints {
            e.var(cp.source_pos - prev.source_pos);
            for i in 0..STREAM_COUNT {
                e.var(cp.byte_offsets[i] - prev.byte_offsets[i]);
                e.var(cp.counts[i] - prev.counts[i]);
            }
            prev = cp.clone();
        }
    }
}

type SectionWriter = fn(&ArchiveHeader, &mut Enc);

/// Serializes a complete archive file.
pub fn write_archive(header: &ArchiveHeader, payload: &[u8]) -> Vec<u8> {
    let mut head = Vec::new();
    let writers: [(u8, SectionWriter); 6] = [
        (TAG_PARAMS, encode_params),
        (TAG_SEQUENCES, encode_sequences),
        (TAG_REFERENCE, encode_reference),
        (TAG_UNIVERSES, encode_universes),
        (TAG_MODELS, encode_models),
        (TAG_PARTS, encode_parts),
    ];
    for (tag, write) in writers {
        let mut e = Enc(Vec::new());
        write(header, &mut e);
        head.push(tag);
        head.extend_from_slice(&(e.0.len() as u64).to_le_bytes());
        head.extend_from_slice(&e.0);
    }

    let mut out = Vec::with_capacity(head.len() + payload.len() + 37);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&xxh64(&head, CHECKSUM_SEED).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&xxh64(payload, CHECKSUM_SEED).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

#[derive(Default)]
struct Sections {
    params: Option<(ParseParams, Granularity, usize)>,
    sequences: Option<Vec<SequenceEntry>>,
    reference: Option<(ReferenceStore, Range<u64>)>,
    universes: Option<Vec<UniverseEntry>>,
    models: Option<Models>,
    parts: Option<Vec<PartEntry>>,
}

fn decode_params(d: &mut Dec) -> Result<(ParseParams, Granularity, usize)> {
    let params = ParseParams {
        min_match: d.usize()?,
        min_extension: d.usize()?,
        min_phrase: d.usize()?,
        gap_limit: d.usize()?,
        cheap_offset_bound: d.var()?,
        length_slack: d.usize()?,
        candidate_cap: d.usize()?,
        checkpoint_interval: d.usize()?,
    };
    params
        .validate()
        .map_err(|e| Error::corrupt(format!("stored parameters invalid: {e}")))?;
    let granularity = match d.var()? {
        0 => Granularity::WholeSequence,
        1 => Granularity::PerRecord,
        g => return Err(Error::corrupt(format!("unknown granularity {g}"))),
    };
    Ok((params, granularity, d.usize()?))
}

fn decode_sequences(d: &mut Dec) -> Result<Vec<SequenceEntry>> {
    let n = d.count(2)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = d.str()?;
        let nr = d.count(2)?;
        let mut records = Vec::with_capacity(nr);
        for _ in 0..nr {
            let name = d.str()?;
            records.push(Record { name, len: d.var()? });
        }
        out.push(SequenceEntry { name, records });
    }
    Ok(out)
}

fn decode_table(d: &mut Dec) -> Result<Option<HuffmanTable>> {
    match d.u8()? {
        0 => Ok(None),
        1 => {
            let bytes = d.take(SERIALIZED_TABLE_LEN)?;
            HuffmanTable::deserialize(bytes)
                .map(Some)
                .map_err(|e| Error::corrupt(format!("bad Huffman table: {e}")))
        }
        f => Err(Error::corrupt(format!("bad table presence flag {f}"))),
    }
}

fn decode_reference(d: &mut Dec) -> Result<(ReferenceStore, Range<u64>)> {
    let len = d.var()?;
    let block_size = d.usize()?;
    if block_size == 0 {
        return Err(Error::corrupt("zero reference block size"));
    }
    let n = d.count(1)?;
    if n as u64 != len.div_ceil(block_size as u64) + 1 {
        return Err(Error::corrupt("reference block count disagrees with its length"));
    }
    let mut start_offsets = Vec::with_capacity(n);
    let mut acc = 0u64;
    for _ in 0..n {
        acc = acc
            .checked_add(d.var()?)
            .ok_or_else(|| Error::corrupt("reference block offset overflow"))?;
        start_offsets.push(acc);
    }
    let table = decode_table(d)?;
    let start = d.var()?;
    let plen = d.var()?;
    if start_offsets.last().copied().unwrap_or(0) > plen || start_offsets.first().copied().unwrap_or(0) != 0 {
        return Err(Error::corrupt("reference block offsets exceed its payload"));
    }
    let store = ReferenceStore {
        len,
        index: RefBlockIndex {
            block_size,
            start_offsets,
        },
        table,
    };
    Ok((store, start..start.checked_add(plen).ok_or_else(|| Error::corrupt("range overflow"))?))
}

fn decode_universes(d: &mut Dec) -> Result<Vec<UniverseEntry>> {
    let n = d.count(4)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ref_start = d.var()?;
        let ref_len = d.var()?;
        let min_len = d.var()?;
        let ne = d.count(3)?;
        let mut entries = Vec::with_capacity(ne);
        for _ in 0..ne {
            entries.push(ReservoirEntry {
                origin_sequence: d.u32()?,
                origin_position: d.var()?,
                len: d.var()?,
            });
        }
        let provenance = ReservoirProvenance::from_entries(min_len, entries)
            .map_err(|e| Error::corrupt(format!("bad reservoir provenance: {e}")))?;
        out.push(UniverseEntry {
            ref_start,
            ref_len,
            provenance,
        });
    }
    Ok(out)
}

fn decode_models(d: &mut Dec) -> Result<Models> {
    let mut models = Models::default();
    for i in 0..MODEL_COUNT {
        models.tables[i] = decode_table(d)?;
    }
    Ok(models)
}

fn decode_parts(d: &mut Dec) -> Result<Vec<PartEntry>> {
    let n = d.count(16)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let sequence = d.u32()?;
        let universe = d.u32()?;
        let source_start = d.var()?;
        let source_len = d.var()?;
        let mut streams: [Range<u64>; STREAM_COUNT] = Default::default();
        for r in &mut streams {
            let s = d.var()?;
            let l = d.var()?;
            *r = s..s.checked_add(l).ok_or_else(|| Error::corrupt("range overflow"))?;
        }
        let mut counts = [0u64; STREAM_COUNT];
        for c in &mut counts {
            *c = d.var()?;
        }
        let nc = d.count(9)?;
        let mut checkpoints = Vec::with_capacity(nc);
        let mut prev = Checkpoint {
            source_pos: 0,
            byte_offsets: [0; STREAM_COUNT],
            counts: [0; STREAM_COUNT],
        };
        let overflow = || Error::corrupt("checkpoint table overflow");
        for _ in 0..nc {
            let mut cp = prev.clone();
            cp.source_pos = cp.source_pos.checked_add(d.var()?).ok_or_else(overflow)?;
            for i in 0..STREAM_COUNT {
                cp.byte_offsets[i] = cp.byte_offsets[i].checked_add(d.var()?).ok_or_else(overflow)?;
                cp.counts[i] = cp.counts[i].checked_add(d.var()?).ok_or_else(overflow)?;
            }
            checkpoints.push(cp.clone());
            prev = cp;
        }
        out.push(PartEntry {
            sequence,
            universe,
            source_start,
            source_len,
            streams,
            counts,
            checkpoints,
        });
    }
    Ok(out)
}

/// Parses the framing and header, verifying the header checksum. The
/// payload checksum is checked by [`Container::verify_payload`].
pub fn read_archive(bytes: &[u8]) -> Result<Container<'_>> {
    let mut d = Dec(bytes);
    let fail_trunc = |e: Error| match e {
        Error::Truncated => Error::corrupt("archive truncated"),
        other => other,
    };
    let magic = d.take(4).map_err(|_| Error::corrupt("not an archive (too short)"))?;
    if magic != MAGIC {
        return Err(Error::corrupt("bad magic"));
    }
    let version = d.u8().map_err(fail_trunc)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = d.u64_le().map_err(fail_trunc)?;
    let header_len = usize::try_from(header_len).map_err(|_| Error::corrupt("header too large"))?;
    let head = d.take(header_len).map_err(fail_trunc)?;
    let header_sum = d.u64_le().map_err(fail_trunc)?;
    if xxh64(head, CHECKSUM_SEED) != header_sum {
        return Err(Error::corrupt("header checksum mismatch"));
    }
    let payload_len = d.u64_le().map_err(fail_trunc)?;
    let payload_checksum = d.u64_le().map_err(fail_trunc)?;
    if payload_len != d.0.len() as u64 {
        return Err(Error::corrupt(format!(
            "payload length {payload_len} but {} bytes present",
            d.0.len()
        )));
    }
    let payload = d.0;

    let mut s = Sections::default();
    let mut sections = Vec::new();
    let mut h = Dec(head);
    while !h.0.is_empty() {
        let tag = h.u8().map_err(fail_trunc)?;
        let len = h.u64_le().map_err(fail_trunc)?;
        let body = h
            .take(usize::try_from(len).map_err(|_| Error::corrupt("section too large"))?)
            .map_err(fail_trunc)?;
        sections.push((tag, len));
        let mut b = Dec(body);
        match tag {
            TAG_PARAMS => s.params = Some(decode_params(&mut b).map_err(fail_trunc)?),
            TAG_SEQUENCES => s.sequences = Some(decode_sequences(&mut b).map_err(fail_trunc)?),
            TAG_REFERENCE => s.reference = Some(decode_reference(&mut b).map_err(fail_trunc)?),
            TAG_UNIVERSES => s.universes = Some(decode_universes(&mut b).map_err(fail_trunc)?),
            TAG_MODELS => s.models = Some(decode_models(&mut b).map_err(fail_trunc)?),
            TAG_PARTS => s.parts = Some(decode_parts(&mut b).map_err(fail_trunc)?),
            _ => continue,
        }
        b.done()?;
    }
    let missing = |name: &str| Error::corrupt(format!("missing {name} section"));
    let (params, granularity, reference_index) = s.params.ok_or_else(|| missing("params"))?;
    let (reference, reference_payload) = s.reference.ok_or_else(|| missing("reference"))?;
    let header = ArchiveHeader {
        params,
        granularity,
        reference_index,
        sequences: s.sequences.ok_or_else(|| missing("sequences"))?,
        reference,
        reference_payload,
        universes: s.universes.ok_or_else(|| missing("universes"))?,
        models: s.models.ok_or_else(|| missing("models"))?,
        parts: s.parts.ok_or_else(|| missing("parts"))?,
    };
    validate_header(&header, payload.len() as u64)?;
    Ok(Container {
        header,
        payload,
        payload_checksum,
        sections,
        file_len: bytes.len() as u64,
    })
}

fn validate_header(h: &ArchiveHeader, payload_len: u64) -> Result<()> {
    let within = |r: &Range<u64>| r.start <= r.end && r.end <= payload_len;
    if h.sequences.is_empty() {
        return Err(Error::corrupt("archive has no sequences"));
    }
    let reference = h
        .sequences
        .get(h.reference_index)
        .ok_or_else(|| Error::corrupt("reference index out of range"))?;
    if reference.len() != h.reference.len {
        return Err(Error::corrupt("reference length disagrees with its sequence entry"));
    }
    if !within(&h.reference_payload) {
        return Err(Error::corrupt("reference payload out of bounds"));
    }
    for u in &h.universes {
        if u.ref_start.checked_add(u.ref_len).is_none_or(|e| e > h.reference.len) {
            return Err(Error::corrupt("universe reference range out of bounds"));
        }
        if u.provenance.min_len() != h.params.min_phrase as u64 {
            return Err(Error::corrupt("reservoir phrase minimum disagrees with parameters"));
        }
        for e in u.provenance.entries() {
            let seq = h
                .sequences
                .get(e.origin_sequence as usize)
                .ok_or_else(|| Error::corrupt("reservoir origin sequence out of range"))?;
            if e.origin_position.checked_add(e.len).is_none_or(|end| end > seq.len()) {
                return Err(Error::corrupt("reservoir origin range out of bounds"));
            }
        }
    }
    for p in &h.parts {
        let seq = h
            .sequences
            .get(p.sequence as usize)
            .ok_or_else(|| Error::corrupt("part sequence out of range"))?;
        if p.sequence as usize == h.reference_index {
            return Err(Error::corrupt("part belongs to the reference sequence"));
        }
        if p.universe as usize >= h.universes.len() {
            return Err(Error::corrupt("part universe out of range"));
        }
        if p.source_start.checked_add(p.source_len).is_none_or(|e| e > seq.len()) {
            return Err(Error::corrupt("part source range out of bounds"));
        }
        if !p.streams.iter().all(within) {
            return Err(Error::corrupt("part stream out of bounds"));
        }
        if p.source_len > 0 && p.checkpoints.first().is_none_or(|c| c.source_pos != 0) {
            return Err(Error::corrupt("part lacks an initial checkpoint"));
        }
        for (i, cp) in p.checkpoints.iter().enumerate() {
            if i > 0 && cp.source_pos <= p.checkpoints[i - 1].source_pos {
                return Err(Error::corrupt("checkpoints not increasing"));
            }
            if cp.source_pos >= p.source_len.max(1) {
                return Err(Error::corrupt("checkpoint beyond part end"));
            }
            for s in 0..STREAM_COUNT {
                if cp.byte_offsets[s] > p.streams[s].end - p.streams[s].start || cp.counts[s] > p.counts[s] {
                    return Err(Error::corrupt("checkpoint beyond stream end"));
                }
            }
        }
    }
    Ok(())
}
