//! Compressing a collection into an archive, full decompression, range
//! extraction and reference selection.
//!
//! Sequences other than the reference are cut into parts. In whole-sequence
//! mode every sequence is one part matched against the whole reference; in
//! per-record mode each record is a part matched against its counterpart
//! reference record. Each matching domain ("universe") has its own index
//! and reservoir. The reservoir is never stored: the archive keeps only
//! where each phrase came from, and phrases are recovered from the literal
//! runs of their origin sequences.

use std::collections::HashMap;
use std::ops::Range;

use rayon::prelude::*;

use crate::codec::{
    build_models, compress_streams, decode_all, encode_parse, CodedStreams, FactorDecoder, Models, StreamView,
    STREAM_COUNT,
};
use crate::error::{Error, Result};
use crate::format::{read_archive, section_name, write_archive, ArchiveHeader, Container, PartEntry, SequenceEntry, UniverseEntry};
use crate::genome::{Collection, Granularity, Sequence, CODE_N};
use crate::index::KmerIndex;
use crate::parse::{apply_factor_slice, parse_sequence, Factor, Parse, ParseParams, ReservoirSink, SymbolSource};
use crate::reference::{encode_reference, ReservoirEntry, ReservoirProvenance};

/// Factor tallies for one or more parses.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FactorCounts {
    pub literal_runs: u64,
    pub literal_symbols: u64,
    pub matches: u64,
    pub gapped_matches: u64,
    pub gap_symbols: u64,
    pub n_runs: u64,
    pub reservoir_matches: u64,
    pub reservoir_phrases: u64,
}

impl FactorCounts {
    pub fn of(parse: &Parse, params: &ParseParams) -> Self {
        let mut c = FactorCounts::default();
        c.add(parse, params);
        c
    }

    pub fn add(&mut self, parse: &Parse, params: &ParseParams) {
        for f in &parse.factors {
            match f {
                Factor::Literal(s) => {
                    self.literal_runs += 1;
                    self.literal_symbols += s.len() as u64;
                    if s.len() >= params.min_phrase {
                        self.reservoir_phrases += 1;
                    }
                }
                Factor::Match { span, .. } => {
                    self.matches += 1;
                    self.gap_symbols += span.gaps.len() as u64;
                    if !span.gaps.is_empty() {
                        self.gapped_matches += 1;
                    }
                }
                Factor::Reservoir { span, .. } => {
                    self.reservoir_matches += 1;
                    self.gap_symbols += span.gaps.len() as u64;
                    if !span.gaps.is_empty() {
                        self.gapped_matches += 1;
                    }
                }
                Factor::NRun(_) => self.n_runs += 1,
            }
        }
    }

    pub fn merge(&mut self, o: &FactorCounts) {
        self.literal_runs += o.literal_runs;
        self.literal_symbols += o.literal_symbols;
        self.matches += o.matches;
        self.gapped_matches += o.gapped_matches;
        self.gap_symbols += o.gap_symbols;
        self.n_runs += o.n_runs;
        self.reservoir_matches += o.reservoir_matches;
        self.reservoir_phrases += o.reservoir_phrases;
    }

    /// Factors carrying an offset record.
    pub fn offset_factors(&self) -> u64 {
        self.matches + self.reservoir_matches + self.n_runs
    }

    /// Symbols spelled out explicitly: literal runs plus gap symbols.
    pub fn explicit_symbols(&self) -> u64 {
        self.literal_symbols + self.gap_symbols
    }
}

/// What [`compress_with_report`] learned while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompressReport {
    /// Factor tallies per non-reference sequence, in collection order.
    pub sequences: Vec<(String, FactorCounts)>,
    pub total: FactorCounts,
}

struct ProvenanceSink<'a> {
    provenance: &'a mut ReservoirProvenance,
    sequence: u32,
    base: u64,
}

impl ReservoirSink for ProvenanceSink<'_> {
    fn accept(&mut self, source_pos: u64, phrase: &[u8]) -> Result<u64> {
        self.provenance.append(ReservoirEntry {
            origin_sequence: self.sequence,
            origin_position: self.base + source_pos,
            len: phrase.len() as u64,
        })
    }
}

struct PartPlan {
    sequence: usize,
    universe: usize,
    range: Range<u64>,
}

/// Splits non-reference sequences into parts and assigns universes.
/// Returns the universe reference ranges and the parts in parse order.
fn plan_parts(collection: &Collection) -> (Vec<Range<u64>>, Vec<PartPlan>) {
    let reference = collection.reference();
    let ri = collection.reference_index();
    let mut parts = Vec::new();
    match collection.granularity() {
        Granularity::WholeSequence => {
            for (i, s) in collection.sequences().iter().enumerate() {
                if i != ri {
                    parts.push(PartPlan {
                        sequence: i,
                        universe: 0,
                        range: 0..s.len() as u64,
                    });
                }
            }
            let whole = 0..reference.len() as u64;
            (vec![whole], parts)
        }
        Granularity::PerRecord => {
            let mut universes: Vec<Range<u64>> = reference
                .record_spans()
                .map(|(start, r)| start..start + r.len)
                .collect();
            let mut by_name = HashMap::new();
            for (j, r) in reference.records().iter().enumerate() {
                by_name.entry(r.name.as_str()).or_insert(j);
            }
            let orphan = universes.len();
            let mut orphan_used = false;
            for (i, s) in collection.sequences().iter().enumerate() {
                if i == ri {
                    continue;
                }
                for (j, (start, r)) in s.record_spans().enumerate() {
                    let universe = match by_name.get(r.name.as_str()) {
                        Some(&u) => u,
                        None if j < orphan => j,
                        None => {
                            orphan_used = true;
                            orphan
                        }
                    };
                    parts.push(PartPlan {
                        sequence: i,
                        universe,
                        range: start..start + r.len,
                    });
                }
            }
            if orphan_used {
                universes.push(0..0);
            }
            (universes, parts)
        }
    }
}

pub fn compress(collection: &Collection, params: &ParseParams) -> Result<Vec<u8>> {
    compress_with_report(collection, params).map(|(bytes, _)| bytes)
}

/// Compresses `collection` and reports factor statistics.
pub fn compress_with_report(collection: &Collection, params: &ParseParams) -> Result<(Vec<u8>, CompressReport)> {
    params.validate()?;
    let reference = collection.reference();
    let ref_symbols = reference.symbols();
    let (ref_store, ref_payload) = encode_reference(ref_symbols)?;
    let (universe_ranges, plans) = plan_parts(collection);

    let mut indexes: Vec<Option<KmerIndex>> = vec![None; universe_ranges.len()];
    let mut provenances = vec![ReservoirProvenance::new(params.min_phrase as u64); universe_ranges.len()];
    let mut raws = Vec::with_capacity(plans.len());
    let mut report = CompressReport::default();
    let mut per_seq: Vec<FactorCounts> = vec![FactorCounts::default(); collection.sequences().len()];

    for plan in &plans {
        let r = &universe_ranges[plan.universe];
        let index = match &mut indexes[plan.universe] {
            Some(ix) => ix,
            slot => slot.insert(KmerIndex::build(
                &ref_symbols[r.start as usize..r.end as usize],
                params.min_match,
                params.candidate_cap,
            )?),
        };
        let seq = &collection.sequences()[plan.sequence];
        let source = &seq.symbols()[plan.range.start as usize..plan.range.end as usize];
        let mut sink = ProvenanceSink {
            provenance: &mut provenances[plan.universe],
            sequence: plan.sequence as u32,
            base: plan.range.start,
        };
        let parse = parse_sequence(index, source, params, &mut sink)?;
        per_seq[plan.sequence].add(&parse, params);
        raws.push(encode_parse(&parse, params)?);
        log::debug!(
            "parsed {}[{}..{}]: {} factors",
            seq.name(),
            plan.range.start,
            plan.range.end,
            parse.factors.len()
        );
    }

    let models = if raws.is_empty() {
        Models::default()
    } else {
        build_models(&raws)?
    };

    let mut payload = ref_payload;
    let reference_payload = 0..payload.len() as u64;
    let mut parts = Vec::with_capacity(plans.len());
    for (plan, raw) in plans.iter().zip(&raws) {
        let coded: CodedStreams = compress_streams(raw, &models)?;
        let mut streams: [Range<u64>; STREAM_COUNT] = Default::default();
        for (r, bytes) in streams.iter_mut().zip(&coded.payloads) {
            let start = payload.len() as u64;
            payload.extend_from_slice(bytes);
            *r = start..payload.len() as u64;
        }
        parts.push(PartEntry {
            sequence: plan.sequence as u32,
            universe: plan.universe as u32,
            source_start: plan.range.start,
            source_len: plan.range.end - plan.range.start,
            streams,
            counts: coded.counts,
            checkpoints: coded.checkpoints,
        });
    }

    for (i, s) in collection.sequences().iter().enumerate() {
        if i != collection.reference_index() {
            report.total.merge(&per_seq[i]);
            report.sequences.push((s.name().to_string(), per_seq[i].clone()));
        }
    }

    let header = ArchiveHeader {
        params: *params,
        granularity: collection.granularity(),
        reference_index: collection.reference_index(),
        sequences: collection
            .sequences()
            .iter()
            .map(|s| SequenceEntry {
                name: s.name().to_string(),
                records: s.records().to_vec(),
            })
            .collect(),
        reference: ref_store,
        reference_payload,
        universes: universe_ranges
            .into_iter()
            .zip(provenances)
            .map(|(r, provenance)| UniverseEntry {
                ref_start: r.start,
                ref_len: r.end - r.start,
                provenance,
            })
            .collect(),
        models,
        parts,
    };
    Ok((write_archive(&header, &payload), report))
}

/// Decompresses a whole archive.
pub fn decompress(bytes: &[u8]) -> Result<Collection> {
    Archive::open(bytes)?.decompress(0)
}

/// Extracts `[start, end)` of the named sequence.
pub fn extract(bytes: &[u8], name: &str, start: u64, end: u64) -> Result<Vec<u8>> {
    Archive::open(bytes)?.extract(name, start, end)
}

/// Work done by one extraction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractStats {
    /// Coded bytes pulled from factor streams and reference blocks.
    pub payload_bytes_read: u64,
    pub reference_blocks: u64,
    /// Checkpoint windows entered while decoding factors.
    pub windows: u64,
    /// Reservoir phrases resolved through their origin sequence.
    pub reservoir_lookups: u64,
}

impl ExtractStats {
    fn merge(&mut self, o: &ExtractStats) {
        self.payload_bytes_read += o.payload_bytes_read;
        self.reference_blocks += o.reference_blocks;
        self.windows += o.windows;
        self.reservoir_lookups += o.reservoir_lookups;
    }
}

/// Section and payload sizes of an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveStats {
    pub file_bytes: u64,
    pub framing_bytes: u64,
    pub sections: Vec<(&'static str, u64)>,
    pub reference_payload_bytes: u64,
    pub relative_payload_bytes: u64,
    pub stream_bytes: [u64; STREAM_COUNT],
    pub sequences: usize,
    pub parts: usize,
    pub universes: usize,
    pub checkpoints: usize,
    pub reservoir_phrases: usize,
    pub reservoir_symbols: u64,
    pub reference_symbols: u64,
    pub relative_symbols: u64,
}

impl ArchiveStats {
    fn section(&self, name: &str) -> u64 {
        self.sections.iter().filter(|(n, _)| *n == name).map(|&(_, l)| l).sum()
    }

    /// Bytes attributable to the reference: its payload and header section.
    pub fn reference_bytes(&self) -> u64 {
        self.reference_payload_bytes + self.section("reference")
    }

    /// Bytes attributable to the non-reference sequences: stream payloads,
    /// part tables, reservoir provenance and the shared models.
    pub fn relative_bytes(&self) -> u64 {
        self.relative_payload_bytes + self.section("parts") + self.section("universes") + self.section("models")
    }

    pub fn total_symbols(&self) -> u64 {
        self.reference_symbols + self.relative_symbols
    }

    pub fn bits_per_base(&self) -> f64 {
        ratio(self.file_bytes, self.total_symbols())
    }

    pub fn relative_bits_per_base(&self) -> f64 {
        ratio(self.relative_bytes(), self.relative_symbols)
    }

    /// `key=value` pairs in a stable order.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![
            ("file_bytes".into(), self.file_bytes.to_string()),
            ("framing_bytes".into(), self.framing_bytes.to_string()),
        ];
        for (name, len) in &self.sections {
            kv.push((format!("section_{name}_bytes"), len.to_string()));
        }
        let names = ["offsets", "lengths", "literals", "flags"];
        kv.extend([
            ("reference_payload_bytes".into(), self.reference_payload_bytes.to_string()),
            ("relative_payload_bytes".into(), self.relative_payload_bytes.to_string()),
        ]);
        for (n, b) in names.iter().zip(self.stream_bytes) {
            kv.push((format!("stream_{n}_bytes"), b.to_string()));
        }
        kv.extend([
            ("reference_bytes".into(), self.reference_bytes().to_string()),
            ("relative_bytes".into(), self.relative_bytes().to_string()),
            ("sequences".into(), self.sequences.to_string()),
            ("parts".into(), self.parts.to_string()),
            ("universes".into(), self.universes.to_string()),
            ("checkpoints".into(), self.checkpoints.to_string()),
            ("reservoir_phrases".into(), self.reservoir_phrases.to_string()),
            ("reservoir_symbols".into(), self.reservoir_symbols.to_string()),
            ("reference_symbols".into(), self.reference_symbols.to_string()),
            ("relative_symbols".into(), self.relative_symbols.to_string()),
            ("bpb".into(), format!("{:.6}", self.bits_per_base())),
            ("bpb_relative".into(), format!("{:.6}", self.relative_bits_per_base())),
        ]);
        kv
    }
}

fn ratio(bytes: u64, symbols: u64) -> f64 {
    if symbols == 0 {
        0.0
    } else {
        bytes as f64 * 8.0 / symbols as f64
    }
}

fn as_corrupt(e: Error) -> Error {
    match e {
        Error::InvalidFactor(m) => Error::Corrupt(m),
        other => other,
    }
}

/// Number of `N`-free windows of length `m1`, counted within records.
pub fn window_count(seq: &Sequence, m1: usize) -> u64 {
    let mut total = 0u64;
    for (start, r) in seq.record_spans() {
        let symbols = &seq.symbols()[start as usize..(start + r.len) as usize];
        for run in symbols.split(|&s| s == CODE_N) {
            if run.len() >= m1 {
                total += (run.len() - m1 + 1) as u64;
            }
        }
    }
    total
}

/// Suggests a reference: the sequence with the most `N`-free windows of
/// length `m1`, ties to the lowest index. Returns the index and its count.
pub fn select_reference(sequences: &[Sequence], m1: usize) -> Option<(usize, u64)> {
    let mut best: Option<(usize, u64)> = None;
    for (i, s) in sequences.iter().enumerate() {
        let w = window_count(s, m1);
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((i, w));
        }
    }
    best
}

/// An opened archive. Opening checks framing, header checksum and header
/// consistency; the payload checksum is checked by full decompression or
/// [`Archive::verify`].
#[derive(Debug, Clone)]
pub struct Archive<'a> {
    c: Container<'a>,
    /// Part indices of each sequence, ordered by source position.
    parts_of: Vec<Vec<usize>>,
}

impl<'a> Archive<'a> {
    pub fn open(bytes: &'a [u8]) -> Result<Self> {
        let c = read_archive(bytes)?;
        let h = &c.header;
        let mut parts_of = vec![Vec::new(); h.sequences.len()];
        for (i, p) in h.parts.iter().enumerate() {
            parts_of[p.sequence as usize].push(i);
        }
        for (s, list) in parts_of.iter().enumerate() {
            if s == h.reference_index {
                continue;
            }
            let mut pos = 0;
            for &pi in list {
                let p = &h.parts[pi];
                if p.source_start != pos {
                    return Err(Error::corrupt(format!("parts of sequence {s} do not tile it")));
                }
                pos += p.source_len;
            }
            if pos != h.sequences[s].len() {
                return Err(Error::corrupt(format!("parts of sequence {s} do not cover it")));
            }
        }
        Ok(Archive { c, parts_of })
    }

    pub fn header(&self) -> &ArchiveHeader {
        &self.c.header
    }

    pub fn verify(&self) -> Result<()> {
        self.c.verify_payload()
    }

    pub fn sequence_names(&self) -> impl Iterator<Item = &str> {
        self.c.header.sequences.iter().map(|s| s.name.as_str())
    }

    pub fn sequence_index(&self, name: &str) -> Result<usize> {
        self.c
            .header
            .sequences
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSequence(name.to_string()))
    }

    pub fn sequence_len(&self, name: &str) -> Result<u64> {
        Ok(self.c.header.sequences[self.sequence_index(name)?].len())
    }

    /// Source range of a record inside its sequence.
    pub fn record_range(&self, name: &str, record: &str) -> Result<Range<u64>> {
        let seq = &self.c.header.sequences[self.sequence_index(name)?];
        let mut start = 0;
        for r in &seq.records {
            if r.name == record {
                return Ok(start..start + r.len);
            }
            start += r.len;
        }
        Err(Error::UnknownSequence(format!("{name}/{record}")))
    }

    /// Coded payload bytes of one sequence's streams.
    pub fn sequence_payload_bytes(&self, name: &str) -> Result<u64> {
        let s = self.sequence_index(name)?;
        if s == self.c.header.reference_index {
            let r = &self.c.header.reference_payload;
            return Ok(r.end - r.start);
        }
        Ok(self.parts_of[s].iter().map(|&p| self.c.header.parts[p].payload_bytes()).sum())
    }

    fn reference_payload(&self) -> &'a [u8] {
        let r = &self.c.header.reference_payload;
        &self.c.payload[r.start as usize..r.end as usize]
    }

    fn view<'s>(&'s self, part: &'s PartEntry) -> StreamView<'s> {
        StreamView {
            payloads: std::array::from_fn(|i| &self.c.payload[part.streams[i].start as usize..part.streams[i].end as usize]),
            checkpoints: &part.checkpoints,
            counts: part.counts,
            source_len: part.source_len,
        }
    }

    pub fn stats(&self) -> ArchiveStats {
        let h = &self.c.header;
        let mut stream_bytes = [0u64; STREAM_COUNT];
        for p in &h.parts {
            for (b, r) in stream_bytes.iter_mut().zip(&p.streams) {
                *b += r.end - r.start;
            }
        }
        ArchiveStats {
            file_bytes: self.c.file_len,
            framing_bytes: self.c.framing_bytes(),
            sections: self.c.sections.iter().map(|&(t, l)| (section_name(t), l + 9)).collect(),
            reference_payload_bytes: h.reference_payload.end - h.reference_payload.start,
            relative_payload_bytes: stream_bytes.iter().sum(),
            stream_bytes,
            sequences: h.sequences.len(),
            parts: h.parts.len(),
            universes: h.universes.len(),
            checkpoints: h.parts.iter().map(|p| p.checkpoints.len()).sum(),
            reservoir_phrases: h.universes.iter().map(|u| u.provenance.entries().len()).sum(),
            reservoir_symbols: h.universes.iter().map(|u| u.provenance.total_len()).sum(),
            reference_symbols: h.reference.len,
            relative_symbols: h.parts.iter().map(|p| p.source_len).sum(),
        }
    }

    /// Decompresses every sequence. `threads == 0` uses all cores.
    pub fn decompress(&self, threads: usize) -> Result<Collection> {
        self.verify()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
        pool.install(|| self.decompress_inner())
    }

    fn decompress_inner(&self) -> Result<Collection> {
        let h = &self.c.header;
        let ref_symbols = h.reference.decode_all(self.reference_payload())?;

        let factor_lists: Vec<Vec<Factor>> = h
            .parts
            .par_iter()
            .map(|p| decode_all(self.view(p), &h.models))
            .collect::<Result<_>>()?;

        // Rebuild each universe's reservoir from the literal runs, in parse
        // order, checking them against the recorded provenance.
        let mut reservoirs: Vec<Vec<u8>> = vec![Vec::new(); h.universes.len()];
        let mut next_entry = vec![0usize; h.universes.len()];
        for (p, factors) in h.parts.iter().zip(&factor_lists) {
            let u = p.universe as usize;
            let entries = h.universes[u].provenance.entries();
            let mut pos = p.source_start;
            for f in factors {
                if let Factor::Literal(s) = f {
                    if s.len() >= h.params.min_phrase {
                        let expected = ReservoirEntry {
                            origin_sequence: p.sequence,
                            origin_position: pos,
                            len: s.len() as u64,
                        };
                        if entries.get(next_entry[u]) != Some(&expected) {
                            return Err(Error::corrupt("reservoir provenance disagrees with literal runs"));
                        }
                        next_entry[u] += 1;
                        reservoirs[u].extend_from_slice(s);
                    }
                }
                pos += f.source_len();
            }
        }
        if next_entry
            .iter()
            .zip(&h.universes)
            .any(|(&n, u)| n != u.provenance.entries().len())
        {
            return Err(Error::corrupt("reservoir provenance lists unused phrases"));
        }

        let outputs: Vec<Vec<u8>> = h
            .parts
            .par_iter()
            .zip(&factor_lists)
            .map(|(p, factors)| {
                let u = &h.universes[p.universe as usize];
                let mut r: &[u8] = &ref_symbols[u.ref_start as usize..(u.ref_start + u.ref_len) as usize];
                let mut s: &[u8] = &reservoirs[p.universe as usize];
                let mut out = Vec::with_capacity(p.source_len as usize);
                for f in factors {
                    apply_factor_slice(f, 0, f.source_len(), &mut r, &mut s, &mut out).map_err(as_corrupt)?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let mut ref_symbols = Some(ref_symbols);
        let mut outputs: Vec<Option<Vec<u8>>> = outputs.into_iter().map(Some).collect();
        let mut sequences = Vec::with_capacity(h.sequences.len());
        for (i, entry) in h.sequences.iter().enumerate() {
            let symbols = if i == h.reference_index {
                ref_symbols.take().unwrap()
            } else {
                let mut symbols = Vec::with_capacity(entry.len() as usize);
                for &pi in &self.parts_of[i] {
                    symbols.append(outputs[pi].as_mut().unwrap());
                    outputs[pi] = None;
                }
                symbols
            };
            sequences.push(Sequence::from_parts(entry.name.clone(), symbols, entry.records.clone()));
        }
        Collection::new(sequences, h.reference_index, h.granularity).map_err(|e| Error::corrupt(e.to_string()))
    }

    /// Decodes the factors of a sequence, each with its absolute start
    /// position. The reference has no factors.
    pub fn sequence_factors(&self, name: &str) -> Result<Vec<(u64, Factor)>> {
        let s = self.sequence_index(name)?;
        let h = &self.c.header;
        let mut out = Vec::new();
        for &pi in &self.parts_of[s] {
            let p = &h.parts[pi];
            let mut dec = FactorDecoder::new(self.view(p), &h.models, 0)?;
            while let Some((fs, f)) = dec.next_factor()? {
                out.push((p.source_start + fs, f));
            }
            dec.finish()?;
        }
        Ok(out)
    }

    /// Decodes `[start, end)` of the reference.
    pub fn decode_reference_range(&self, start: u64, end: u64) -> Result<Vec<u8>> {
        self.c.header.reference.decode_range(self.reference_payload(), start, end)
    }

    pub fn extract(&self, name: &str, start: u64, end: u64) -> Result<Vec<u8>> {
        self.extract_with_stats(name, start, end).map(|(s, _)| s)
    }

    /// Extracts `[start, end)` of the named sequence, decoding only the
    /// covering checkpoint windows, the reference blocks they reference and
    /// the origin windows of any reservoir phrases they use.
    pub fn extract_with_stats(&self, name: &str, start: u64, end: u64) -> Result<(Vec<u8>, ExtractStats)> {
        let s = self.sequence_index(name)?;
        let len = self.c.header.sequences[s].len();
        if start > end || end > len {
            return Err(Error::OutOfRange { start, end, len });
        }
        let mut stats = ExtractStats::default();
        if s == self.c.header.reference_index {
            let (out, rs) = self
                .c
                .header
                .reference
                .decode_range_counted(self.reference_payload(), start, end)?;
            stats.reference_blocks = rs.blocks_decoded as u64;
            stats.payload_bytes_read = rs.payload_bytes_read as u64;
            return Ok((out, stats));
        }
        let mut out = Vec::with_capacity((end - start) as usize);
        for &pi in &self.parts_of[s] {
            let p = &self.c.header.parts[pi];
            let pr = p.source_range();
            if pr.end <= start || pr.start >= end || pr.is_empty() {
                continue;
            }
            let lo = start.max(pr.start) - pr.start;
            let hi = end.min(pr.end) - pr.start;
            self.extract_part(p, lo, hi, &mut out, &mut stats)?;
        }
        Ok((out, stats))
    }

    fn extract_part(&self, p: &PartEntry, lo: u64, hi: u64, out: &mut Vec<u8>, stats: &mut ExtractStats) -> Result<()> {
        let h = &self.c.header;
        let view = self.view(p);
        let first = view.checkpoint_for(lo);
        stats.windows += (view.checkpoint_for(hi - 1) - first + 1) as u64;
        let u = &h.universes[p.universe as usize];
        let mut reference = RefSource {
            archive: self,
            base: u.ref_start,
            len: u.ref_len,
            cache: HashMap::new(),
            stats: ExtractStats::default(),
        };
        let mut reservoir = ReservoirSource {
            archive: self,
            provenance: &u.provenance,
            stats: ExtractStats::default(),
        };
        let mut dec = FactorDecoder::new(view, &h.models, first)?;
        while let Some((fs, f)) = dec.next_factor()? {
            if fs >= hi {
                break;
            }
            let fe = fs + f.source_len();
            if fe <= lo {
                continue;
            }
            apply_factor_slice(&f, lo.max(fs) - fs, hi.min(fe) - fs, &mut reference, &mut reservoir, out)
                .map_err(as_corrupt)?;
        }
        stats.payload_bytes_read += dec.bytes_touched() as u64;
        stats.merge(&reference.stats);
        stats.merge(&reservoir.stats);
        Ok(())
    }

    /// Reads a reservoir phrase slice from the literal run it was copied
    /// from. Origin phrases are literal runs, so no further lookups happen.
    fn read_origin_literal(&self, sequence: u32, pos: u64, len: u64, out: &mut Vec<u8>, stats: &mut ExtractStats) -> Result<()> {
        let h = &self.c.header;
        let list = self
            .parts_of
            .get(sequence as usize)
            .ok_or_else(|| Error::corrupt("reservoir origin sequence out of range"))?;
        let pi = list
            .iter()
            .copied()
            .find(|&pi| h.parts[pi].source_range().contains(&pos))
            .ok_or_else(|| Error::corrupt("reservoir origin outside any part"))?;
        let p = &h.parts[pi];
        let local = pos - p.source_start;
        let view = self.view(p);
        let first = view.checkpoint_for(local);
        stats.windows += 1;
        stats.reservoir_lookups += 1;
        let mut dec = FactorDecoder::new(view, &h.models, first)?;
        let found = loop {
            match dec.next_factor()? {
                Some((fs, f)) if fs + f.source_len() > local => break Some((fs, f)),
                Some(_) => continue,
                None => break None,
            }
        };
        stats.payload_bytes_read += dec.bytes_touched() as u64;
        match found {
            Some((fs, Factor::Literal(symbols))) if local + len <= fs + symbols.len() as u64 => {
                let a = (local - fs) as usize;
                out.extend_from_slice(&symbols[a..a + len as usize]);
                Ok(())
            }
            _ => Err(Error::corrupt("reservoir phrase does not resolve to a literal run")),
        }
    }
}

struct RefSource<'x, 'a> {
    archive: &'x Archive<'a>,
    base: u64,
    len: u64,
    cache: HashMap<u64, Vec<u8>>,
    stats: ExtractStats,
}

impl SymbolSource for RefSource<'_, '_> {
    fn symbol_len(&self) -> u64 {
        self.len
    }

    fn read_into(&mut self, pos: u64, len: u64, out: &mut Vec<u8>) -> Result<()> {
        if pos.checked_add(len).is_none_or(|e| e > self.len) {
            return Err(Error::corrupt("match beyond the reference"));
        }
        let store = &self.archive.c.header.reference;
        let bs = store.index.block_size as u64;
        let (mut a, end) = (self.base + pos, self.base + pos + len);
        while a < end {
            let block = a / bs;
            if !self.cache.contains_key(&block) {
                let bytes = store.index.block_bytes(block as usize).len() as u64;
                let symbols = store.decode_block(self.archive.reference_payload(), block as usize)?;
                self.stats.reference_blocks += 1;
                self.stats.payload_bytes_read += bytes;
                self.cache.insert(block, symbols);
            }
            let symbols = &self.cache[&block];
            let block_start = block * bs;
            let b = end.min(block_start + symbols.len() as u64);
            out.extend_from_slice(&symbols[(a - block_start) as usize..(b - block_start) as usize]);
            a = b;
        }
        Ok(())
    }
}

struct ReservoirSource<'x, 'a> {
    archive: &'x Archive<'a>,
    provenance: &'x ReservoirProvenance,
    stats: ExtractStats,
}

impl SymbolSource for ReservoirSource<'_, '_> {
    fn symbol_len(&self) -> u64 {
        self.provenance.total_len()
    }

    fn read_into(&mut self, pos: u64, len: u64, out: &mut Vec<u8>) -> Result<()> {
        let pieces = self
            .provenance
            .resolve(pos, len)
            .map_err(|_| Error::corrupt("reservoir match beyond the reservoir"))?;
        for piece in pieces {
            self.archive.read_origin_literal(
                piece.origin_sequence,
                piece.origin_position,
                piece.len,
                out,
                &mut self.stats,
            )?;
        }
        Ok(())
    }
}
