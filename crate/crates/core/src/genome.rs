//! Sequence model and FASTA input/output.
//!
//! Symbols are stored as small integer codes (`A=0, C=1, G=2, T=3, N=4`).
//! Every IUPAC ambiguity letter is folded to `N` and lowercase is accepted,
//! so soft-masking is not preserved.

use std::collections::HashSet;

use crate::error::{Error, Result};

pub const CODE_A: u8 = 0;
pub const CODE_C: u8 = 1;
pub const CODE_G: u8 = 2;
pub const CODE_T: u8 = 3;
pub const CODE_N: u8 = 4;

/// Number of distinct symbol codes.
pub const ALPHABET_SIZE: usize = 5;

pub const DEFAULT_LINE_WIDTH: usize = 70;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Symbol {
    A = CODE_A,
    C = CODE_C,
    G = CODE_G,
    T = CODE_T,
    N = CODE_N,
}

impl Symbol {
    pub const ALL: [Symbol; ALPHABET_SIZE] = [Symbol::A, Symbol::C, Symbol::G, Symbol::T, Symbol::N];

    #[inline]
    pub fn code(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn from_code(code: u8) -> Option<Symbol> {
        Symbol::ALL.get(code as usize).copied()
    }

    /// Maps any ASCII letter onto the five-symbol alphabet; non-letters give `None`.
    #[inline]
    #[allow(clippy::match_overlapping_arm)]
    pub fn from_ascii(byte: u8) -> Option<Symbol> {
        match byte.to_ascii_uppercase() {
            b'A' => Some(Symbol::A),
            b'C' => Some(Symbol::C),
            b'G' => Some(Symbol::G),
            b'T' => Some(Symbol::T),
            b'A'..=b'Z' => Some(Symbol::N),
            _ => None,
        }
    }

    #[inline]
    pub fn to_ascii(self) -> u8 {
        b"ACGTN"[self as usize]
    }
}

/// ASCII letter for a symbol code. Codes above 4 render as `N`.
#[inline]
pub fn code_to_ascii(code: u8) -> u8 {
    *b"ACGTN".get(code as usize).unwrap_or(&b'N')
}

/// Converts ASCII text to symbol codes, failing on the first non-letter.
pub fn codes_from_ascii(text: &[u8]) -> Option<Vec<u8>> {
    text.iter()
        .map(|&b| Symbol::from_ascii(b).map(Symbol::code))
        .collect()
}

pub fn codes_to_ascii(codes: &[u8]) -> Vec<u8> {
    codes.iter().map(|&c| code_to_ascii(c)).collect()
}

/// Name and length of one FASTA record inside a [`Sequence`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub len: u64,
}

/// A named symbol string. A sequence may be made of several FASTA records
/// (chromosomes); `symbols` is their concatenation in record order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    name: String,
    symbols: Vec<u8>,
    records: Vec<Record>,
}

impl Sequence {
    /// A single-record sequence. Panics if a code is outside `0..=4`.
    pub fn new(name: impl Into<String>, symbols: Vec<u8>) -> Self {
        assert!(
            symbols.iter().all(|&c| (c as usize) < ALPHABET_SIZE),
            "symbol code out of range"
        );
        let name = name.into();
        let records = vec![Record {
            name: name.clone(),
            len: symbols.len() as u64,
        }];
        Sequence {
            name,
            symbols,
            records,
        }
    }

    /// Parses `ACGTN`-style text (any letter accepted, non-ACGT folded to N).
    pub fn from_ascii(name: impl Into<String>, text: &[u8]) -> Result<Self> {
        let codes = codes_from_ascii(text)
            .ok_or_else(|| Error::InvalidCollection("sequence text contains a non-letter".into()))?;
        Ok(Sequence::new(name, codes))
    }

    /// Joins records into one multi-record sequence.
    pub fn from_records(name: impl Into<String>, records: Vec<Sequence>) -> Self {
        let mut symbols = Vec::with_capacity(records.iter().map(Sequence::len).sum());
        let mut spans = Vec::with_capacity(records.len());
        for rec in records {
            spans.push(Record {
                name: rec.name,
                len: rec.symbols.len() as u64,
            });
            symbols.extend_from_slice(&rec.symbols);
        }
        Sequence {
            name: name.into(),
            symbols,
            records: spans,
        }
    }

    pub(crate) fn from_parts(name: String, symbols: Vec<u8>, records: Vec<Record>) -> Self {
        debug_assert_eq!(
            records.iter().map(|r| r.len).sum::<u64>(),
            symbols.len() as u64
        );
        Sequence {
            name,
            symbols,
            records,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn into_symbols(self) -> Vec<u8> {
        self.symbols
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Start offset and record for every record, in order.
    pub fn record_spans(&self) -> impl Iterator<Item = (u64, &Record)> + '_ {
        self.records.iter().scan(0u64, |start, rec| {
            let s = *start;
            *start += rec.len;
            Some((s, rec))
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn to_ascii(&self) -> Vec<u8> {
        codes_to_ascii(&self.symbols)
    }
}

/// How non-reference sequences are matched against the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    /// Each sequence is matched against the whole reference.
    #[default]
    WholeSequence,
    /// Each record is matched only against its counterpart reference record
    /// (same name, else same ordinal).
    PerRecord,
}

/// The sequences to compress, in encode order, plus the reference choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Collection {
    sequences: Vec<Sequence>,
    reference_index: usize,
    granularity: Granularity,
}

impl Collection {
    pub fn new(
        sequences: Vec<Sequence>,
        reference_index: usize,
        granularity: Granularity,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidCollection("no sequences".into()));
        }
        if reference_index >= sequences.len() {
            return Err(Error::InvalidCollection(format!(
                "reference index {reference_index} out of range for {} sequences",
                sequences.len()
            )));
        }
        let mut seen = HashSet::new();
        for seq in &sequences {
            if seq.name.is_empty() {
                return Err(Error::InvalidCollection("empty sequence name".into()));
            }
            if !seen.insert(seq.name.as_str()) {
                return Err(Error::InvalidCollection(format!(
                    "duplicate sequence name {:?}",
                    seq.name
                )));
            }
        }
        Ok(Collection {
            sequences,
            reference_index,
            granularity,
        })
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn into_sequences(self) -> Vec<Sequence> {
        self.sequences
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn reference(&self) -> &Sequence {
        &self.sequences[self.reference_index]
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn get(&self, name: &str) -> Option<&Sequence> {
        self.sequences.iter().find(|s| s.name == name)
    }

    pub fn total_symbols(&self) -> u64 {
        self.sequences.iter().map(|s| s.len() as u64).sum()
    }
}

/// Parses multi-record FASTA text into one [`Sequence`] per record.
///
/// The record name is the first whitespace-delimited word of the header.
/// Whitespace inside sequence lines is ignored; any other non-letter byte is
/// rejected with its line and column.
pub fn parse_fasta(bytes: &[u8]) -> Result<Vec<Sequence>> {
    let mut out: Vec<Sequence> = Vec::new();
    let mut current: Option<(String, Vec<u8>)> = None;

    let fail = |line: usize, column: usize, reason: &str| Error::Fasta {
        line,
        column,
        reason: reason.to_string(),
    };

    for (line_idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = line_idx + 1;
        let line = raw.strip_suffix(b"\r").unwrap_or(raw);
        if let Some(col) = line
            .iter()
            .position(|&b| !(b.is_ascii_graphic() || b == b' ' || b == b'\t'))
        {
            return Err(fail(line_no, col + 1, "non-printable byte"));
        }
        if let Some(header) = line.strip_prefix(b">") {
            let text = std::str::from_utf8(header)
                .map_err(|_| fail(line_no, 2, "header is not valid text"))?;
            let name = text.split_whitespace().next().unwrap_or("");
            if name.is_empty() {
                return Err(fail(line_no, 1, "record has no name"));
            }
            if let Some((n, s)) = current.take() {
                out.push(Sequence::new(n, s));
            }
            current = Some((name.to_string(), Vec::new()));
            continue;
        }
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        let Some((_, symbols)) = current.as_mut() else {
            let col = line.iter().position(|b| !b.is_ascii_whitespace()).unwrap_or(0);
            return Err(fail(line_no, col + 1, "sequence data before the first header"));
        };
        for (col, &b) in line.iter().enumerate() {
            if b == b' ' || b == b'\t' {
                continue;
            }
            match Symbol::from_ascii(b) {
                Some(sym) => symbols.push(sym.code()),
                None => return Err(fail(line_no, col + 1, "not a nucleotide letter")),
            }
        }
    }
    if let Some((n, s)) = current.take() {
        out.push(Sequence::new(n, s));
    }
    if out.is_empty() {
        return Err(fail(1, 1, "no FASTA records"));
    }
    Ok(out)
}

/// Renders every record of `seq` as FASTA with `line_width` symbols per line.
pub fn write_fasta(seq: &Sequence, line_width: usize) -> Vec<u8> {
    assert!(line_width >= 1, "line width must be positive");
    let mut out = Vec::with_capacity(seq.len() + seq.len() / line_width + 64);
    for (start, rec) in seq.record_spans() {
        let body = &seq.symbols[start as usize..(start + rec.len) as usize];
        write_record(&mut out, &rec.name, body, line_width);
    }
    out
}

pub(crate) fn write_record(out: &mut Vec<u8>, name: &str, codes: &[u8], line_width: usize) {
    out.push(b'>');
    out.extend_from_slice(name.as_bytes());
    out.push(b'\n');
    for chunk in codes.chunks(line_width) {
        out.extend(chunk.iter().map(|&c| code_to_ascii(c)));
        out.push(b'\n');
    }
}
