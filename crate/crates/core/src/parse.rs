//! Non-greedy relative LZ factorization.
//!
//! Each position is handled in order:
//!
//! 1. an `N` run of at least `min_match` symbols becomes one [`Factor::NRun`];
//! 2. otherwise every candidate for the `min_match`-gram at the position is
//!    extended (contiguously, then across up to `gap_limit` single-symbol
//!    substitutions whose following piece reaches `min_extension`), and one
//!    candidate is picked by [`choose_factor`];
//! 3. otherwise the symbol joins the current literal run.
//!
//! A closed literal run of at least `min_phrase` symbols is appended to the
//! reservoir so later input can match against it.

use crate::error::{Error, Result};
use crate::genome::CODE_N;
use crate::index::{KmerIndex, DEFAULT_CANDIDATE_CAP, MIN_GRAM_LEN};

/// Gaps per match supported by the two-bit flag encoding.
pub const MAX_GAPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseParams {
    /// Minimum length of the first (contiguous) piece of a match; also the
    /// indexed gram length and the minimum `N`-run pseudomatch.
    pub min_match: usize,
    /// Minimum length of every piece after a gap.
    pub min_extension: usize,
    /// Minimum literal run length that enters the reservoir.
    pub min_phrase: usize,
    /// Maximum gaps per match (at most [`MAX_GAPS`]).
    pub gap_limit: usize,
    /// An offset delta strictly below this (in absolute value) counts as cheap.
    pub cheap_offset_bound: u64,
    /// How much shorter a cheap match may be and still win.
    pub length_slack: usize,
    pub candidate_cap: usize,
    /// Source symbols between checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for ParseParams {
    fn default() -> Self {
        ParseParams {
            min_match: 13,
            min_extension: 4,
            min_phrase: 32,
            gap_limit: MAX_GAPS,
            cheap_offset_bound: 64,
            length_slack: 28,
            candidate_cap: DEFAULT_CANDIDATE_CAP,
            checkpoint_interval: 8192,
        }
    }
}

impl ParseParams {
    /// Settings for large, highly repetitive genomes (longer seed grams).
    pub fn human() -> Self {
        ParseParams {
            min_match: 20,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidParams(m));
        if self.min_match < MIN_GRAM_LEN {
            return fail(format!("min_match must be at least {MIN_GRAM_LEN}"));
        }
        if self.min_extension == 0 || self.min_extension >= self.min_match {
            return fail("min_extension must satisfy 1 <= min_extension < min_match".into());
        }
        if self.min_phrase < self.min_match {
            return fail("min_phrase must be at least min_match".into());
        }
        if self.gap_limit > MAX_GAPS {
            return fail(format!("gap_limit must be at most {MAX_GAPS}"));
        }
        if self.cheap_offset_bound == 0 || self.length_slack == 0 {
            return fail("cheap_offset_bound and length_slack must be positive".into());
        }
        if self.candidate_cap == 0 || self.checkpoint_interval == 0 {
            return fail("candidate_cap and checkpoint_interval must be positive".into());
        }
        Ok(())
    }
}

/// Piece lengths and gap symbols of a (possibly gapped) match. Source and
/// reference advance identically: piece, gap, piece, gap, piece.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GappedSpan {
    pub pieces: Vec<u64>,
    pub gaps: Vec<u8>,
}

/// One contiguous segment of a gapped span, relative to the span start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Copy { offset: u64, len: u64 },
    Gap { offset: u64, symbol: u8 },
}

impl GappedSpan {
    pub fn contiguous(len: u64) -> Self {
        GappedSpan {
            pieces: vec![len],
            gaps: Vec::new(),
        }
    }

    pub fn source_len(&self) -> u64 {
        self.pieces.iter().sum::<u64>() + self.gaps.len() as u64
    }

    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        let mut offset = 0u64;
        let mut out = Vec::with_capacity(self.pieces.len() * 2);
        for (i, &len) in self.pieces.iter().enumerate() {
            out.push(Segment::Copy { offset, len });
            offset += len;
            if let Some(&symbol) = self.gaps.get(i) {
                out.push(Segment::Gap { offset, symbol });
                offset += 1;
            }
        }
        out.into_iter()
    }

    fn check_shape(&self) -> Result<()> {
        if self.pieces.is_empty() || self.pieces.len() > MAX_GAPS + 1 {
            return Err(Error::InvalidFactor(format!("{} pieces", self.pieces.len())));
        }
        if self.gaps.len() + 1 != self.pieces.len() {
            return Err(Error::InvalidFactor("gap count must be piece count minus one".into()));
        }
        if self.pieces.contains(&0) {
            return Err(Error::InvalidFactor("empty piece".into()));
        }
        if self.gaps.iter().any(|&g| g > CODE_N) {
            return Err(Error::InvalidFactor("gap symbol out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Factor {
    Literal(Vec<u8>),
    /// Match into the reference; `ref_pos` is relative to the reference start.
    Match { ref_pos: u64, span: GappedSpan },
    NRun(u64),
    /// Match into the reservoir at an absolute reservoir offset.
    Reservoir { offset: u64, span: GappedSpan },
}

impl Factor {
    pub fn source_len(&self) -> u64 {
        match self {
            Factor::Literal(s) => s.len() as u64,
            Factor::Match { span, .. } | Factor::Reservoir { span, .. } => span.source_len(),
            Factor::NRun(n) => *n,
        }
    }

    pub fn gap_count(&self) -> usize {
        match self {
            Factor::Match { span, .. } | Factor::Reservoir { span, .. } => span.gaps.len(),
            _ => 0,
        }
    }

    /// True for factors that carry an offset record.
    pub fn has_offset(&self) -> bool {
        !matches!(self, Factor::Literal(_))
    }

    /// Structural checks needed by the stream encoding.
    pub fn check_shape(&self) -> Result<()> {
        match self {
            Factor::Literal(s) if s.is_empty() => Err(Error::InvalidFactor("empty literal run".into())),
            Factor::Literal(s) if s.iter().any(|&c| c > CODE_N) => {
                Err(Error::InvalidFactor("literal symbol out of range".into()))
            }
            Factor::NRun(0) => Err(Error::InvalidFactor("empty N run".into())),
            Factor::Match { span, .. } | Factor::Reservoir { span, .. } => span.check_shape(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Parse {
    pub factors: Vec<Factor>,
    pub source_len: u64,
}

impl Parse {
    /// Checks tiling and the length thresholds of `params`.
    pub fn validate(&self, params: &ParseParams) -> Result<()> {
        let mut covered = 0u64;
        for f in &self.factors {
            f.check_shape()?;
            match f {
                Factor::NRun(n) if (*n as usize) < params.min_match => {
                    return Err(Error::InvalidFactor(format!("N run of {n} below min_match")));
                }
                Factor::Match { span, .. } | Factor::Reservoir { span, .. } => {
                    if span.gaps.len() > params.gap_limit {
                        return Err(Error::InvalidFactor("too many gaps".into()));
                    }
                    if (span.pieces[0] as usize) < params.min_match {
                        return Err(Error::InvalidFactor("first piece below min_match".into()));
                    }
                    if span.pieces[1..].iter().any(|&p| (p as usize) < params.min_extension) {
                        return Err(Error::InvalidFactor("extension piece below min_extension".into()));
                    }
                }
                _ => {}
            }
            covered += f.source_len();
        }
        if covered != self.source_len {
            return Err(Error::InvalidFactor(format!(
                "factors cover {covered} symbols, source has {}",
                self.source_len
            )));
        }
        Ok(())
    }

    /// Source start position of every factor.
    pub fn factor_starts(&self) -> Vec<u64> {
        self.factors
            .iter()
            .scan(0u64, |pos, f| {
                let s = *pos;
                *pos += f.source_len();
                Some(s)
            })
            .collect()
    }
}

/// Tracks where checkpoints fall: a checkpoint is taken at the first factor
/// starting at or after each multiple of the interval. The offset predictor
/// is reset there, so parser and encoder must drive the cursor identically.
#[derive(Debug, Clone)]
pub struct CheckpointCursor {
    interval: u64,
    next_boundary: u64,
}

impl CheckpointCursor {
    pub fn new(interval: usize) -> Self {
        CheckpointCursor {
            interval: interval.max(1) as u64,
            next_boundary: 0,
        }
    }

    /// Would a factor starting at `pos` open a new checkpoint window?
    #[inline]
    pub fn peek(&self, pos: u64) -> bool {
        pos >= self.next_boundary
    }

    /// Registers a factor start; returns true when it opens a window.
    #[inline]
    pub fn start_factor(&mut self, pos: u64) -> bool {
        if pos >= self.next_boundary {
            self.next_boundary = (pos / self.interval + 1) * self.interval;
            true
        } else {
            false
        }
    }
}

/// An extended match candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    /// Position in the extended reference (reference, then reservoir).
    pub ext_pos: usize,
    pub in_reservoir: bool,
    pieces: [u64; MAX_GAPS + 1],
    gaps: [u8; MAX_GAPS],
    n_gaps: u8,
    pub covered: u64,
}

impl Candidate {
    pub fn pieces(&self) -> &[u64] {
        &self.pieces[..self.n_gaps as usize + 1]
    }

    pub fn gaps(&self) -> &[u8] {
        &self.gaps[..self.n_gaps as usize]
    }

    pub fn span(&self) -> GappedSpan {
        GappedSpan {
            pieces: self.pieces().to_vec(),
            gaps: self.gaps().to_vec(),
        }
    }

    /// Offset delta against the predictor; `None` for reservoir candidates.
    pub fn delta(&self, pos: usize, prev_delta: i64) -> Option<i64> {
        (!self.in_reservoir).then(|| (pos as i64 - self.ext_pos as i64) - prev_delta)
    }

    fn is_cheap(&self, pos: usize, prev_delta: i64, params: &ParseParams) -> bool {
        self.delta(pos, prev_delta)
            .is_some_and(|d| d.unsigned_abs() < params.cheap_offset_bound)
    }

    /// Equal-length ordering: reference before reservoir, then smaller
    /// |delta|, then smaller position.
    fn tie_key(&self, pos: usize, prev_delta: i64) -> (bool, u64, usize) {
        (
            self.in_reservoir,
            self.delta(pos, prev_delta).map_or(0, i64::unsigned_abs),
            self.ext_pos,
        )
    }

    fn longer_than(&self, other: &Candidate, pos: usize, prev_delta: i64) -> bool {
        self.covered > other.covered
            || (self.covered == other.covered
                && self.tie_key(pos, prev_delta) < other.tie_key(pos, prev_delta))
    }
}

#[inline]
fn common_prefix(a: &[u8], b: &[u8]) -> usize {
    let n = a.len().min(b.len());
    let mut i = 0;
    while i + 8 <= n {
        let x = u64::from_le_bytes(a[i..i + 8].try_into().unwrap())
            ^ u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        if x != 0 {
            return i + (x.trailing_zeros() / 8) as usize;
        }
        i += 8;
    }
    while i < n && a[i] == b[i] {
        i += 1;
    }
    i
}

/// Extends the match of `seq[pos..]` against the extended reference at
/// `start`. Matches starting in the reference stay inside the reference.
pub fn extend_candidate(index: &KmerIndex, seq: &[u8], pos: usize, start: usize, params: &ParseParams) -> Candidate {
    let ext = index.extended_reference();
    let ref_len = index.ref_len();
    let limit = if start < ref_len { ref_len } else { ext.len() };
    let first = common_prefix(&seq[pos..], &ext[start..limit]);
    let mut cand = Candidate {
        ext_pos: start,
        in_reservoir: start >= ref_len,
        pieces: [first as u64, 0, 0],
        gaps: [0; MAX_GAPS],
        n_gaps: 0,
        covered: 0,
    };
    let (mut s, mut r) = (pos + first, start + first);
    while (cand.n_gaps as usize) < params.gap_limit && s < seq.len() && r < limit {
        let ext_len = common_prefix(&seq[s + 1..], &ext[r + 1..limit]);
        if ext_len < params.min_extension {
            break;
        }
        cand.gaps[cand.n_gaps as usize] = seq[s];
        cand.n_gaps += 1;
        cand.pieces[cand.n_gaps as usize] = ext_len as u64;
        s += 1 + ext_len;
        r += 1 + ext_len;
    }
    cand.covered = (s - pos) as u64;
    cand
}

/// Every candidate for the gram at `pos`, extended. Candidates whose first
/// piece misses `min_match` are dropped.
fn collect_candidates(
    index: &KmerIndex,
    seq: &[u8],
    pos: usize,
    params: &ParseParams,
    positions: &mut Vec<u32>,
    out: &mut Vec<Candidate>,
) {
    out.clear();
    let k = index.k();
    if pos + k > seq.len() {
        return;
    }
    index.candidates_into(&seq[pos..pos + k], positions);
    out.extend(
        positions
            .iter()
            .map(|&p| extend_candidate(index, seq, pos, p as usize, params))
            .filter(|c| c.pieces[0] as usize >= params.min_match),
    );
}

/// The candidate covering the most source symbols at `pos`.
pub fn longest_match_at(
    index: &KmerIndex,
    seq: &[u8],
    pos: usize,
    params: &ParseParams,
    prev_delta: i64,
) -> Option<Candidate> {
    let mut positions = Vec::new();
    let mut cands = Vec::new();
    collect_candidates(index, seq, pos, params, &mut positions, &mut cands);
    longest(&cands, pos, prev_delta)
}

fn longest(cands: &[Candidate], pos: usize, prev_delta: i64) -> Option<Candidate> {
    cands.iter().copied().reduce(|best, c| {
        if c.longer_than(&best, pos, prev_delta) {
            c
        } else {
            best
        }
    })
}

/// Arbitrates between two candidates at the same source position.
///
/// A shorter candidate wins when its offset delta is cheap, the longer one's
/// is not, and it is at most `length_slack` shorter. Otherwise the longer
/// candidate wins. Reservoir candidates are never cheap.
pub fn choose_factor(
    best: Candidate,
    alt: Candidate,
    prev_delta: i64,
    pos: usize,
    params: &ParseParams,
) -> Candidate {
    let (long, short) = if alt.longer_than(&best, pos, prev_delta) {
        (alt, best)
    } else {
        (best, alt)
    };
    if short.is_cheap(pos, prev_delta, params)
        && !long.is_cheap(pos, prev_delta, params)
        && long.covered - short.covered <= params.length_slack as u64
    {
        short
    } else {
        long
    }
}

/// Receives closed literal runs long enough for the reservoir.
pub trait ReservoirSink {
    /// Records the phrase `seq[source_pos..source_pos + phrase.len()]` and
    /// returns its reservoir offset.
    fn accept(&mut self, source_pos: u64, phrase: &[u8]) -> Result<u64>;
}

/// Sink that only tracks the reservoir length.
#[derive(Debug, Default)]
pub struct CountingSink {
    pub total: u64,
    pub phrases: Vec<(u64, u64)>,
}

impl ReservoirSink for CountingSink {
    fn accept(&mut self, source_pos: u64, phrase: &[u8]) -> Result<u64> {
        let off = self.total;
        self.total += phrase.len() as u64;
        self.phrases.push((source_pos, phrase.len() as u64));
        Ok(off)
    }
}

/// Factorizes `seq` against `index`, growing the reservoir through `sink`.
pub fn parse_sequence(
    index: &mut KmerIndex,
    seq: &[u8],
    params: &ParseParams,
    sink: &mut dyn ReservoirSink,
) -> Result<Parse> {
    params.validate()?;
    if index.k() != params.min_match {
        return Err(Error::InvalidParams(format!(
            "index gram length {} differs from min_match {}",
            index.k(),
            params.min_match
        )));
    }
    let n = seq.len();
    let mut factors = Vec::new();
    let mut literal_start: Option<usize> = None;
    let mut prev_delta: i64 = 0;
    let mut cursor = CheckpointCursor::new(params.checkpoint_interval);
    let mut positions = Vec::with_capacity(params.candidate_cap);
    let mut cands = Vec::with_capacity(params.candidate_cap);

    let mut close_literal = |start: &mut Option<usize>, end: usize, factors: &mut Vec<Factor>, index: &mut KmerIndex| -> Result<()> {
        if let Some(s) = start.take() {
            let run = &seq[s..end];
            factors.push(Factor::Literal(run.to_vec()));
            if run.len() >= params.min_phrase {
                let offset = sink.accept(s as u64, run)?;
                index.extend_with_reservoir(run, offset)?;
            }
        }
        Ok(())
    };

    let mut pos = 0usize;
    while pos < n {
        if seq[pos] == CODE_N {
            let run = seq[pos..].iter().take_while(|&&s| s == CODE_N).count();
            if run >= params.min_match {
                close_literal(&mut literal_start, pos, &mut factors, index)?;
                if cursor.start_factor(pos as u64) {
                    prev_delta = 0;
                }
                factors.push(Factor::NRun(run as u64));
                pos += run;
                continue;
            }
        } else {
            let prev = if cursor.peek(pos as u64) { 0 } else { prev_delta };
            collect_candidates(index, seq, pos, params, &mut positions, &mut cands);
            if let Some(best) = longest(&cands, pos, prev) {
                let chosen = cands
                    .iter()
                    .fold(best, |cur, &c| choose_factor(cur, c, prev, pos, params));
                close_literal(&mut literal_start, pos, &mut factors, index)?;
                if cursor.start_factor(pos as u64) {
                    prev_delta = 0;
                }
                let span = chosen.span();
                if chosen.in_reservoir {
                    factors.push(Factor::Reservoir {
                        offset: (chosen.ext_pos - index.ref_len()) as u64,
                        span,
                    });
                } else {
                    prev_delta = pos as i64 - chosen.ext_pos as i64;
                    factors.push(Factor::Match {
                        ref_pos: chosen.ext_pos as u64,
                        span,
                    });
                }
                pos += chosen.covered as usize;
                continue;
            }
        }
        if literal_start.is_none() {
            literal_start = Some(pos);
            if cursor.start_factor(pos as u64) {
                prev_delta = 0;
            }
        }
        pos += 1;
    }
    close_literal(&mut literal_start, n, &mut factors, index)?;

    Ok(Parse {
        factors,
        source_len: n as u64,
    })
}

/// Random access to a symbol string (reference or reservoir).
pub trait SymbolSource {
    fn symbol_len(&self) -> u64;
    /// Appends `[pos, pos + len)` to `out`.
    fn read_into(&mut self, pos: u64, len: u64, out: &mut Vec<u8>) -> Result<()>;
}

impl SymbolSource for &[u8] {
    fn symbol_len(&self) -> u64 {
        self.len() as u64
    }

    fn read_into(&mut self, pos: u64, len: u64, out: &mut Vec<u8>) -> Result<()> {
        let end = pos.checked_add(len).filter(|&e| e <= self.len() as u64).ok_or_else(|| {
            Error::InvalidFactor(format!("reference range {pos}+{len} beyond length {}", self.len()))
        })?;
        out.extend_from_slice(&self[pos as usize..end as usize]);
        Ok(())
    }
}

/// Appends symbols `[lo, hi)` of `factor` (offsets within the factor) to `out`.
pub fn apply_factor_slice(
    factor: &Factor,
    lo: u64,
    hi: u64,
    reference: &mut dyn SymbolSource,
    reservoir: &mut dyn SymbolSource,
    out: &mut Vec<u8>,
) -> Result<()> {
    debug_assert!(lo <= hi && hi <= factor.source_len());
    match factor {
        Factor::Literal(s) => out.extend_from_slice(&s[lo as usize..hi as usize]),
        Factor::NRun(_) => out.resize(out.len() + (hi - lo) as usize, CODE_N),
        Factor::Match { ref_pos: base, span } | Factor::Reservoir { offset: base, span } => {
            let source: &mut dyn SymbolSource = if matches!(factor, Factor::Match { .. }) {
                reference
            } else {
                reservoir
            };
            for seg in span.segments() {
                match seg {
                    Segment::Copy { offset, len } => {
                        let a = lo.max(offset);
                        let b = hi.min(offset + len);
                        if a < b {
                            source.read_into(base + a, b - a, out)?;
                        }
                    }
                    Segment::Gap { offset, symbol } => {
                        if lo <= offset && offset < hi {
                            out.push(symbol);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Rebuilds the source of `parse`.
pub fn apply_parse(
    parse: &Parse,
    reference: &mut dyn SymbolSource,
    reservoir: &mut dyn SymbolSource,
) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(parse.source_len as usize);
    for f in &parse.factors {
        apply_factor_slice(f, 0, f.source_len(), reference, reservoir, &mut out)?;
    }
    if out.len() as u64 != parse.source_len {
        return Err(Error::InvalidFactor("parse does not tile its source".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_acgt(rng: &mut impl Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| rng.gen_range(0..4)).collect()
    }

    fn small_params(m1: usize, m2: usize) -> ParseParams {
        ParseParams {
            min_match: m1,
            min_extension: m2,
            min_phrase: m1.max(32),
            ..Default::default()
        }
    }

    fn cand(ext_pos: usize, covered: u64, in_reservoir: bool) -> Candidate {
        Candidate {
            ext_pos,
            in_reservoir,
            pieces: [covered, 0, 0],
            gaps: [0; 2],
            n_gaps: 0,
            covered,
        }
    }

    /// Every reference start, brute-force extended with the same rules.
    fn brute_force_longest(reference: &[u8], seq: &[u8], pos: usize, p: &ParseParams) -> Option<(usize, Vec<u64>, Vec<u8>)> {
        let mut best: Option<(usize, Vec<u64>, Vec<u8>, usize)> = None;
        for start in 0..reference.len() {
            let mut s = pos;
            let mut r = start;
            while s < seq.len() && r < reference.len() && seq[s] == reference[r] {
                s += 1;
                r += 1;
            }
            if s - pos < p.min_match || seq[pos..pos + p.min_match].contains(&CODE_N) {
                continue;
            }
            let mut pieces = vec![(s - pos) as u64];
            let mut gaps = vec![];
            while gaps.len() < p.gap_limit && s < seq.len() && r < reference.len() {
                let mut e = 0;
                while s + 1 + e < seq.len() && r + 1 + e < reference.len() && seq[s + 1 + e] == reference[r + 1 + e] {
                    e += 1;
                }
                if e < p.min_extension {
                    break;
                }
                gaps.push(seq[s]);
                pieces.push(e as u64);
                s += 1 + e;
                r += 1 + e;
            }
            let cover = s - pos;
            let better = match &best {
                None => true,
                Some(b) => cover > b.3 || (cover == b.3 && (pos as i64 - start as i64).abs() < (pos as i64 - b.0 as i64).abs()),
            };
            if better {
                best = Some((start, pieces, gaps, cover));
            }
        }
        best.map(|(s, p, g, _)| (s, p, g))
    }

    #[test]
    fn single_substitution_becomes_one_gap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let reference = random_acgt(&mut rng, 20);
        let mut seq = reference.clone();
        seq[10] = (seq[10] + 1) % 4;
        let p = small_params(4, 2);
        let idx = KmerIndex::build(&reference, 4, 128).unwrap();
        let c = longest_match_at(&idx, &seq, 0, &p, 0).unwrap();
        assert_eq!(c.ext_pos, 0);
        assert_eq!(c.pieces(), &[10, 9]);
        assert_eq!(c.gaps(), &[seq[10]]);
        let (start, pieces, gaps) = brute_force_longest(&reference, &seq, 0, &p).unwrap();
        assert_eq!((start, pieces.as_slice(), gaps.as_slice()), (c.ext_pos, c.pieces(), c.gaps()));
    }

    #[test]
    fn absent_gram_has_no_candidate() {
        let idx = KmerIndex::build(&[0; 50], 4, 128).unwrap();
        assert!(longest_match_at(&idx, &[1, 1, 1, 1, 1], 0, &small_params(4, 2), 0).is_none());
    }

    #[test]
    fn equal_cover_prefers_small_delta() {
        let reference = vec![0u8; 8];
        let seq = vec![0u8; 8];
        let idx = KmerIndex::build(&reference, 4, 128).unwrap();
        let p = small_params(4, 2);
        let c = longest_match_at(&idx, &seq, 0, &p, 0).unwrap();
        // Only start 0 covers all 8 symbols; others end at the reference end.
        assert_eq!((c.ext_pos, c.covered), (0, 8));
        let c = longest_match_at(&idx, &seq, 4, &p, 0).unwrap();
        // From pos 4, starts 0..=4 all cover 4; delta |4 - start| is smallest at 4.
        assert_eq!((c.ext_pos, c.covered), (4, 4));
        let c = longest_match_at(&idx, &seq, 4, &p, 2).unwrap();
        assert_eq!(c.ext_pos, 2);
    }

    #[test]
    fn brute_force_agreement_on_random_fixtures() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let p = small_params(6, 2);
        for _ in 0..200 {
            let reference: Vec<u8> = (0..rng.gen_range(10..120)).map(|_| rng.gen_range(0..2)).collect();
            let mut seq = reference.clone();
            for _ in 0..rng.gen_range(0..6) {
                let i = rng.gen_range(0..seq.len());
                seq[i] = rng.gen_range(0..4);
            }
            let idx = KmerIndex::build(&reference, p.min_match, 10_000).unwrap();
            for pos in 0..seq.len() {
                let got = longest_match_at(&idx, &seq, pos, &p, 0);
                let want = brute_force_longest(&reference, &seq, pos, &p);
                assert_eq!(got.map(|c| c.covered), want.as_ref().map(|w| w.1.iter().sum::<u64>() + w.2.len() as u64));
            }
        }
    }

    #[test]
    fn choose_prefers_cheap_shorter_match() {
        let p = ParseParams::default();
        let pos = 5000;
        let prev = 300;
        let best = cand(pos - 2000, 60, false);
        let alt = cand(pos - 345, 40, false);
        assert_eq!(best.delta(pos, prev), Some(1700));
        assert_eq!(alt.delta(pos, prev), Some(45));
        assert_eq!(choose_factor(best, alt, prev, pos, &p), alt);
        assert_eq!(choose_factor(alt, best, prev, pos, &p), alt);
    }

    #[test]
    fn choose_keeps_long_match_beyond_slack() {
        let p = ParseParams::default();
        let (pos, prev) = (5000, 300);
        let best = cand(pos - 2000, 60, false);
        let alt = cand(pos - 345, 20, false);
        assert_eq!(choose_factor(best, alt, prev, pos, &p), best);
    }

    #[test]
    fn choose_twin_rule_accepts_expensive_longer_match() {
        let p = ParseParams::default();
        let (pos, prev) = (5000, 300);
        let cheap = cand(pos - 345, 40, false);
        let long = cand(pos - 2000, 80, false);
        assert_eq!(choose_factor(cheap, long, prev, pos, &p), long);
        let reservoir = cand(1_000_000, 60, true);
        assert_eq!(choose_factor(reservoir, cheap, prev, pos, &p), cheap);
    }

    #[test]
    fn identical_copy_is_one_match() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let reference = random_acgt(&mut rng, 50_000);
        let p = ParseParams::default();
        let mut idx = KmerIndex::build(&reference, 13, 128).unwrap();
        let parse = parse_sequence(&mut idx, &reference, &p, &mut CountingSink::default()).unwrap();
        assert_eq!(parse.factors, vec![Factor::Match { ref_pos: 0, span: GappedSpan::contiguous(50_000) }]);
    }

    #[test]
    fn n_run_becomes_pseudomatch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let reference = random_acgt(&mut rng, 1000);
        let mut idx = KmerIndex::build(&reference, 13, 128).unwrap();
        let parse = parse_sequence(&mut idx, &[CODE_N; 40], &ParseParams::default(), &mut CountingSink::default()).unwrap();
        assert_eq!(parse.factors, vec![Factor::NRun(40)]);

        // Shorter runs stay literal.
        let parse = parse_sequence(&mut idx, &[CODE_N; 12], &ParseParams::default(), &mut CountingSink::default()).unwrap();
        assert_eq!(parse.factors, vec![Factor::Literal(vec![CODE_N; 12])]);
    }

    #[test]
    fn novel_run_feeds_reservoir_for_later_sequences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let reference = random_acgt(&mut rng, 2000);
        let mut novel = random_acgt(&mut rng, 64);
        novel[0] = (reference[500] + 1) % 4;
        let p = ParseParams::default();
        let mut idx = KmerIndex::build(&reference, 13, 128).unwrap();
        let mut sink = CountingSink::default();

        let a = parse_sequence(&mut idx, &novel, &p, &mut sink).unwrap();
        assert_eq!(a.factors, vec![Factor::Literal(novel.clone())]);
        assert_eq!(sink.phrases, vec![(0, 64)]);
        assert_eq!(idx.reservoir(), &novel[..]);

        let mut b = reference[..500].to_vec();
        b.extend_from_slice(&novel);
        b.extend_from_slice(&reference[500..1000]);
        let pb = parse_sequence(&mut idx, &b, &p, &mut sink).unwrap();
        assert!(pb.factors.contains(&Factor::Reservoir { offset: 0, span: GappedSpan::contiguous(64) }), "{:?}", pb.factors);

        let res = idx.reservoir().to_vec();
        let mut r: &[u8] = &reference;
        let mut s: &[u8] = &res;
        assert_eq!(apply_parse(&a, &mut r, &mut s).unwrap(), novel);
        assert_eq!(apply_parse(&pb, &mut r, &mut s).unwrap(), b);
    }

    #[test]
    fn apply_trivial_parses() {
        let mut r: &[u8] = &[];
        let mut s: &[u8] = &[];
        assert!(apply_parse(&Parse::default(), &mut r, &mut s).unwrap().is_empty());
        let lit = Parse { factors: vec![Factor::Literal(vec![3, 2, 1])], source_len: 3 };
        assert_eq!(apply_parse(&lit, &mut r, &mut s).unwrap(), vec![3, 2, 1]);
        let bad = Parse { factors: vec![Factor::Match { ref_pos: 0, span: GappedSpan::contiguous(5) }], source_len: 5 };
        assert!(matches!(apply_parse(&bad, &mut r, &mut s), Err(Error::InvalidFactor(_))));
    }

    #[test]
    fn gapped_slice_application() {
        let reference: Vec<u8> = vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1];
        let f = Factor::Match { ref_pos: 1, span: GappedSpan { pieces: vec![3, 2, 1], gaps: vec![4, 4] } };
        let mut r: &[u8] = &reference;
        let mut s: &[u8] = &[];
        let mut full = vec![];
        apply_factor_slice(&f, 0, 8, &mut r, &mut s, &mut full).unwrap();
        assert_eq!(full, vec![1, 2, 3, 4, 1, 2, 4, 0]);
        for lo in 0..=8 {
            for hi in lo..=8 {
                let mut part = vec![];
                apply_factor_slice(&f, lo, hi, &mut r, &mut s, &mut part).unwrap();
                assert_eq!(part, &full[lo as usize..hi as usize]);
            }
        }
    }

    #[test]
    fn snp_economy_small() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let p = ParseParams::default();
        let reference = random_acgt(&mut rng, 20_000);
        for m in [1usize, 10, 100] {
            let spacing = 20_000 / (m + 1);
            let mut seq = reference.clone();
            for j in 1..=m {
                let i = j * spacing;
                seq[i] = (seq[i] + rng.gen_range(1..4)) % 4;
            }
            let mut idx = KmerIndex::build(&reference, 13, 128).unwrap();
            let parse = parse_sequence(&mut idx, &seq, &p, &mut CountingSink::default()).unwrap();
            parse.validate(&p).unwrap();
            let offsets = parse.factors.iter().filter(|f| f.has_offset()).count();
            let literal_symbols: usize = parse.factors.iter().map(|f| match f {
                Factor::Literal(s) => s.len(),
                other => other.gap_count(),
            }).sum();
            assert!(offsets <= m.div_ceil(2) + 1, "m={m} offsets={offsets}");
            assert_eq!(literal_symbols, m);
        }
    }

    fn mutate(rng: &mut impl Rng, reference: &[u8]) -> Vec<u8> {
        let mut seq = Vec::new();
        let mut i = 0;
        while i < reference.len() {
            match rng.gen_range(0..100) {
                0 => seq.extend(std::iter::repeat_n(CODE_N, rng.gen_range(1..40))),
                1 => seq.extend((0..rng.gen_range(1..60)).map(|_| rng.gen_range(0..4u8))),
                2 => i += rng.gen_range(1..30),
                3..=6 => {
                    seq.push(rng.gen_range(0..4));
                    i += 1;
                }
                _ => {
                    let n = rng.gen_range(1..50).min(reference.len() - i);
                    seq.extend_from_slice(&reference[i..i + n]);
                    i += n;
                }
            }
        }
        seq
    }

    #[test]
    fn round_trip_fuzz_with_reservoir() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..30 {
            let ref_len = rng.gen_range(100..5000);
            let mut reference = random_acgt(&mut rng, ref_len);
            if rng.gen_bool(0.3) {
                let a = rng.gen_range(0..reference.len());
                let b = (a + 200).min(reference.len());
                reference[a..b].fill(CODE_N);
            }
            let p = ParseParams { checkpoint_interval: rng.gen_range(50..3000), ..Default::default() };
            let mut idx = KmerIndex::build(&reference, p.min_match, p.candidate_cap).unwrap();
            let mut sink = CountingSink::default();
            let mut parses = vec![];
            for _ in 0..4 {
                let seq = mutate(&mut rng, &reference);
                let parse = parse_sequence(&mut idx, &seq, &p, &mut sink).unwrap();
                parse.validate(&p).unwrap();
                // Reservoir receives exactly the literal runs >= min_phrase.
                parses.push((seq, parse));
            }
            let phrase_total: u64 = parses.iter().flat_map(|(_, p)| &p.factors).map(|f| match f {
                Factor::Literal(s) if s.len() >= 32 => s.len() as u64,
                _ => 0,
            }).sum();
            assert_eq!(phrase_total, sink.total);
            let res = idx.reservoir().to_vec();
            for (seq, parse) in &parses {
                let mut r: &[u8] = &reference;
                let mut s: &[u8] = &res;
                assert_eq!(&apply_parse(parse, &mut r, &mut s).unwrap(), seq);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn parse_tiles_and_round_trips(seed in any::<u64>(), len in 0usize..3000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let reference = random_acgt(&mut rng, len.max(1));
            let seq = mutate(&mut rng, &reference);
            let p = ParseParams::default();
            let mut idx = KmerIndex::build(&reference, 13, 128).unwrap();
            let parse = parse_sequence(&mut idx, &seq, &p, &mut CountingSink::default()).unwrap();
            prop_assert!(parse.validate(&p).is_ok());
            prop_assert!(parse.factors.windows(2).all(|w| !(matches!(w[0], Factor::Literal(_)) && matches!(w[1], Factor::Literal(_)))));
            let res = idx.reservoir().to_vec();
            let mut r: &[u8] = &reference;
            let mut s: &[u8] = &res;
            prop_assert_eq!(apply_parse(&parse, &mut r, &mut s).unwrap(), seq);
        }
    }
}
