//! Hash index over fixed-length grams of the extended reference
//! (reference proper followed by reservoir phrases).
//!
//! Buckets are insertion-ordered chains, so a query sees reference
//! positions before reservoir positions and older phrases before newer
//! ones. Hash hits are always verified against the stored symbols.

use crate::error::{Error, Result};
use crate::genome::CODE_N;

pub const DEFAULT_CANDIDATE_CAP: usize = 128;
pub const MIN_GRAM_LEN: usize = 4;

const NIL: u32 = u32::MAX;

/// Maps a packed gram key to a 64-bit hash. Only the high bits select a bucket.
pub type GramHashFn = fn(u64) -> u64;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Packs an `N`-free gram two bits per symbol; grams longer than 32 keep
/// their last 32 symbols. Returns `None` if the gram contains `N`.
#[inline]
pub fn gram_key(gram: &[u8]) -> Option<u64> {
    let mut key = 0u64;
    for &s in gram {
        if s >= CODE_N {
            return None;
        }
        key = (key << 2) | s as u64;
    }
    Some(key)
}

#[derive(Debug, Clone, Copy)]
pub struct IndexOptions {
    /// log2 of the bucket count; `None` sizes it from the reference length.
    pub bucket_bits: Option<u32>,
    pub hash: GramHashFn,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions {
            bucket_bits: None,
            hash: mix64,
        }
    }
}

#[derive(Clone)]
pub struct KmerIndex {
    k: usize,
    cap: usize,
    ext: Vec<u8>,
    ref_len: usize,
    hash: GramHashFn,
    bucket_bits: u32,
    heads: Vec<u32>,
    tails: Vec<u32>,
    next: Vec<u32>,
    indexed: usize,
}

impl std::fmt::Debug for KmerIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KmerIndex")
            .field("k", &self.k)
            .field("cap", &self.cap)
            .field("ref_len", &self.ref_len)
            .field("reservoir_len", &self.reservoir_len())
            .field("indexed", &self.indexed)
            .finish()
    }
}

impl KmerIndex {
    pub fn build(reference: &[u8], k: usize, cap: usize) -> Result<Self> {
        Self::with_options(reference, k, cap, IndexOptions::default())
    }

    pub fn with_options(reference: &[u8], k: usize, cap: usize, opts: IndexOptions) -> Result<Self> {
        if k < MIN_GRAM_LEN {
            return Err(Error::InvalidParams(format!("gram length {k} is below {MIN_GRAM_LEN}")));
        }
        if cap == 0 {
            return Err(Error::InvalidParams("candidate cap must be positive".into()));
        }
        if reference.len() >= NIL as usize {
            return Err(Error::InvalidParams("reference too long for a 32-bit index".into()));
        }
        let bucket_bits = opts.bucket_bits.unwrap_or_else(|| {
            let need = usize::BITS - reference.len().max(1).leading_zeros();
            need.clamp(12, 24)
        });
        if !(1..=30).contains(&bucket_bits) {
            return Err(Error::InvalidParams(format!("bucket bits {bucket_bits} not in 1..=30")));
        }
        let buckets = 1usize << bucket_bits;
        let mut index = KmerIndex {
            k,
            cap,
            ext: reference.to_vec(),
            ref_len: reference.len(),
            hash: opts.hash,
            bucket_bits,
            heads: vec![NIL; buckets],
            tails: vec![NIL; buckets],
            next: vec![NIL; reference.len()],
            indexed: 0,
        };
        index.index_segment(0, reference.len());
        Ok(index)
    }

    #[inline]
    fn bucket(&self, key: u64) -> usize {
        ((self.hash)(key) >> (64 - self.bucket_bits)) as usize
    }

    fn insert(&mut self, pos: usize, key: u64) {
        let b = self.bucket(key);
        let p = pos as u32;
        match self.tails[b] {
            NIL => self.heads[b] = p,
            tail => self.next[tail as usize] = p,
        }
        self.tails[b] = p;
        self.indexed += 1;
    }

    /// Indexes every `N`-free gram lying entirely inside `ext[start..end]`.
    fn index_segment(&mut self, start: usize, end: usize) {
        let k = self.k;
        let mask = if k >= 32 { u64::MAX } else { (1u64 << (2 * k)) - 1 };
        let mut key = 0u64;
        let mut run = 0usize;
        for i in start..end {
            let s = self.ext[i];
            if s >= CODE_N {
                run = 0;
                key = 0;
                continue;
            }
            key = ((key << 2) | s as u64) & mask;
            run += 1;
            if run >= k {
                self.insert(i + 1 - k, key);
            }
        }
    }

    /// Appends a reservoir phrase. `reservoir_offset` must equal the current
    /// reservoir length. Grams crossing the phrase edges are not indexed.
    pub fn extend_with_reservoir(&mut self, phrase: &[u8], reservoir_offset: u64) -> Result<()> {
        if reservoir_offset != self.reservoir_len() as u64 {
            return Err(Error::InvalidParams(format!(
                "reservoir offset {reservoir_offset} does not match reservoir length {}",
                self.reservoir_len()
            )));
        }
        if self.ext.len() + phrase.len() >= NIL as usize {
            return Err(Error::InvalidParams("extended reference exceeds 32-bit positions".into()));
        }
        let start = self.ext.len();
        self.ext.extend_from_slice(phrase);
        self.next.resize(self.ext.len(), NIL);
        self.index_segment(start, self.ext.len());
        Ok(())
    }

    /// Verified positions of `query` in insertion order, at most `cap` of them.
    pub fn find_candidates(&self, query: &[u8]) -> Vec<usize> {
        let mut out = Vec::new();
        self.candidates_into(query, &mut out);
        out.into_iter().map(|p| p as usize).collect()
    }

    pub fn candidates_into(&self, query: &[u8], out: &mut Vec<u32>) {
        out.clear();
        if query.len() != self.k {
            return;
        }
        let Some(key) = gram_key(query) else {
            return;
        };
        let mut p = self.heads[self.bucket(key)];
        while p != NIL && out.len() < self.cap {
            let pos = p as usize;
            if &self.ext[pos..pos + self.k] == query {
                out.push(p);
            }
            p = self.next[pos];
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn candidate_cap(&self) -> usize {
        self.cap
    }

    /// Reference followed by all reservoir phrases appended so far.
    pub fn extended_reference(&self) -> &[u8] {
        &self.ext
    }

    pub fn ref_len(&self) -> usize {
        self.ref_len
    }

    pub fn reservoir_len(&self) -> usize {
        self.ext.len() - self.ref_len
    }

    pub fn reservoir(&self) -> &[u8] {
        &self.ext[self.ref_len..]
    }

    /// Number of indexed gram positions.
    pub fn indexed_positions(&self) -> usize {
        self.indexed
    }
}
