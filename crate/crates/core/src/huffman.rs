//! Canonical order-0 Huffman coding over bytes.
//!
//! Code lengths are capped at [`MAX_CODE_LEN`] bits. A table is fully
//! determined by its 256 code lengths, which serialize into 128 bytes
//! (two nibbles per byte, the even symbol in the low nibble).

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};

pub const MAX_CODE_LEN: u8 = 15;
pub const SERIALIZED_TABLE_LEN: usize = 128;

const LUT_EMPTY: u16 = 0;

#[derive(Clone)]
pub struct HuffmanTable {
    lengths: [u8; 256],
    codes: [u16; 256],
    max_len: u8,
    // Indexed by the next `max_len` bits; entry is `symbol << 4 | length`.
    lut: Vec<u16>,
}

impl std::fmt::Debug for HuffmanTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let used: Vec<(u8, u8)> = (0..=255u8)
            .filter(|&s| self.lengths[s as usize] > 0)
            .map(|s| (s, self.lengths[s as usize]))
            .collect();
        f.debug_struct("HuffmanTable").field("lengths", &used).finish()
    }
}

impl PartialEq for HuffmanTable {
    fn eq(&self, other: &Self) -> bool {
        self.lengths == other.lengths
    }
}

impl Eq for HuffmanTable {}

/// Byte histogram.
pub fn byte_frequencies(bytes: &[u8]) -> [u64; 256] {
    let mut freqs = [0u64; 256];
    for &b in bytes {
        freqs[b as usize] += 1;
    }
    freqs
}

/// Builds an optimal length-limited canonical code for `freqs`.
pub fn build_table(freqs: &[u64; 256]) -> Result<HuffmanTable> {
    let lengths = code_lengths(freqs, MAX_CODE_LEN)?;
    HuffmanTable::from_lengths(lengths)
}

fn code_lengths(freqs: &[u64; 256], limit: u8) -> Result<[u8; 256]> {
    let present: Vec<usize> = (0..256).filter(|&s| freqs[s] > 0).collect();
    let mut lengths = [0u8; 256];
    match present.len() {
        0 => return Err(Error::EmptyAlphabet),
        1 => {
            lengths[present[0]] = 1;
            return Ok(lengths);
        }
        _ => {}
    }

    // Plain Huffman tree; leaves are 0..n, internal nodes follow.
    let n = present.len();
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = present
        .iter()
        .enumerate()
        .map(|(leaf, &sym)| Reverse((freqs[sym], leaf)))
        .collect();
    let mut next_id = n;
    while heap.len() > 1 {
        let Reverse((w1, a)) = heap.pop().unwrap();
        let Reverse((w2, b)) = heap.pop().unwrap();
        parent[a] = next_id;
        parent[b] = next_id;
        heap.push(Reverse((w1 + w2, next_id)));
        next_id += 1;
    }
    let root = next_id - 1;
    let mut depth = vec![0usize; 2 * n - 1];
    for node in (0..root).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    let max_depth = depth[..n].iter().copied().max().unwrap();

    let mut bl_count = vec![0usize; max_depth.max(limit as usize) + 1];
    for &d in &depth[..n] {
        bl_count[d] += 1;
    }

    // Length limiting: move pairs of overlong leaves up, splitting a
    // shallower leaf to keep the Kraft sum at exactly one.
    let limit = limit as usize;
    for i in (limit + 1..=max_depth).rev() {
        while bl_count[i] > 0 {
            let mut j = i - 2;
            while bl_count[j] == 0 {
                j -= 1;
            }
            bl_count[i] -= 2;
            bl_count[i - 1] += 1;
            bl_count[j + 1] += 2;
            bl_count[j] -= 1;
        }
    }

    // Shortest codes go to the most frequent symbols.
    let mut by_weight = present.clone();
    by_weight.sort_by_key(|&s| (Reverse(freqs[s]), s));
    let mut it = by_weight.into_iter();
    for (len, &count) in bl_count.iter().enumerate().take(limit + 1).skip(1) {
        for _ in 0..count {
            lengths[it.next().unwrap()] = len as u8;
        }
    }
    Ok(lengths)
}

impl HuffmanTable {
    /// Builds the canonical code for the given lengths, validating the Kraft
    /// inequality (and completeness when two or more symbols are present).
    pub fn from_lengths(lengths: [u8; 256]) -> Result<Self> {
        let mut kraft: u64 = 0;
        let mut used = 0usize;
        let mut max_len = 0u8;
        for &l in &lengths {
            if l > MAX_CODE_LEN {
                return Err(Error::corrupt(format!("code length {l} exceeds {MAX_CODE_LEN}")));
            }
            if l > 0 {
                kraft += 1u64 << (MAX_CODE_LEN - l);
                used += 1;
                max_len = max_len.max(l);
            }
        }
        if used == 0 {
            return Err(Error::EmptyAlphabet);
        }
        let full = 1u64 << MAX_CODE_LEN;
        if kraft > full {
            return Err(Error::corrupt("code lengths violate the Kraft inequality"));
        }
        if used >= 2 && kraft != full {
            return Err(Error::corrupt("code lengths do not form a complete prefix code"));
        }

        let mut order: Vec<usize> = (0..256).filter(|&s| lengths[s] > 0).collect();
        order.sort_by_key(|&s| (lengths[s], s));
        let mut codes = [0u16; 256];
        let mut code: u32 = 0;
        let mut prev_len = lengths[order[0]];
        for (i, &s) in order.iter().enumerate() {
            let l = lengths[s];
            if i > 0 {
                code = (code + 1) << (l - prev_len);
            }
            codes[s] = code as u16;
            prev_len = l;
        }

        let mut lut = vec![LUT_EMPTY; 1usize << max_len];
        for &s in &order {
            let l = lengths[s];
            let shift = max_len - l;
            let lo = (codes[s] as usize) << shift;
            let hi = ((codes[s] as usize) + 1) << shift;
            let entry = ((s as u16) << 4) | l as u16;
            lut[lo..hi].fill(entry);
        }

        Ok(HuffmanTable {
            lengths,
            codes,
            max_len,
            lut,
        })
    }

    pub fn code_lengths(&self) -> &[u8; 256] {
        &self.lengths
    }

    pub fn code_len(&self, byte: u8) -> u8 {
        self.lengths[byte as usize]
    }

    pub fn code(&self, byte: u8) -> u16 {
        self.codes[byte as usize]
    }

    pub fn max_code_len(&self) -> u8 {
        self.max_len
    }

    /// Number of symbols with a codeword.
    pub fn symbol_count(&self) -> usize {
        self.lengths.iter().filter(|&&l| l > 0).count()
    }

    /// Total coded size in bits of a stream with the given histogram.
    pub fn cost_bits(&self, freqs: &[u64; 256]) -> Result<u64> {
        let mut bits = 0u64;
        for (s, &f) in freqs.iter().enumerate() {
            if f > 0 {
                let l = self.lengths[s];
                if l == 0 {
                    return Err(Error::UnencodableByte(s as u8));
                }
                bits += f * l as u64;
            }
        }
        Ok(bits)
    }

    #[inline]
    pub fn encode_symbol(&self, w: &mut BitWriter, byte: u8) -> Result<()> {
        let l = self.lengths[byte as usize];
        if l == 0 {
            return Err(Error::UnencodableByte(byte));
        }
        w.write_bits(self.codes[byte as usize] as u32, l as u32);
        Ok(())
    }

    #[inline]
    pub fn decode_symbol(&self, r: &mut BitReader<'_>) -> Result<u8> {
        let idx = r.peek(self.max_len as u32) as usize;
        let entry = self.lut[idx];
        if entry == LUT_EMPTY {
            // Only reachable for an incomplete (single-symbol) code, or padding.
            return if r.remaining_bits() < self.max_len as u64 {
                Err(Error::Truncated)
            } else {
                Err(Error::corrupt("invalid Huffman codeword"))
            };
        }
        r.consume((entry & 0xF) as u32)?;
        Ok((entry >> 4) as u8)
    }

    pub fn serialize(&self) -> [u8; SERIALIZED_TABLE_LEN] {
        let mut out = [0u8; SERIALIZED_TABLE_LEN];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = self.lengths[2 * i] | (self.lengths[2 * i + 1] << 4);
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != SERIALIZED_TABLE_LEN {
            return Err(Error::corrupt(format!(
                "Huffman table must be {SERIALIZED_TABLE_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let mut lengths = [0u8; 256];
        for (i, &b) in bytes.iter().enumerate() {
            lengths[2 * i] = b & 0x0F;
            lengths[2 * i + 1] = b >> 4;
        }
        HuffmanTable::from_lengths(lengths)
    }
}

/// Writes the codewords of `bytes`; returns the number of bits written.
pub fn encode_stream(bytes: &[u8], table: &HuffmanTable, w: &mut BitWriter) -> Result<u64> {
    let before = w.bit_len();
    for &b in bytes {
        table.encode_symbol(w, b)?;
    }
    Ok(w.bit_len() - before)
}

/// Decodes exactly `count` symbols.
pub fn decode_stream(r: &mut BitReader<'_>, table: &HuffmanTable, count: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(table.decode_symbol(r)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn freqs_of(pairs: &[(u8, u64)]) -> [u64; 256] {
        let mut f = [0u64; 256];
        for &(s, c) in pairs {
            f[s as usize] = c;
        }
        f
    }

    /// Exhaustive optimum over non-increasing-frequency / non-decreasing-length
    /// assignments with Kraft sum <= 1.
    fn brute_force_optimal_bits(weights: &[u64]) -> u64 {
        let mut w = weights.to_vec();
        w.sort_unstable_by(|a, b| b.cmp(a));
        let n = w.len();
        if n == 1 {
            return w[0];
        }
        let max_len = n - 1;
        let mut best = u64::MAX;
        let mut lens = vec![0usize; n];
        #[allow(clippy::too_many_arguments)]
        fn rec(i: usize, min_len: usize, max_len: usize, kraft: f64, cost: u64, w: &[u64], lens: &mut [usize], best: &mut u64) {
            if kraft > 1.0 + 1e-12 || cost >= *best {
                return;
            }
            if i == w.len() {
                *best = cost;
                return;
            }
            for l in min_len..=max_len {
                lens[i] = l;
                rec(i + 1, l, max_len, kraft + 0.5f64.powi(l as i32), cost + w[i] * l as u64, w, lens, best);
            }
        }
        rec(0, 1, max_len, 0.0, 0, &w, &mut lens, &mut best);
        best
    }

    #[test]
    fn single_symbol_gets_one_bit() {
        let t = build_table(&freqs_of(&[(7, 5)])).unwrap();
        assert_eq!(t.code_len(7), 1);
        assert_eq!(t.symbol_count(), 1);
    }

    #[test]
    fn two_symbols_one_bit_each() {
        let t = build_table(&freqs_of(&[(0, 1), (1, 1)])).unwrap();
        assert_eq!((t.code_len(0), t.code_len(1)), (1, 1));
    }

    #[test]
    fn four_symbol_example() {
        let f = freqs_of(&[(0, 8), (1, 4), (2, 2), (3, 2)]);
        let t = build_table(&f).unwrap();
        let lens: Vec<u8> = (0..4).map(|s| t.code_len(s)).collect();
        assert_eq!(lens, vec![1, 2, 3, 3]);
        assert_eq!(t.cost_bits(&f).unwrap(), 28);
        assert_eq!(brute_force_optimal_bits(&[8, 4, 2, 2]), 28);
    }

    #[test]
    fn empty_frequencies_rejected() {
        assert!(matches!(build_table(&[0u64; 256]), Err(Error::EmptyAlphabet)));
    }

    #[test]
    fn canonical_codes_ordered_by_length_then_symbol() {
        let t = build_table(&freqs_of(&[(0, 8), (1, 4), (2, 2), (3, 2)])).unwrap();
        assert_eq!(t.code(0), 0b0);
        assert_eq!(t.code(1), 0b10);
        assert_eq!(t.code(2), 0b110);
        assert_eq!(t.code(3), 0b111);
    }

    #[test]
    fn length_cap_enforced_on_fibonacci_weights() {
        let mut f = [0u64; 256];
        let (mut a, mut b) = (1u64, 1u64);
        for slot in f.iter_mut().take(30) {
            *slot = a;
            let c = a + b;
            a = b;
            b = c;
        }
        let t = build_table(&f).unwrap();
        assert!(t.max_code_len() <= MAX_CODE_LEN);
        let kraft: f64 = (0..256).filter(|&s| t.code_len(s as u8) > 0).map(|s| 0.5f64.powi(t.code_len(s as u8) as i32)).sum();
        assert!((kraft - 1.0).abs() < 1e-12);
        let data: Vec<u8> = (0..30u8).flat_map(|s| std::iter::repeat_n(s, 3)).collect();
        let mut w = BitWriter::new();
        encode_stream(&data, &t, &mut w).unwrap();
        let bytes = w.finish();
        assert_eq!(decode_stream(&mut BitReader::new(&bytes), &t, data.len()).unwrap(), data);
    }

    #[test]
    fn optimal_against_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.gen_range(2..=8);
            let weights: Vec<u64> = (0..n).map(|_| rng.gen_range(1..1000)).collect();
            let mut f = [0u64; 256];
            for (i, &w) in weights.iter().enumerate() {
                f[i * 31 % 256] = w;
            }
            let t = build_table(&f).unwrap();
            assert_eq!(t.cost_bits(&f).unwrap(), brute_force_optimal_bits(&weights), "{weights:?}");
        }
    }

    #[test]
    fn encode_empty_and_single_symbol_streams() {
        let t = build_table(&freqs_of(&[(7, 1)])).unwrap();
        let mut w = BitWriter::new();
        assert_eq!(encode_stream(&[], &t, &mut w).unwrap(), 0);
        assert_eq!(encode_stream(&[7; 8], &t, &mut w).unwrap(), 8);
        let bytes = w.finish();
        assert_eq!(bytes.len(), 1);
        let mut r = BitReader::new(&bytes);
        assert_eq!(decode_stream(&mut r, &t, 0).unwrap(), Vec::<u8>::new());
        assert_eq!(decode_stream(&mut r, &t, 8).unwrap(), vec![7; 8]);
    }

    #[test]
    fn unencodable_byte_is_an_error() {
        let t = build_table(&freqs_of(&[(7, 1)])).unwrap();
        let mut w = BitWriter::new();
        assert!(matches!(encode_stream(&[8], &t, &mut w), Err(Error::UnencodableByte(8))));
    }

    #[test]
    fn truncated_stream_is_detected() {
        let f = freqs_of(&[(0, 8), (1, 4), (2, 2), (3, 2)]);
        let t = build_table(&f).unwrap();
        let mut w = BitWriter::new();
        encode_stream(&[3, 3, 3], &t, &mut w).unwrap();
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        assert!(matches!(decode_stream(&mut r, &t, 20), Err(Error::Truncated)));
    }

    #[test]
    fn random_4k_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<u8> = (0..4096).map(|_| (rng.gen_range(0..64u32) * rng.gen_range(0..4u32)) as u8).collect();
        let t = build_table(&byte_frequencies(&data)).unwrap();
        let mut w = BitWriter::new();
        let bits = encode_stream(&data, &t, &mut w).unwrap();
        assert_eq!(bits, t.cost_bits(&byte_frequencies(&data)).unwrap());
        let bytes = w.finish();
        assert_eq!(decode_stream(&mut BitReader::new(&bytes), &t, data.len()).unwrap(), data);
    }

    #[test]
    fn serialized_layout() {
        let t = build_table(&freqs_of(&[(7, 3)])).unwrap();
        let s = t.serialize();
        assert_eq!(s[3], 0x10);
        assert!(s.iter().enumerate().all(|(i, &b)| i == 3 || b == 0));
        assert!(matches!(HuffmanTable::deserialize(&[0u8; 128]), Err(Error::EmptyAlphabet)));
        let mut bad = [0u8; 128];
        bad[0] = 0x11;
        bad[1] = 0x01;
        assert!(HuffmanTable::deserialize(&bad).unwrap_err().is_corruption());
    }

    proptest! {
        #[test]
        fn serialize_round_trip(counts in proptest::collection::vec(0u64..5000, 256)) {
            let mut f = [0u64; 256];
            f.copy_from_slice(&counts);
            f[0] += 1;
            let t = build_table(&f).unwrap();
            let back = HuffmanTable::deserialize(&t.serialize()).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(back.codes, t.codes);
        }

        #[test]
        fn stream_round_trip(data in proptest::collection::vec(any::<u8>(), 1..3000)) {
            let t = build_table(&byte_frequencies(&data)).unwrap();
            let mut w = BitWriter::new();
            encode_stream(&data, &t, &mut w).unwrap();
            let bytes = w.finish();
            prop_assert_eq!(decode_stream(&mut BitReader::new(&bytes), &t, data.len()).unwrap(), data);
        }

        #[test]
        fn build_is_deterministic(counts in proptest::collection::vec(0u64..100, 256)) {
            let mut f = [0u64; 256];
            f.copy_from_slice(&counts);
            f[9] += 1;
            prop_assert_eq!(build_table(&f).unwrap(), build_table(&f).unwrap());
        }
    }
}
