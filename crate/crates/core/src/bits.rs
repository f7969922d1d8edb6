//! MSB-first bit writer and reader.

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `len` bits of `code`, most significant first. `len <= 32`.
    #[inline]
    pub fn write_bits(&mut self, code: u32, len: u32) {
        debug_assert!(len <= 32);
        if len == 0 {
            return;
        }
        self.acc = (self.acc << len) | (code as u64 & ((1u64 << len) - 1));
        self.nbits += len;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.bytes.push((self.acc >> self.nbits) as u8);
        }
    }

    /// Pads with zero bits up to the next byte boundary.
    pub fn flush_to_byte_boundary(&mut self) {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.write_bits(0, pad);
        }
        self.acc = 0;
    }

    pub fn is_aligned(&self) -> bool {
        self.nbits == 0
    }

    /// Whole bytes emitted so far (excluding pending bits).
    pub fn byte_len(&self) -> usize {
        self.bytes.len()
    }

    pub fn bit_len(&self) -> u64 {
        self.bytes.len() as u64 * 8 + self.nbits as u64
    }

    /// Flushes and returns the buffer.
    pub fn finish(mut self) -> Vec<u8> {
        self.flush_to_byte_boundary();
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    data: &'a [u8],
    next_byte: usize,
    buf: u64,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        BitReader {
            data,
            next_byte: 0,
            buf: 0,
            nbits: 0,
        }
    }

    #[inline]
    fn refill(&mut self) {
        while self.nbits <= 56 && self.next_byte < self.data.len() {
            self.buf |= (self.data[self.next_byte] as u64) << (56 - self.nbits);
            self.next_byte += 1;
            self.nbits += 8;
        }
    }

    /// Next `n` bits (1..=32) without consuming them; missing bits read as 0.
    #[inline]
    pub fn peek(&mut self, n: u32) -> u32 {
        debug_assert!((1..=32).contains(&n));
        if self.nbits < n {
            self.refill();
        }
        (self.buf >> (64 - n)) as u32
    }

    #[inline]
    pub fn consume(&mut self, n: u32) -> Result<()> {
        if n > self.nbits {
            self.refill();
            if n > self.nbits {
                return Err(Error::Truncated);
            }
        }
        self.buf <<= n;
        self.nbits -= n;
        Ok(())
    }

    pub fn read_bits(&mut self, n: u32) -> Result<u32> {
        let v = self.peek(n);
        self.consume(n)?;
        Ok(v)
    }

    /// Bits left to read.
    pub fn remaining_bits(&self) -> u64 {
        (self.data.len() - self.next_byte) as u64 * 8 + self.nbits as u64
    }

    /// Bytes pulled from the underlying slice so far.
    pub fn bytes_touched(&self) -> usize {
        self.next_byte
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_layout() {
        let mut w = BitWriter::new();
        w.write_bits(0b1, 1);
        w.write_bits(0b01, 2);
        assert!(!w.is_aligned());
        w.flush_to_byte_boundary();
        assert!(w.is_aligned());
        w.write_bits(0xABC, 12);
        assert_eq!(w.finish(), vec![0b1010_0000, 0xAB, 0xC0]);
    }

    #[test]
    fn reader_detects_exhaustion() {
        let data = [0xF0u8];
        let mut r = BitReader::new(&data);
        assert_eq!(r.read_bits(4).unwrap(), 0xF);
        assert_eq!(r.read_bits(4).unwrap(), 0);
        assert!(matches!(r.read_bits(1), Err(Error::Truncated)));
    }

    #[test]
    fn round_trip_mixed_widths() {
        let mut w = BitWriter::new();
        let items: Vec<(u32, u32)> = (1..200u32).map(|i| (i.wrapping_mul(2654435761) % (1 << (i % 15 + 1)), i % 15 + 1)).collect();
        for &(v, n) in &items {
            w.write_bits(v, n);
        }
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        for &(v, n) in &items {
            assert_eq!(r.read_bits(n).unwrap(), v);
        }
    }
}
