//! Bit-exact packing of 2/3/4-bit codes into 32-bit words.
//!
//! Code `j` occupies bits `[j*bits, (j+1)*bits)` of a little-endian bit
//! stream (bit 0 is the LSB of word 0); 3-bit codes straddle word
//! boundaries. Trailing pad bits are zero. Codes support random access so
//! kernels can extract one element without unpacking its neighbors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PackingError {
    #[error("bits must be 2, 3, or 4, got {0}")]
    BadBits(u8),
    #[error("code {code} at index {index} exceeds {bits}-bit range")]
    CodeOutOfRange { index: usize, code: u8, bits: u8 },
}

/// Packed low-bit code stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: u8,
    count: usize,
    words: Vec<u32>,
}

impl PackedCodes {
    /// Empty stream for incremental appends.
    pub fn new(bits: u8) -> Result<Self, PackingError> {
        if !matches!(bits, 2 | 3 | 4) {
            return Err(PackingError::BadBits(bits));
        }
        Ok(Self {
            bits,
            count: 0,
            words: Vec::new(),
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    /// Appends one code at the tail of the bit stream.
    pub fn push(&mut self, code: u8) -> Result<(), PackingError> {
        if code as u32 >= (1 << self.bits) {
            return Err(PackingError::CodeOutOfRange {
                index: self.count,
                code,
                bits: self.bits,
            });
        }
        let bit = self.count * self.bits as usize;
        let word = bit / 32;
        let shift = bit % 32;
        if word >= self.words.len() {
            self.words.push(0);
        }
        self.words[word] |= (code as u32) << shift;
        let spill = shift + self.bits as usize;
        if spill > 32 {
            self.words.push((code as u32) >> (32 - shift));
        }
        self.count += 1;
        Ok(())
    }

    /// Random access without unpacking neighbors.
    pub fn get(&self, index: usize) -> u8 {
        assert!(index < self.count, "code index {index} out of {}", self.count);
        let bit = index * self.bits as usize;
        let word = bit / 32;
        let shift = bit % 32;
        let mask = (1u32 << self.bits) - 1;
        let mut v = self.words[word] >> shift;
        let spill = shift + self.bits as usize;
        if spill > 32 {
            v |= self.words[word + 1] << (32 - shift);
        }
        (v & mask) as u8
    }

    pub fn unpack(&self) -> Vec<u8> {
        (0..self.count).map(|i| self.get(i)).collect()
    }
}

/// Packs a code list; `len(words) == ceil(count*bits/32)` always.
pub fn pack(codes: &[u8], bits: u8) -> Result<PackedCodes, PackingError> {
    let mut p = PackedCodes::new(bits)?;
    for (index, &code) in codes.iter().enumerate() {
        p.push(code).map_err(|e| match e {
            PackingError::CodeOutOfRange { code, bits, .. } => {
                PackingError::CodeOutOfRange { index, code, bits }
            }
            other => other,
        })?;
    }
    Ok(p)
}

/// Inverse of `pack`: `unpack(pack(c)) == c` exactly.
pub fn unpack(p: &PackedCodes) -> Vec<u8> {
    p.unpack()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_codes() {
        let p = pack(&[0; 16], 4).unwrap();
        assert_eq!(p.words(), &[0, 0]);
        assert_eq!(unpack(&p), vec![0; 16]);
    }

    #[test]
    fn golden_word_4bit() {
        let p = pack(&[1, 2, 3, 4, 5, 6, 7, 8], 4).unwrap();
        assert_eq!(p.words(), &[0x87654321]);
    }

    #[test]
    fn golden_word_3bit() {
        let p = pack(&[7, 7], 3).unwrap();
        assert_eq!(p.words(), &[0x0000003F]);
    }

    #[test]
    fn single_code_4bit() {
        let p = pack(&[15], 4).unwrap();
        assert_eq!(p.words(), &[0x0000000F]);
        assert_eq!(unpack(&p), vec![15]);
    }

    #[test]
    fn empty_list() {
        let p = pack(&[], 3).unwrap();
        assert!(p.words().is_empty());
        assert!(unpack(&p).is_empty());
    }

    #[test]
    fn three_bit_straddles_word_boundary() {
        // 11 codes * 3 bits = 33 bits: code 10 straddles words 0 and 1
        let codes: Vec<u8> = (0..11).map(|i| (i % 8) as u8).collect();
        let p = pack(&codes, 3).unwrap();
        assert_eq!(p.words().len(), 2);
        assert_eq!(unpack(&p), codes);
        for (i, &c) in codes.iter().enumerate() {
            assert_eq!(p.get(i), c);
        }
    }

    #[test]
    fn word_count_formula() {
        for &bits in &[2u8, 3, 4] {
            for count in 0..80 {
                let codes = vec![1u8; count];
                let p = pack(&codes, bits).unwrap();
                let expect = (count * bits as usize).div_ceil(32);
                assert_eq!(p.words().len(), expect, "bits={bits} count={count}");
            }
        }
    }

    #[test]
    fn trailing_pad_bits_are_zero() {
        let p = pack(&[3, 3, 3], 3).unwrap();
        // 9 bits used; bits 9..32 of the single word must be zero
        assert_eq!(p.words()[0] >> 9, 0);
    }

    #[test]
    fn rejects_out_of_range_code() {
        assert!(matches!(
            pack(&[0, 4, 0], 2),
            Err(PackingError::CodeOutOfRange { index: 1, code: 4, bits: 2 })
        ));
        assert!(matches!(PackedCodes::new(5), Err(PackingError::BadBits(5))));
    }

    #[test]
    fn incremental_push_equals_bulk_pack() {
        let codes: Vec<u8> = (0..33).map(|i| (i * 5 % 8) as u8).collect();
        let bulk = pack(&codes, 3).unwrap();
        let mut inc = PackedCodes::new(3).unwrap();
        for &c in &codes {
            inc.push(c).unwrap();
        }
        assert_eq!(inc, bulk);
    }

    proptest! {
        #[test]
        fn prop_round_trip(bits in prop::sample::select(vec![2u8, 3, 4]),
                           codes in prop::collection::vec(0u8..16, 0..200)) {
            let codes: Vec<u8> = codes.iter().map(|c| c % (1 << bits)).collect();
            let p = pack(&codes, bits).unwrap();
            prop_assert_eq!(p.words().len(), (codes.len() * bits as usize).div_ceil(32));
            prop_assert_eq!(unpack(&p), codes);
        }

        #[test]
        fn prop_random_access_matches_unpack(codes in prop::collection::vec(0u8..8, 1..100)) {
            let p = pack(&codes, 3).unwrap();
            let all = unpack(&p);
            for (i, &c) in all.iter().enumerate() {
                prop_assert_eq!(p.get(i), c);
            }
        }
    }
}
