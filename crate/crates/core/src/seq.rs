//! 2-bit packed DNA sequences.
//!
//! Symbols are coded A=0, C=1, G=2, T=3 and packed four per byte with the
//! leftmost symbol in the most significant bits. Pad bits of the last byte
//! are always zero, so byte-wise comparison of two equal-length sequences
//! agrees with lexicographic order over A<C<G<T.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest supported k-mer length.
pub const MAX_K: usize = 256;

pub const SYMBOLS: [u8; 4] = *b"ACGT";

const INVALID: u8 = 0xff;

static STRICT_CODES: [u8; 256] = build_code_table(false);
static FOLDED_CODES: [u8; 256] = build_code_table(true);

const fn build_code_table(fold_case: bool) -> [u8; 256] {
    let mut table = [INVALID; 256];
    table[b'A' as usize] = 0;
    table[b'C' as usize] = 1;
    table[b'G' as usize] = 2;
    table[b'T' as usize] = 3;
    if fold_case {
        table[b'a' as usize] = 0;
        table[b'c' as usize] = 1;
        table[b'g' as usize] = 2;
        table[b't' as usize] = 3;
    }
    table
}

/// Code of an uppercase `ACGT` symbol.
#[inline]
pub fn encode(symbol: u8) -> Option<u8> {
    match STRICT_CODES[symbol as usize] {
        INVALID => None,
        code => Some(code),
    }
}

/// Code of an `ACGT` symbol in either case.
#[inline]
pub fn encode_folded(symbol: u8) -> Option<u8> {
    match FOLDED_CODES[symbol as usize] {
        INVALID => None,
        code => Some(code),
    }
}

#[inline]
pub fn decode(code: u8) -> u8 {
    SYMBOLS[(code & 3) as usize]
}

#[inline]
pub fn complement(code: u8) -> u8 {
    3 - code
}

/// Which strand of a sequence is its canonical form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// The sequence as read is canonical (this includes palindromes).
    Forward,
    /// The reverse complement is strictly smaller.
    Reverse,
}

/// Compare a code sequence with its own reverse complement.
///
/// `Equal` means the sequence is a reverse-complement palindrome.
pub fn compare_with_rc(codes: &[u8]) -> Ordering {
    let n = codes.len();
    for i in 0..n {
        let fwd = codes[i];
        let rc = complement(codes[n - 1 - i]);
        match fwd.cmp(&rc) {
            Ordering::Equal => {
                // Once the two pointers cross, the remainder mirrors what was
                // already compared.
                if 2 * i + 1 >= n {
                    return Ordering::Equal;
                }
            }
            other => return other,
        }
    }
    Ordering::Equal
}

pub fn orientation_of_codes(codes: &[u8]) -> Orientation {
    match compare_with_rc(codes) {
        Ordering::Greater => Orientation::Reverse,
        _ => Orientation::Forward,
    }
}

/// A 2-bit packed DNA string.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct PackedSeq {
    bytes: Vec<u8>,
    len: usize,
}

impl PackedSeq {
    /// Pack an uppercase `ACGT` string.
    pub fn pack(text: &[u8]) -> Result<Self> {
        let mut bytes = vec![0u8; text.len().div_ceil(4)];
        for (i, &symbol) in text.iter().enumerate() {
            let code = encode(symbol).ok_or(Error::InvalidSymbol {
                position: i,
                symbol: symbol as char,
            })?;
            bytes[i / 4] |= code << (6 - 2 * (i % 4));
        }
        Ok(PackedSeq {
            bytes,
            len: text.len(),
        })
    }

    /// Pack already-coded symbols (each in `0..4`).
    pub fn from_codes(codes: &[u8]) -> Self {
        let mut bytes = vec![0u8; codes.len().div_ceil(4)];
        for (i, &code) in codes.iter().enumerate() {
            debug_assert!(code < 4);
            bytes[i / 4] |= (code & 3) << (6 - 2 * (i % 4));
        }
        PackedSeq {
            bytes,
            len: codes.len(),
        }
    }

    /// Wrap packed bytes, clearing any pad bits past `len`.
    pub fn from_packed(mut bytes: Vec<u8>, len: usize) -> Self {
        bytes.resize(len.div_ceil(4), 0);
        let rem = len % 4;
        if rem != 0 {
            if let Some(last) = bytes.last_mut() {
                *last &= 0xffu8 << (8 - 2 * rem);
            }
        }
        PackedSeq { bytes, len }
    }

    /// Rebuild a sequence from left-aligned 64-bit words.
    pub fn from_words(words: &[u64], len: usize) -> Self {
        let mut bytes = Vec::with_capacity(len.div_ceil(4));
        words::append_be_bytes(words, len.div_ceil(4), &mut bytes);
        Self::from_packed(bytes, len)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Symbol code at `pos`.
    #[inline]
    pub fn get(&self, pos: usize) -> u8 {
        assert!(pos < self.len, "position {pos} out of range {}", self.len);
        (self.bytes[pos / 4] >> (6 - 2 * (pos % 4))) & 3
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn to_words(&self) -> Vec<u64> {
        let mut out = vec![0u64; words::words_for(self.len)];
        words::from_be_bytes(&self.bytes, &mut out);
        out
    }

    pub fn subseq(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.len);
        let codes: Vec<u8> = (start..start + len).map(|i| self.get(i)).collect();
        Self::from_codes(&codes)
    }

    pub fn reverse_complement(&self) -> Self {
        let codes: Vec<u8> = (0..self.len)
            .rev()
            .map(|i| complement(self.get(i)))
            .collect();
        Self::from_codes(&codes)
    }

    pub fn orientation(&self) -> Orientation {
        orientation_of_codes(&self.codes())
    }

    /// The smaller of the sequence and its reverse complement.
    pub fn canonical(&self) -> (Self, Orientation) {
        match self.orientation() {
            Orientation::Forward => (self.clone(), Orientation::Forward),
            Orientation::Reverse => (self.reverse_complement(), Orientation::Reverse),
        }
    }

    /// Base-4 value of the sequence, leftmost symbol most significant.
    ///
    /// Only meaningful for sequences of at most 32 symbols.
    pub fn mmer_index(&self) -> u64 {
        debug_assert!(self.len <= 32);
        (0..self.len).fold(0u64, |acc, i| (acc << 2) | self.get(i) as u64)
    }

    /// Inverse of [`PackedSeq::mmer_index`].
    pub fn from_mmer_index(index: u64, len: usize) -> Self {
        let codes: Vec<u8> = (0..len)
            .map(|i| ((index >> (2 * (len - 1 - i))) & 3) as u8)
            .collect();
        Self::from_codes(&codes)
    }
}

impl Ord for PackedSeq {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bytes
            .cmp(&other.bytes)
            .then_with(|| self.len.cmp(&other.len))
    }
}

impl PartialOrd for PackedSeq {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl FromStr for PackedSeq {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::pack(s.as_bytes())
    }
}

impl fmt::Display for PackedSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text: String = (0..self.len).map(|i| decode(self.get(i)) as char).collect();
        f.write_str(&text)
    }
}

impl fmt::Debug for PackedSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PackedSeq({self})")
    }
}

/// Left-aligned multi-word k-mer arithmetic used by the sorter and the
/// database writer. A sequence of `n` symbols occupies `words_for(n)` words;
/// symbol `i` lives in word `i / 32` at bit offset `62 - 2 * (i % 32)`.
pub mod words {
    #[inline]
    pub fn words_for(symbols: usize) -> usize {
        symbols.div_ceil(32).max(1)
    }

    #[inline]
    pub fn symbol_at(words: &[u64], pos: usize) -> u8 {
        ((words[pos / 32] >> (62 - 2 * (pos % 32))) & 3) as u8
    }

    pub fn pack_into(codes: &[u8], out: &mut [u64]) {
        out.fill(0);
        for (i, &code) in codes.iter().enumerate() {
            out[i / 32] |= (code as u64) << (62 - 2 * (i % 32));
        }
    }

    /// Pack the reverse complement of `codes`.
    pub fn pack_rc_into(codes: &[u8], out: &mut [u64]) {
        out.fill(0);
        let n = codes.len();
        for i in 0..n {
            let code = 3 - codes[n - 1 - i];
            out[i / 32] |= (code as u64) << (62 - 2 * (i % 32));
        }
    }

    /// Copy `len` symbols starting at symbol `offset` of `src` into `out`,
    /// left-aligned, with pad bits cleared.
    #[inline]
    pub fn extract_window(src: &[u64], offset: usize, len: usize, out: &mut [u64]) {
        let bit = 2 * offset;
        let first = bit / 64;
        let shift = bit % 64;
        let n = words_for(len);
        for (i, slot) in out.iter_mut().enumerate().take(n) {
            let hi = src.get(first + i).copied().unwrap_or(0);
            let mut w = if shift == 0 { hi } else { hi << shift };
            if shift != 0 {
                if let Some(&lo) = src.get(first + i + 1) {
                    w |= lo >> (64 - shift);
                }
            }
            *slot = w;
        }
        let tail_bits = 2 * len - 64 * (n - 1);
        if tail_bits < 64 {
            out[n - 1] &= if tail_bits == 0 { 0 } else { !0u64 << (64 - tail_bits) };
        }
    }

    /// Append the first `nbytes` big-endian bytes of the word sequence.
    pub fn append_be_bytes(words: &[u64], nbytes: usize, out: &mut Vec<u8>) {
        let mut left = nbytes;
        for w in words {
            if left == 0 {
                break;
            }
            let bytes = w.to_be_bytes();
            let take = left.min(8);
            out.extend_from_slice(&bytes[..take]);
            left -= take;
        }
        out.resize(out.len() + left, 0);
    }

    pub fn from_be_bytes(bytes: &[u8], out: &mut [u64]) {
        out.fill(0);
        for (i, &b) in bytes.iter().enumerate() {
            out[i / 8] |= (b as u64) << (56 - 8 * (i % 8));
        }
    }
}
