//! 2-bit packed ternary storage.
//!
//! Sixteen codes per little-endian `u32`; code `i` occupies bits
//! `[2(i mod 16), 2(i mod 16) + 1]` of word `i / 16`:
//!
//! | bits | code |
//! |------|------|
//! | `00` | 0    |
//! | `01` | +1   |
//! | `11` | -1   |
//! | `10` | invalid |
//!
//! `11` is the 2-bit two's-complement pattern of -1, so sign extension of
//! a field yields the code directly. Pad bits past the logical length are 0.

use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::ternarize::TernaryTensor;

pub const CODES_PER_WORD: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct PackedTernary<T> {
    words: Vec<u32>,
    len: usize,
    alpha: T,
    beta: T,
    shape: Vec<usize>,
}

#[inline]
fn encode(code: i8) -> u32 {
    match code {
        1 => 0b01,
        -1 => 0b11,
        _ => 0b00,
    }
}

/// Decodes one field; `None` for the reserved `10` pattern.
#[inline]
pub(crate) fn decode(bits: u32) -> Option<i8> {
    match bits & 0b11 {
        0b00 => Some(0),
        0b01 => Some(1),
        0b11 => Some(-1),
        _ => None,
    }
}

pub fn words_for(len: usize) -> usize {
    len.div_ceil(CODES_PER_WORD)
}

pub fn pack_codes(codes: &[i8]) -> Vec<u32> {
    let mut words = vec![0u32; words_for(codes.len())];
    for (i, &c) in codes.iter().enumerate() {
        words[i / CODES_PER_WORD] |= encode(c) << (2 * (i % CODES_PER_WORD));
    }
    words
}

/// Decodes `len` codes, rejecting reserved fields and nonzero pad bits.
pub fn unpack_codes(words: &[u32], len: usize) -> Result<Vec<i8>> {
    if words.len() != words_for(len) {
        return Err(TernError::Truncated {
            offset: 0,
            needed: words_for(len) * 4,
            available: words.len() * 4,
        });
    }
    let mut codes = Vec::with_capacity(len);
    for i in 0..len {
        let bits = words[i / CODES_PER_WORD] >> (2 * (i % CODES_PER_WORD));
        codes.push(decode(bits).ok_or(TernError::CorruptCode { index: i })?);
    }
    let used = len % CODES_PER_WORD;
    if used != 0 {
        let tail = words[words.len() - 1] >> (2 * used);
        if tail != 0 {
            return Err(TernError::CorruptCode { index: len });
        }
    }
    Ok(codes)
}

pub fn pack<T: Scalar>(t: &TernaryTensor<T>) -> PackedTernary<T> {
    PackedTernary {
        words: pack_codes(t.codes()),
        len: t.len(),
        alpha: t.alpha(),
        beta: t.beta(),
        shape: t.shape().to_vec(),
    }
}

pub fn unpack<T: Scalar>(p: &PackedTernary<T>) -> Result<TernaryTensor<T>> {
    let codes = unpack_codes(&p.words, p.len)?;
    TernaryTensor::from_parts(codes, p.alpha, p.beta, p.shape.clone())
}

impl<T: Scalar> PackedTernary<T> {
    /// Builds from raw words, validating every field.
    pub fn from_words(words: Vec<u32>, alpha: T, beta: T, shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        unpack_codes(&words, len)?;
        Ok(PackedTernary {
            words,
            len,
            alpha,
            beta,
            shape,
        })
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Code `i`; the word array was validated at construction.
    #[inline]
    pub fn code(&self, i: usize) -> i8 {
        decode(self.words[i / CODES_PER_WORD] >> (2 * (i % CODES_PER_WORD))).unwrap_or(0)
    }

    pub fn nonzeros(&self) -> usize {
        self.words
            .iter()
            .map(|w| {
                // a field is nonzero iff its low bit is set (00 → 0, 01/11 → ±1)
                (w & 0x5555_5555).count_ones() as usize
            })
            .sum()
    }

    /// Payload bytes of the code words alone.
    pub fn word_bytes(&self) -> usize {
        self.words.len() * 4
    }
}
