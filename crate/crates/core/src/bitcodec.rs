//! Bit-exact encoding of quantized messages.
//!
//! Three codecs live here: Elias-gamma codes for variable-length level
//! indices, fixed-width packing for `k`-level payloads, and the
//! [`WireMessage`] framing shared by every scheme.
//!
//! Bits are written most-significant-first within each byte.
//!
//! # Wire layout
//!
//! All header integers are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CQ01"
//!      4     1  scheme id
//!      5     4  n (u32)
//!      9     4  d (u32)
//!     13     2  k (u16)
//!     15     8  seed (u64)
//!     23     8  payload bit length (u64)
//!     31     *  payload, zero-padded to a byte boundary
//! ```

use thiserror::Error;

use crate::{Error as CrateError, Result};

pub const MAGIC: [u8; 4] = *b"CQ01";
pub const HEADER_BYTES: usize = 31;
pub const HEADER_BITS: u64 = HEADER_BYTES as u64 * 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown scheme id {0}")]
    UnknownScheme(u8),
    #[error("length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("stream truncated at bit {offset}")]
    Truncated { offset: u64 },
    #[error("malformed code at bit {offset}")]
    Malformed { offset: u64 },
    #[error("nonzero padding bits")]
    NonZeroPadding,
}

/// A packed sequence of bits with an exact length.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct BitStream {
    bytes: Vec<u8>,
    len: u64,
}

impl BitStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            len: 0,
        }
    }

    /// Wraps raw bytes holding `len` bits. Bits past `len` must be zero.
    pub fn from_bytes(bytes: Vec<u8>, len: u64) -> Result<Self, CodecError> {
        let expected = len.div_ceil(8) as usize;
        if bytes.len() != expected {
            return Err(CodecError::LengthMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let used = (len % 8) as u32;
        if used != 0 && bytes[expected - 1] & (0xFF >> used) != 0 {
            return Err(CodecError::NonZeroPadding);
        }
        Ok(Self { bytes, len })
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn push_bit(&mut self, bit: bool) {
        let pos = (self.len % 8) as u32;
        if pos == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> pos;
        }
        self.len += 1;
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        for b in (0..width).rev() {
            self.push_bit((value >> b) & 1 == 1);
        }
    }

    pub fn extend(&mut self, other: &BitStream) {
        for i in 0..other.len {
            self.push_bit(other.bit(i));
        }
    }

    #[inline]
    pub fn bit(&self, i: u64) -> bool {
        debug_assert!(i < self.len);
        self.bytes[(i / 8) as usize] & (0x80 >> (i % 8)) != 0
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader { stream: self, pos: 0 }
    }

    /// Parses a string of `'0'`/`'1'` characters.
    pub fn from_bit_str(s: &str) -> Option<Self> {
        let mut out = Self::new();
        for c in s.chars() {
            match c {
                '0' => out.push_bit(false),
                '1' => out.push_bit(true),
                _ => return None,
            }
        }
        Some(out)
    }
}

impl std::fmt::Display for BitStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.bit(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Sequential reader over a [`BitStream`].
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    stream: &'a BitStream,
    pos: u64,
}

impl BitReader<'_> {
    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn remaining(&self) -> u64 {
        self.stream.len - self.pos
    }

    pub fn read_bit(&mut self) -> Result<bool, CodecError> {
        if self.pos >= self.stream.len {
            return Err(CodecError::Truncated { offset: self.pos });
        }
        let b = self.stream.bit(self.pos);
        self.pos += 1;
        Ok(b)
    }

    pub fn read_bits(&mut self, width: u32) -> Result<u64, CodecError> {
        if self.remaining() < width as u64 {
            return Err(CodecError::Truncated {
                offset: self.stream.len,
            });
        }
        let mut v = 0u64;
        for _ in 0..width {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Ok(v)
    }

    /// Reads one Elias-gamma codeword.
    pub fn read_gamma(&mut self) -> Result<u64, CodecError> {
        let start = self.pos;
        let mut zeros = 0u32;
        while !self.read_bit().map_err(|_| CodecError::Truncated { offset: start })? {
            zeros += 1;
            if zeros > 63 {
                return Err(CodecError::Malformed { offset: start });
            }
        }
        if self.remaining() < zeros as u64 {
            return Err(CodecError::Truncated { offset: start });
        }
        let low = self.read_bits(zeros)?;
        Ok((1u64 << zeros) | low)
    }
}

/// Appends the Elias-gamma codeword of `value` to `out`.
pub fn write_gamma(out: &mut BitStream, value: u64) -> Result<(), CodecError> {
    if value == 0 {
        return Err(CodecError::Malformed { offset: out.len() });
    }
    let nbits = 63 - value.leading_zeros();
    out.push_bits(0, nbits);
    out.push_bits(value, nbits + 1);
    Ok(())
}

/// Elias-gamma codeword of `value`: `floor(log2 value)` zeros followed by
/// the binary representation of `value`.
pub fn elias_gamma_encode(value: u64) -> Result<BitStream> {
    if value == 0 {
        return Err(CrateError::invalid("Elias-gamma codes start at 1"));
    }
    let mut out = BitStream::with_capacity(gamma_len(value) as usize);
    write_gamma(&mut out, value)?;
    Ok(out)
}

/// Decodes a concatenation of Elias-gamma codewords, consuming the whole
/// stream.
pub fn elias_gamma_decode(stream: &BitStream) -> Result<Vec<u64>, CodecError> {
    let mut r = stream.reader();
    let mut out = Vec::new();
    while r.remaining() > 0 {
        out.push(r.read_gamma()?);
    }
    Ok(out)
}

/// Length in bits of the gamma codeword of `value >= 1`.
pub fn gamma_len(value: u64) -> u64 {
    2 * (63 - value.leading_zeros()) as u64 + 1
}

/// Bits per index for a `k`-level alphabet: `ceil(log2 k)`.
pub fn index_width(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// Packs indices in `[0, k)` using `ceil(log2 k)` bits each.
pub fn pack_fixed(indices: &[u32], k: usize) -> Result<BitStream> {
    if k < 2 {
        return Err(CrateError::invalid("fixed-width packing needs k >= 2"));
    }
    let width = index_width(k);
    let mut out = BitStream::with_capacity(indices.len() * width as usize);
    for (pos, &ix) in indices.iter().enumerate() {
        if ix as usize >= k {
            return Err(CrateError::invalid(format!(
                "index {ix} at position {pos} is not below k={k}"
            )));
        }
        out.push_bits(ix as u64, width);
    }
    Ok(out)
}

/// Inverse of [`pack_fixed`]. The stream must hold exactly `count` indices.
pub fn unpack_fixed(stream: &BitStream, k: usize, count: usize) -> Result<Vec<u32>> {
    if k < 2 {
        return Err(CrateError::invalid("fixed-width packing needs k >= 2"));
    }
    let width = index_width(k);
    let expected = count as u64 * width as u64;
    if stream.len() != expected {
        return Err(CodecError::LengthMismatch {
            expected: expected as usize,
            actual: stream.len() as usize,
        }
        .into());
    }
    let mut r = stream.reader();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let v = r.read_bits(width)?;
        if v as usize >= k {
            return Err(CodecError::Malformed {
                offset: r.position() - width as u64,
            }
            .into());
        }
        out.push(v as u32);
    }
    Ok(out)
}

/// Zig-zag map of a level index around the central level
/// `center = (k - 1) / 2`: `center -> 0, center - 1 -> 1, center + 1 -> 2,
/// center - 2 -> 3, ...`. Central levels get the shortest gamma codes.
pub fn zigzag(index: u32, k: usize) -> u64 {
    let center = ((k - 1) / 2) as i64;
    let delta = index as i64 - center;
    if delta >= 0 {
        2 * delta as u64
    } else {
        (-2 * delta - 1) as u64
    }
}

/// Inverse of [`zigzag`].
pub fn unzigzag(z: u64, k: usize) -> Option<u32> {
    let center = ((k - 1) / 2) as i64;
    let delta = if z % 2 == 0 {
        (z / 2) as i64
    } else {
        -(z.div_ceil(2) as i64)
    };
    let ix = center + delta;
    (0..k as i64).contains(&ix).then_some(ix as u32)
}

/// One client's framed message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub scheme: u8,
    pub n: u32,
    pub d: u32,
    pub k: u16,
    pub seed: u64,
    pub payload: BitStream,
}

impl WireMessage {
    /// Header plus exact payload bits.
    pub fn bit_len(&self) -> u64 {
        HEADER_BITS + self.payload.len()
    }
}

/// Scheme ids accepted by [`message_decode`].
pub fn known_scheme(id: u8) -> bool {
    crate::harness::SchemeId::from_wire(id).is_some()
}

pub fn message_encode(m: &WireMessage) -> Result<Vec<u8>, CodecError> {
    if !known_scheme(m.scheme) {
        return Err(CodecError::UnknownScheme(m.scheme));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + m.payload.as_bytes().len());
    out.extend_from_slice(&MAGIC);
    out.push(m.scheme);
    out.extend_from_slice(&m.n.to_le_bytes());
    out.extend_from_slice(&m.d.to_le_bytes());
    out.extend_from_slice(&m.k.to_le_bytes());
    out.extend_from_slice(&m.seed.to_le_bytes());
    out.extend_from_slice(&m.payload.len().to_le_bytes());
    out.extend_from_slice(m.payload.as_bytes());
    Ok(out)
}

pub fn message_decode(bytes: &[u8]) -> Result<WireMessage, CodecError> {
    if bytes.len() < HEADER_BYTES {
        return Err(CodecError::LengthMismatch {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let scheme = bytes[4];
    if !known_scheme(scheme) {
        return Err(CodecError::UnknownScheme(scheme));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    let k = u16::from_le_bytes(bytes[13..15].try_into().unwrap());
    let seed = u64::from_le_bytes(bytes[15..23].try_into().unwrap());
    let bits = u64::from_le_bytes(bytes[23..31].try_into().unwrap());
    let body = &bytes[HEADER_BYTES..];
    let expected = HEADER_BYTES as u64 + bits.div_ceil(8);
    if expected != bytes.len() as u64 {
        return Err(CodecError::LengthMismatch {
            expected: expected as usize,
            actual: bytes.len(),
        });
    }
    let payload = BitStream::from_bytes(body.to_vec(), bits)?;
    Ok(WireMessage {
        scheme,
        n,
        d,
        k,
        seed,
        payload,
    })
}
