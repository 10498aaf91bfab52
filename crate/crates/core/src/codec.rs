//! Canonical binary encoding used for everything that is hashed, signed,
//! or persisted.
//!
//! The rules are fixed and bit-exact (see `docs/wire-format.md`):
//!
//! * integers are fixed-width big-endian,
//! * fixed-size byte arrays (addresses, hashes, keys, signatures) are raw
//!   bytes with no prefix,
//! * variable-length byte strings carry a `u32` big-endian length prefix,
//! * lists carry a `u32` big-endian element count followed by the encoded
//!   elements in order,
//! * sets are encoded as lists in their canonical (sorted) order.
//!
//! Decoders reject trailing bytes and refuse length prefixes beyond hard
//! caps, so a corrupt or hostile input can never trigger an oversized
//! allocation.

use thiserror::Error;

/// Upper bound for any single variable-length field.
pub const MAX_FIELD_BYTES: usize = 1 << 20;
/// Upper bound for any encoded list length.
pub const MAX_LIST_LEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input")]
    UnexpectedEof,
    #[error("trailing bytes after value")]
    TrailingBytes,
    #[error("length {0} exceeds cap")]
    LengthOverflow(u32),
    #[error("unknown opcode 0x{0:02x}")]
    BadOpcode(u8),
    #[error("invalid value: {0}")]
    BadValue(&'static str),
    #[error("invalid utf-8 in string field")]
    BadUtf8,
}

/// Append-only canonical writer.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// Raw fixed-width bytes, no length prefix.
    pub fn fixed(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// Length-prefixed variable bytes.
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        debug_assert!(v.len() <= MAX_FIELD_BYTES);
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    /// Length-prefixed UTF-8 string.
    pub fn string(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over canonical bytes. `finish` must be called to assert the
/// input was consumed exactly.
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::UnexpectedEof);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u32()?;
        if len as usize > MAX_FIELD_BYTES {
            return Err(CodecError::LengthOverflow(len));
        }
        self.take(len as usize)
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::BadUtf8)
    }

    /// List length header, capped.
    pub fn list_len(&mut self) -> Result<usize, CodecError> {
        let len = self.u32()?;
        if len as usize > MAX_LIST_LEN {
            return Err(CodecError::LengthOverflow(len));
        }
        Ok(len as usize)
    }

    /// Asserts the whole input was consumed.
    pub fn finish(self) -> Result<(), CodecError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(CodecError::TrailingBytes)
        }
    }
}
