//! Canonical byte encoding shared by every signed, hashed or transmitted
//! structure.
//!
//! A structure is a fixed, ordered list of fields. Each field is written as a
//! 4-byte big-endian length followed by the field bytes. Nested structures are
//! encoded first and then written as a single field. Integers are written as
//! fixed-width big-endian fields (`u8` = 1 byte, `u32` = 4, `u64` = 8).

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input truncated")]
    Truncated,
    #[error("{0} trailing bytes after structure")]
    TrailingBytes(usize),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

/// Builder for one canonical structure.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(mut self, field: &[u8]) -> Self {
        self.push(field);
        self
    }

    pub fn str(self, field: &str) -> Self {
        self.bytes(field.as_bytes())
    }

    pub fn u8(self, v: u8) -> Self {
        self.bytes(&[v])
    }

    pub fn u32(self, v: u32) -> Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u64(self, v: u64) -> Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn push(&mut self, field: &[u8]) {
        let len = u32::try_from(field.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Encodes a list of fields as one structure.
pub fn frame<T: AsRef<[u8]>>(fields: &[T]) -> Vec<u8> {
    let mut enc = Encoder::new();
    for f in fields {
        enc.push(f.as_ref());
    }
    enc.finish()
}

/// Splits a structure back into its fields.
pub fn unframe(buf: &[u8]) -> Result<Vec<&[u8]>, DecodeError> {
    let mut dec = Decoder::new(buf);
    let mut out = Vec::new();
    while !dec.is_empty() {
        out.push(dec.field()?);
    }
    Ok(out)
}

/// Cursor over the fields of one structure.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn field(&mut self) -> Result<&'a [u8], DecodeError> {
        let len_bytes = self.take(4)?;
        let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
        self.take(len)
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let f = self.field()?;
        f.try_into().map_err(|_| DecodeError::Invalid("fixed-width field"))
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.fixed::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.fixed::<4>()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.fixed::<8>()?))
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        let f = self.field()?;
        String::from_utf8(f.to_vec()).map_err(|_| DecodeError::Invalid("utf-8 text"))
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::TrailingBytes(self.buf.len() - self.pos))
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_length_prefixed_big_endian() {
        let enc = Encoder::new().bytes(b"ab").u32(7).finish();
        assert_eq!(enc, vec![0, 0, 0, 2, b'a', b'b', 0, 0, 0, 4, 0, 0, 0, 7]);
    }

    #[test]
    fn truncated_and_trailing_inputs_are_rejected() {
        let enc = frame(&[b"hello".as_slice()]);
        assert_eq!(Decoder::new(&enc[..6]).field(), Err(DecodeError::Truncated));
        let mut extra = enc.clone();
        extra.push(0);
        let mut dec = Decoder::new(&extra);
        dec.field().unwrap();
        assert_eq!(dec.finish(), Err(DecodeError::TrailingBytes(1)));
    }

    proptest! {
        #[test]
        fn frame_unframe_roundtrip(fields in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 0..8)) {
            let enc = frame(&fields);
            let back: Vec<Vec<u8>> = unframe(&enc).unwrap().into_iter().map(<[u8]>::to_vec).collect();
            prop_assert_eq!(back, fields);
        }
    }
}
