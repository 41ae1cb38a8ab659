//! Canonical field encoding.
//!
//! Every hashed, signed or transmitted structure is a flat sequence of fields:
//!
//! ```text
//! +-----+----------------------+---------------+
//! | tag | length (u32, BE)     | value         |
//! | 1 B | 4 B                  | length bytes  |
//! +-----+----------------------+---------------+
//! ```
//!
//! Integers are big-endian and fixed width (`u32` = 4 bytes, `u64` = 8 bytes).
//! Arbitrary-precision integers are their minimal big-endian magnitude.
//! Lists repeat the same tag in order. Nested structures are an encoded field
//! sequence carried as the value of a single field.

use num_bigint::BigUint;
use thiserror::Error;

use crate::ids::{GroupId, NodeId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated field header at offset {0}")]
    TruncatedHeader(usize),
    #[error("field at offset {offset} declares {declared} bytes, {available} available")]
    TruncatedValue {
        offset: usize,
        declared: usize,
        available: usize,
    },
    #[error("unknown field tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("missing field {0:?}")]
    Missing(Tag),
    #[error("field {tag:?} has length {len}, expected {expected}")]
    BadWidth { tag: Tag, len: usize, expected: usize },
    #[error("unexpected field {found:?}, expected {expected:?}")]
    Unexpected { found: Tag, expected: Tag },
    #[error("trailing fields after structure")]
    Trailing,
    #[error("unknown message type 0x{0:02x}")]
    UnknownMessage(u8),
    #[error("empty message")]
    Empty,
    #[error("invalid value for {0:?}")]
    Invalid(Tag),
}

macro_rules! tags {
    ($($name:ident = $val:expr),* $(,)?) => {
        /// Field tags of the canonical encoding.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        #[repr(u8)]
        pub enum Tag { $($name = $val),* }

        impl TryFrom<u8> for Tag {
            type Error = DecodeError;
            fn try_from(v: u8) -> Result<Self, DecodeError> {
                match v {
                    $($val => Ok(Tag::$name),)*
                    other => Err(DecodeError::UnknownTag(other)),
                }
            }
        }
    };
}

tags! {
    Source = 0x01,
    Dest = 0x02,
    Seq = 0x03,
    Lifetime = 0x04,
    Node = 0x05,
    Signature = 0x06,
    Chain = 0x07,
    Group = 0x08,
    Lineage = 0x09,
    Epoch = 0x0a,
    KeyBytes = 0x0b,
    GroupKey = 0x0c,
    MemberKey = 0x0d,
    SessionKey = 0x0e,
    RingKey = 0x0f,
    PublicKey = 0x10,
    PrivateKey = 0x11,
    MemberId = 0x12,
    Nonce = 0x13,
    Timestamp = 0x14,
    Session = 0x15,
    ZkN = 0x16,
    ZkV = 0x17,
    ZkX = 0x18,
    ZkChallenge = 0x19,
    ZkY = 0x1a,
    Certificate = 0x1b,
    SymCiphertext = 0x1c,
    PkCiphertext = 0x1d,
    Member = 0x1e,
    Route = 0x1f,
    Reason = 0x20,
    Payload = 0x21,
    Round = 0x22,
    Value = 0x23,
    Query = 0x24,
    Leader = 0x25,
    Secret = 0x26,
    Removed = 0x27,
    Provider = 0x28,
    Flag = 0x29,
    Target = 0x2a,
}

/// Builder for a canonical field sequence.
#[derive(Default, Clone, Debug)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a message with a one-octet type tag.
    pub fn with_type(kind: u8) -> Self {
        Self { buf: vec![kind] }
    }

    pub fn bytes(mut self, tag: Tag, value: &[u8]) -> Self {
        self.push(tag, value);
        self
    }

    pub fn push(&mut self, tag: Tag, value: &[u8]) {
        let len = u32::try_from(value.len()).expect("field longer than u32::MAX");
        self.buf.push(tag as u8);
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(value);
    }

    pub fn u32(self, tag: Tag, v: u32) -> Self {
        self.bytes(tag, &v.to_be_bytes())
    }

    pub fn u64(self, tag: Tag, v: u64) -> Self {
        self.bytes(tag, &v.to_be_bytes())
    }

    pub fn node(self, tag: Tag, n: NodeId) -> Self {
        self.u32(tag, n.0)
    }

    pub fn group(self, g: GroupId) -> Self {
        self.u32(Tag::Group, g.0)
    }

    pub fn big(self, tag: Tag, v: &BigUint) -> Self {
        self.bytes(tag, &v.to_bytes_be())
    }

    pub fn nodes(mut self, tag: Tag, ns: &[NodeId]) -> Self {
        for n in ns {
            self.push(tag, &n.0.to_be_bytes());
        }
        self
    }

    pub fn nested(self, tag: Tag, inner: Encoder) -> Self {
        self.bytes(tag, &inner.buf)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// A decoded field borrowed from the input buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Field<'a> {
    pub tag: Tag,
    pub value: &'a [u8],
}

impl<'a> Field<'a> {
    pub fn as_u32(&self) -> Result<u32, DecodeError> {
        let arr: [u8; 4] = self.value.try_into().map_err(|_| DecodeError::BadWidth {
            tag: self.tag,
            len: self.value.len(),
            expected: 4,
        })?;
        Ok(u32::from_be_bytes(arr))
    }

    pub fn as_u64(&self) -> Result<u64, DecodeError> {
        let arr: [u8; 8] = self.value.try_into().map_err(|_| DecodeError::BadWidth {
            tag: self.tag,
            len: self.value.len(),
            expected: 8,
        })?;
        Ok(u64::from_be_bytes(arr))
    }

    pub fn as_node(&self) -> Result<NodeId, DecodeError> {
        self.as_u32().map(NodeId)
    }

    pub fn as_big(&self) -> BigUint {
        BigUint::from_bytes_be(self.value)
    }
}

/// Splits a buffer into fields. Fails on any truncation or unknown tag.
pub fn decode_fields(buf: &[u8]) -> Result<Vec<Field<'_>>, DecodeError> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < buf.len() {
        if buf.len() - off < 5 {
            return Err(DecodeError::TruncatedHeader(off));
        }
        let tag = Tag::try_from(buf[off])?;
        let len = u32::from_be_bytes(buf[off + 1..off + 5].try_into().unwrap()) as usize;
        let start = off + 5;
        let available = buf.len() - start;
        if len > available {
            return Err(DecodeError::TruncatedValue {
                offset: off,
                declared: len,
                available,
            });
        }
        out.push(Field {
            tag,
            value: &buf[start..start + len],
        });
        off = start + len;
    }
    Ok(out)
}

/// Sequential reader over a decoded field list, enforcing field order.
pub struct Reader<'a> {
    fields: Vec<Field<'a>>,
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self, DecodeError> {
        Ok(Self {
            fields: decode_fields(buf)?,
            pos: 0,
        })
    }

    pub fn peek_tag(&self) -> Option<Tag> {
        self.fields.get(self.pos).map(|f| f.tag)
    }

    pub fn next(&mut self, tag: Tag) -> Result<Field<'a>, DecodeError> {
        match self.fields.get(self.pos) {
            None => Err(DecodeError::Missing(tag)),
            Some(f) if f.tag != tag => Err(DecodeError::Unexpected {
                found: f.tag,
                expected: tag,
            }),
            Some(f) => {
                self.pos += 1;
                Ok(*f)
            }
        }
    }

    pub fn bytes(&mut self, tag: Tag) -> Result<&'a [u8], DecodeError> {
        self.next(tag).map(|f| f.value)
    }

    pub fn u32(&mut self, tag: Tag) -> Result<u32, DecodeError> {
        self.next(tag)?.as_u32()
    }

    pub fn u64(&mut self, tag: Tag) -> Result<u64, DecodeError> {
        self.next(tag)?.as_u64()
    }

    pub fn node(&mut self, tag: Tag) -> Result<NodeId, DecodeError> {
        self.next(tag)?.as_node()
    }

    pub fn group(&mut self) -> Result<GroupId, DecodeError> {
        self.u32(Tag::Group).map(GroupId)
    }

    pub fn big(&mut self, tag: Tag) -> Result<BigUint, DecodeError> {
        self.next(tag).map(|f| f.as_big())
    }

    /// Consumes every consecutive field carrying `tag`.
    pub fn repeated(&mut self, tag: Tag) -> Vec<Field<'a>> {
        let mut out = Vec::new();
        while self.peek_tag() == Some(tag) {
            out.push(self.fields[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn nodes(&mut self, tag: Tag) -> Result<Vec<NodeId>, DecodeError> {
        self.repeated(tag).iter().map(|f| f.as_node()).collect()
    }

    pub fn optional(&mut self, tag: Tag) -> Option<Field<'a>> {
        if self.peek_tag() == Some(tag) {
            let f = self.fields[self.pos];
            self.pos += 1;
            Some(f)
        } else {
            None
        }
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.pos == self.fields.len() {
            Ok(())
        } else {
            Err(DecodeError::Trailing)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_tag_length_value() {
        let bytes = Encoder::new().u32(Tag::Seq, 7).finish();
        assert_eq!(bytes, vec![0x03, 0, 0, 0, 4, 0, 0, 0, 7]);
    }

    #[test]
    fn typed_message_prefix() {
        let bytes = Encoder::with_type(0x20).bytes(Tag::Chain, &[1, 2]).finish();
        assert_eq!(bytes, vec![0x20, 0x07, 0, 0, 0, 2, 1, 2]);
    }

    #[test]
    fn truncation_is_reported() {
        let mut bytes = Encoder::new().u64(Tag::Nonce, 1).finish();
        bytes.pop();
        assert!(matches!(decode_fields(&bytes), Err(DecodeError::TruncatedValue { .. })));
        assert!(matches!(
            decode_fields(&[0x03, 0, 0]),
            Err(DecodeError::TruncatedHeader(0))
        ));
    }

    #[test]
    fn reader_enforces_order() {
        let bytes = Encoder::new()
            .node(Tag::Source, NodeId(1))
            .node(Tag::Dest, NodeId(2))
            .finish();
        let mut r = Reader::new(&bytes).unwrap();
        assert!(matches!(r.node(Tag::Dest), Err(DecodeError::Unexpected { .. })));
        assert_eq!(r.node(Tag::Source).unwrap(), NodeId(1));
        assert_eq!(r.node(Tag::Dest).unwrap(), NodeId(2));
        r.finish().unwrap();
    }

    #[test]
    fn repeated_fields_roundtrip() {
        let ns = [NodeId(3), NodeId(9), NodeId(4)];
        let bytes = Encoder::new().nodes(Tag::Node, &ns).u32(Tag::Seq, 1).finish();
        let mut r = Reader::new(&bytes).unwrap();
        assert_eq!(r.nodes(Tag::Node).unwrap(), ns.to_vec());
        assert_eq!(r.u32(Tag::Seq).unwrap(), 1);
    }
}
