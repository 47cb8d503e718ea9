//! Canonical binary encoding shared by the WAL, the transports and the block store.
//!
//! Integers are fixed-width big-endian, sequences and byte strings carry a
//! `u64` length prefix, struct fields are laid out in declaration order and
//! enum variants are tagged with a `u32` index. Decoding rejects trailing
//! bytes, so every value has exactly one accepted encoding.

use bincode::Options;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Upper bound on a single decoded value. Guards against hostile length prefixes.
pub const MAX_ENCODED_LEN: u64 = 256 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
#[error("codec: {0}")]
pub struct CodecError(#[from] bincode::Error);

fn options() -> impl Options {
    bincode::DefaultOptions::new()
        .with_fixint_encoding()
        .with_big_endian()
        .reject_trailing_bytes()
        .with_limit(MAX_ENCODED_LEN)
}

pub fn encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    // Serialization of in-memory values cannot fail for the types in this crate
    // (no maps with non-string keys, no unsized sequences).
    options()
        .serialize(value)
        .expect("canonical encoding of an in-memory value")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CodecError> {
    Ok(options().deserialize(bytes)?)
}

/// Encoded length without allocating the output.
pub fn encoded_len<T: Serialize + ?Sized>(value: &T) -> u64 {
    options()
        .serialized_size(value)
        .expect("canonical encoding of an in-memory value")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian_fixed_width() {
        assert_eq!(encode(&0x0102u16), vec![0x01, 0x02]);
        assert_eq!(encode(&1u64), vec![0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn byte_strings_are_length_prefixed() {
        let bytes = encode(&vec![7u8, 8]);
        assert_eq!(bytes, vec![0, 0, 0, 0, 0, 0, 0, 2, 7, 8]);
        assert_eq!(encoded_len(&vec![7u8, 8]), 10);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&5u32);
        bytes.push(0);
        assert!(decode::<u32>(&bytes).is_err());
    }

    #[test]
    fn hostile_length_prefix_is_rejected() {
        let bytes = [0xffu8; 8];
        assert!(decode::<Vec<u8>>(&bytes).is_err());
    }
}
