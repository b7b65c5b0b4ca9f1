//! Byte-level tokenizer.
//!
//! Token ids 0–255 are raw byte values; ids 256+ are specials. Every byte
//! string round-trips exactly, so there is no out-of-vocabulary handling
//! anywhere downstream.

/// Padding (unused by the core paths, reserved for batched layouts).
pub const PAD: usize = 256;
/// Optional beginning-of-sequence marker (off by default; see `LmConfig`).
pub const BOS: usize = 257;
/// Reserved classification marker.
pub const CLS: usize = 258;
/// End-of-sequence / generation stop.
pub const EOS: usize = 259;
/// 256 byte values plus the four specials.
pub const VOCAB_SIZE: usize = 260;

/// A tokenized string: ids in `[0, VOCAB_SIZE)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Text to byte ids.
pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence(text.bytes().map(|b| b as usize).collect())
}

/// Ids back to text. Byte ids are decoded as UTF-8 (lossily, should a
/// generated sequence split a multi-byte character); special ids render as
/// nothing.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize("AB").ids(), [65, 66]);
        assert_eq!(tokenize("Ab").ids(), [65, 98]);
        assert_eq!(tokenize("").ids(), [] as [usize; 0]);
    }

    #[test]
    fn round_trips_exactly() {
        for s in ["Q: hi\nA:", "", "naïve café — ≤1", "line\nline"] {
            assert_eq!(detokenize(tokenize(s).ids()), s, "round trip of {s:?}");
        }
    }

    #[test]
    fn specials_are_outside_byte_range_and_render_empty() {
        for id in [PAD, BOS, CLS, EOS] {
            assert!(id >= 256 && id < VOCAB_SIZE);
        }
        assert_eq!(detokenize(&[65, EOS, 66, PAD]), "AB");
    }
}
