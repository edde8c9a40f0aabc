//! Byte-level tokenization: every byte value is its own token, plus four
//! special markers. No merges, no external vocabulary, exact round trips.

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Number of raw byte tokens.
pub const BYTE_TOKENS: usize = 256;
/// Beginning-of-sequence marker.
pub const BOS: TokenId = 256;
/// End-of-sequence marker.
pub const EOS: TokenId = 257;
/// Padding (reserved; batches here are ragged, but the id stays stable).
pub const PAD: TokenId = 258;
/// Separator between context, query, and answer segments.
pub const SEP: TokenId = 259;
/// Full vocabulary: 256 bytes + BOS/EOS/PAD/SEP.
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(id: TokenId) -> bool {
    (BYTE_TOKENS..VOCAB_SIZE).contains(&id)
}

pub fn special_name(id: TokenId) -> Option<&'static str> {
    match id {
        BOS => Some("<bos>"),
        EOS => Some("<eos>"),
        PAD => Some("<pad>"),
        SEP => Some("<sep>"),
        _ => None,
    }
}

/// A validated sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<TokenId>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= VOCAB_SIZE) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
        Ok(TokenSequence { ids })
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        TokenSequence {
            ids: bytes.iter().map(|&b| b as TokenId).collect(),
        }
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_bytes(text.as_bytes())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: TokenId) -> Result<()> {
        if id >= VOCAB_SIZE {
            return Err(Error::Contract(format!(
                "token id {id} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
        self.ids.push(id);
        Ok(())
    }

    /// Byte payload, with special tokens dropped. Inverse of
    /// [`TokenSequence::from_bytes`] on sequences without specials.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.ids
            .iter()
            .filter(|&&id| id < BYTE_TOKENS)
            .map(|&id| id as u8)
            .collect()
    }

    /// Byte payload decoded as UTF-8, invalid sequences replaced.
    pub fn to_text_lossy(&self) -> String {
        String::from_utf8_lossy(&self.to_bytes()).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_every_byte_value() {
        let all: Vec<u8> = (0..=255).collect();
        let seq = TokenSequence::from_bytes(&all);
        assert_eq!(seq.len(), 256);
        assert_eq!(seq.to_bytes(), all);
    }

    #[test]
    fn round_trips_text() {
        for s in ["", "hello", "caf\u{e9} \u{1f980}", "rev: abc"] {
            assert_eq!(TokenSequence::from_text(s).to_text_lossy(), s);
        }
    }

    #[test]
    fn decode_skips_specials() {
        let mut seq = TokenSequence::from_text("ab");
        seq.push(SEP).unwrap();
        seq.push(EOS).unwrap();
        assert_eq!(seq.to_bytes(), b"ab");
        assert_eq!(seq.len(), 4);
    }

    #[test]
    fn rejects_out_of_vocab_ids() {
        assert!(TokenSequence::from_ids(vec![0, VOCAB_SIZE]).is_err());
        assert!(TokenSequence::from_ids(vec![BOS, EOS, PAD, SEP, 255]).is_ok());
        let mut seq = TokenSequence::default();
        assert!(seq.push(VOCAB_SIZE + 3).is_err());
    }

    #[test]
    fn special_ids_are_named_and_flagged() {
        assert!(is_special(BOS) && is_special(EOS) && is_special(PAD) && is_special(SEP));
        assert!(!is_special(0) && !is_special(255));
        assert_eq!(special_name(SEP), Some("<sep>"));
        assert_eq!(special_name(42), None);
    }
}
