//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, followed by a
//! handful of special tokens. Remaining ids up to the vocabulary size are
//! unused (reserved for optional merges).

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
/// Placeholder marking where visual tokens are spliced into a sequence.
pub const IMAGE: u32 = 259;
/// Separates a question from its answer.
pub const ANS: u32 = 260;

pub(crate) const N_RESERVED: usize = 261;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteTokenizer {
    vocab_size: usize,
}

impl ByteTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size >= N_RESERVED);
        Self { vocab_size }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    pub fn is_special(id: u32) -> bool {
        id >= 256
    }

    /// Decodes byte ids, dropping special and unused ids. Invalid UTF-8 is
    /// replaced rather than rejected.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilingual_round_trip() {
        let t = ByteTokenizer::new(512);
        for s in ["lung cancer", "肺癌 CT", ""] {
            assert_eq!(t.decode(&t.encode(s)), s);
        }
        assert_eq!(t.decode(&[BOS, b'a' as u32, EOS]), "a");
    }
}
