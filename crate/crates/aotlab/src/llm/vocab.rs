//! Character-level vocabulary: printable ASCII plus newline and BOS/EOS.

use thiserror::Error;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
const NL: usize = 2;
const CHAR_BASE: usize = 3;
const FIRST_CHAR: u8 = 0x20;
const LAST_CHAR: u8 = 0x7e;

/// Total token inventory size.
pub const VOCAB_SIZE: usize = CHAR_BASE + (LAST_CHAR - FIRST_CHAR + 1) as usize;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("character {0:?} is outside the printable-ASCII vocabulary")]
pub struct VocabError(char);

/// Encode text to token ids (no BOS/EOS added).
pub fn encode(text: &str) -> Result<Vec<usize>, VocabError> {
    text.chars()
        .map(|c| {
            if c == '\n' {
                return Ok(NL);
            }
            let b = c as u32;
            if (FIRST_CHAR as u32..=LAST_CHAR as u32).contains(&b) {
                Ok(CHAR_BASE + (b - FIRST_CHAR as u32) as usize)
            } else {
                Err(VocabError(c))
            }
        })
        .collect()
}

/// Decode ids back to text; BOS/EOS are dropped.
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .filter_map(|&id| {
            if id == NL {
                Some('\n')
            } else if id >= CHAR_BASE && id < VOCAB_SIZE {
                Some(((id - CHAR_BASE) as u8 + FIRST_CHAR) as char)
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_printable_text() {
        let text = "What is the arrow of time of this video?\nforward/backward.";
        let ids = encode(text).unwrap();
        assert_eq!(decode(&ids), text);
    }

    #[test]
    fn non_ascii_rejected() {
        assert!(encode("café").is_err());
    }
}
