//! Reserved token ids and the whitespace/id tokenizer.

use crate::seeding::fnv1a;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const COMPANY_MARKER_ID: usize = 2;
pub const NUMBER_MARKER_ID: usize = 3;
pub const UNK_ID: usize = 4;
/// First id available to ordinary tokens.
pub const FIRST_FREE_ID: usize = 5;

pub const COMPANY_MARKER: &str = "|COMPANY|";
pub const NUMBER_MARKER: &str = "<NUMBER>";

/// Maps a whitespace token to an id. Reserved spellings map to their
/// reserved ids; everything else is hashed into the free range.
pub fn token_id(token: &str, vocab_size: usize) -> usize {
    match token {
        "[PAD]" => PAD_ID,
        "[CLS]" => CLS_ID,
        COMPANY_MARKER => COMPANY_MARKER_ID,
        NUMBER_MARKER => NUMBER_MARKER_ID,
        "[UNK]" => UNK_ID,
        _ if vocab_size <= FIRST_FREE_ID => UNK_ID,
        _ => FIRST_FREE_ID + (fnv1a(token.as_bytes()) % (vocab_size - FIRST_FREE_ID) as u64) as usize,
    }
}

pub fn tokenize(text: &str, vocab_size: usize) -> Vec<usize> {
    text.split_whitespace().map(|t| token_id(t, vocab_size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_and_hashed_ids() {
        assert_eq!(token_id(COMPANY_MARKER, 1000), COMPANY_MARKER_ID);
        assert_eq!(token_id(NUMBER_MARKER, 1000), NUMBER_MARKER_ID);
        let id = token_id("considers", 1000);
        assert!((FIRST_FREE_ID..1000).contains(&id));
        assert_eq!(id, token_id("considers", 1000));
    }
}
