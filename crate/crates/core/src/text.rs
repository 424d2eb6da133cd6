//! Text normalization shared by validation, retrieval, routing and cache keys.

use std::ops::Range;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// NFC-normalized and trimmed; the form used for exact text comparisons.
pub fn canonical(text: &str) -> String {
    nfc(text).trim().to_string()
}

/// Hex of the first 128 bits of SHA-256 over the NFC form of `text`.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(nfc(text).as_bytes());
    hex::encode(&digest[..16])
}

/// Lowercased tokens with punctuation stripped. Tokens that strip to nothing are dropped.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|raw| {
        let token: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        (!token.is_empty()).then_some(token)
    })
}

/// Case-folded, whitespace-collapsed view of a string that remembers where each
/// folded char came from in the source.
struct Folded {
    chars: Vec<char>,
    origin: Vec<Range<usize>>,
}

impl Folded {
    fn new(text: &str) -> Self {
        let mut chars = Vec::with_capacity(text.len());
        let mut origin = Vec::with_capacity(text.len());
        let mut pending_space: Option<Range<usize>> = None;
        for (i, c) in text.char_indices() {
            let span = i..i + c.len_utf8();
            if c.is_whitespace() {
                if !chars.is_empty() && pending_space.is_none() {
                    pending_space = Some(span);
                }
                continue;
            }
            if let Some(space) = pending_space.take() {
                chars.push(' ');
                origin.push(space);
            }
            for lower in c.to_lowercase() {
                chars.push(lower);
                origin.push(span.clone());
            }
        }
        Folded { chars, origin }
    }
}

/// First case-insensitive, whitespace-normalized occurrence of `needle` in
/// `haystack`, as a byte range of `haystack`.
pub fn find_folded(haystack: &str, needle: &str) -> Option<Range<usize>> {
    let hay = Folded::new(haystack);
    let pat = Folded::new(needle).chars;
    if pat.is_empty() || pat.len() > hay.chars.len() {
        return None;
    }
    let at = hay.chars.windows(pat.len()).position(|w| w == pat.as_slice())?;
    Some(hay.origin[at].start..hay.origin[at + pat.len() - 1].end)
}
