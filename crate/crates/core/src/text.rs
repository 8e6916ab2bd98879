//! Tokenization, answer normalization and character-offset helpers.
//!
//! All public offsets are character (code point) offsets, matching the
//! dataset files. Byte offsets are carried alongside for slicing.

use serde::{Deserialize, Serialize};

/// A token and where it came from in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Character offset of the first character.
    pub start: usize,
    /// Character offset one past the last character.
    pub end: usize,
    #[serde(skip)]
    pub byte_start: usize,
    #[serde(skip)]
    pub byte_end: usize,
}

impl Token {
    /// A synthetic token with no source position, e.g. a separator.
    pub fn marker(text: &str) -> Self {
        Token {
            text: text.to_string(),
            start: 0,
            end: 0,
            byte_start: 0,
            byte_end: 0,
        }
    }
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;
}

/// Splits on whitespace, keeps alphanumeric runs together and emits every
/// other character as its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct BasicTokenizer;

impl Tokenizer for BasicTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut tokens = Vec::new();
        // (char start, byte start) of the alphanumeric run in progress
        let mut run: Option<(usize, usize)> = None;
        let mut char_idx = 0;

        let flush = |run: &mut Option<(usize, usize)>,
                     tokens: &mut Vec<Token>,
                     char_end: usize,
                     byte_end: usize| {
            if let Some((cs, bs)) = run.take() {
                tokens.push(Token {
                    text: text[bs..byte_end].to_string(),
                    start: cs,
                    end: char_end,
                    byte_start: bs,
                    byte_end,
                });
            }
        };

        for (byte_idx, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                if run.is_none() {
                    run = Some((char_idx, byte_idx));
                }
            } else {
                flush(&mut run, &mut tokens, char_idx, byte_idx);
                if !ch.is_whitespace() {
                    tokens.push(Token {
                        text: ch.to_string(),
                        start: char_idx,
                        end: char_idx + 1,
                        byte_start: byte_idx,
                        byte_end: byte_idx + ch.len_utf8(),
                    });
                }
            }
            char_idx += 1;
        }
        flush(&mut run, &mut tokens, char_idx, text.len());
        tokens
    }
}

/// Tokenizes with [`BasicTokenizer`].
pub fn tokenize(text: &str) -> Vec<Token> {
    BasicTokenizer.tokenize(text)
}

/// Lowercases, strips punctuation and collapses whitespace.
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let kept: String = lowered
        .chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|c| *c == ' ' || c.is_alphanumeric())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Byte offset of character `idx`; `None` if past the end.
pub fn char_to_byte(text: &str, idx: usize) -> Option<usize> {
    if idx == 0 {
        return Some(0);
    }
    let mut count = 0;
    for (b, _) in text.char_indices() {
        if count == idx {
            return Some(b);
        }
        count += 1;
    }
    (count == idx).then_some(text.len())
}

/// Slice by character offsets.
pub fn slice_chars(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let bs = char_to_byte(text, start)?;
    let be = char_to_byte(text, end)?;
    Some(&text[bs..be])
}

/// Replace the characters in `[start, end)` with `replacement`.
pub fn replace_chars(text: &str, start: usize, end: usize, replacement: &str) -> Option<String> {
    let bs = char_to_byte(text, start)?;
    let be = char_to_byte(text, end)?;
    if bs > be {
        return None;
    }
    let mut out = String::with_capacity(text.len() + replacement.len());
    out.push_str(&text[..bs]);
    out.push_str(replacement);
    out.push_str(&text[be..]);
    Some(out)
}

/// Token index range covering a character span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenAlignment {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    /// Whether the character span already fell on token boundaries.
    pub exact: bool,
}

/// Smallest token range covering `[start, end)`. `None` when no token
/// overlaps the span.
pub fn align_char_span(tokens: &[Token], start: usize, end: usize) -> Option<TokenAlignment> {
    let first = tokens.iter().position(|t| t.end > start && t.start < end)?;
    let last = tokens.iter().rposition(|t| t.end > start && t.start < end)?;
    Some(TokenAlignment {
        start: first,
        end: last,
        exact: tokens[first].start == start && tokens[last].end == end,
    })
}

/// Position of the first token run in `haystack` matching `needle`
/// case-insensitively, token by token.
pub fn find_token_sequence(haystack: &[Token], needle: &[Token]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    let needle: Vec<String> = needle.iter().map(|t| t.text.to_lowercase()).collect();
    (0..=haystack.len() - needle.len()).find(|&i| {
        needle
            .iter()
            .zip(&haystack[i..])
            .all(|(n, h)| h.text.to_lowercase() == *n)
    })
}
