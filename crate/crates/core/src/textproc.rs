//! Rule-based sentence segmentation, word tokenization and sentence masking.
//!
//! Offsets are byte offsets into the article text. Segmentation is purely
//! rule driven so that the same text always yields the same spans, which the
//! fragment selector relies on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::NewsArticle;

/// Literal marker substituted for a masked sentence.
pub const MASK_MARKER: &str = "[MASK]";

/// Lowercased abbreviations whose trailing period never ends a sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "gen", "gov", "sen", "rep",
    "rev", "col", "lt", "sgt", "capt", "cmdr", "adm", "hon", "pres", "inc", "ltd", "co", "corp",
    "bros", "vs", "etc", "e.g", "i.e", "u.s", "u.k", "no", "vol", "fig", "approx", "dept", "est",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "a.m",
    "p.m",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("sentence index {index} out of range for article with {count} sentences")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("article text contains no sentences")]
    NoSentences,
}

/// One sentence of an article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub index: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub words: Vec<String>,
}

impl SentenceSpan {
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.char_start..self.char_end]
    }
}

/// A copy of an article body with exactly one sentence replaced by [`MASK_MARKER`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedVariant {
    pub masked_index: usize,
    pub text: String,
    /// Sentence spans of `text`, with the masked sentence covering the marker.
    pub spans: Vec<(usize, usize)>,
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn is_opener(c: char) -> bool {
    c.is_uppercase() || matches!(c, '"' | '\'' | '\u{201c}' | '\u{2018}')
}

fn ends_with_abbreviation(text: &str, dot_at: usize) -> bool {
    let before = &text[..dot_at];
    let word_start = before
        .rfind(char::is_whitespace)
        .map(|i| i + before[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(0);
    let word: String = before[word_start..]
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    !word.is_empty() && ABBREVIATIONS.contains(&word.as_str())
}

/// Byte ranges of the sentences in `text`.
fn sentence_ranges(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut ranges = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(pos);
        }
        if is_terminator(c) {
            let mut j = i + 1;
            while j < chars.len() && is_terminator(chars[j].1) {
                j += 1;
            }
            while j < chars.len() && is_closer(chars[j].1) {
                j += 1;
            }
            let run_is_single_dot = j == i + 1 && c == '.';
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let boundary = k > j
                && k < chars.len()
                && is_opener(chars[k].1)
                && !(run_is_single_dot && ends_with_abbreviation(text, pos));
            if boundary {
                let end = chars[j - 1].0 + chars[j - 1].1.len_utf8();
                ranges.push((start.take().unwrap_or(pos), end));
                i = k;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            ranges.push((s, end));
        }
    }
    ranges
}

/// Split an article body into sentences.
///
/// A sentence ends at a run of `.`, `!` or `?` (plus any closing quotes or
/// brackets) that is followed by whitespace and then a capital letter or an
/// opening quote. A lone period after a known abbreviation never ends a
/// sentence. Text without any terminator is a single sentence.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    sentence_ranges(text)
        .into_iter()
        .enumerate()
        .map(|(index, (char_start, char_end))| SentenceSpan {
            index,
            char_start,
            char_end,
            words: tokenize_str(&text[char_start..char_end]),
        })
        .collect()
}

/// Word tokens of a sentence, as stored on the span.
pub fn tokenize_words(sentence: &SentenceSpan) -> Vec<String> {
    sentence.words.clone()
}

/// Whitespace split, then leading and trailing punctuation peeled into
/// separate single-character tokens. Case is preserved.
pub fn tokenize_str(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_string())
        .collect()
}

/// Like [`tokenize_str`] but returns byte ranges into `text`.
pub fn tokenize_with_offsets(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut chunk_start: Option<usize> = None;
    let push_chunk = |s: usize, e: usize, out: &mut Vec<(usize, usize)>| {
        let chunk = &text[s..e];
        let core_start = chunk
            .char_indices()
            .find(|(_, c)| !is_punct(*c))
            .map(|(i, _)| i);
        match core_start {
            None => {
                for (i, c) in chunk.char_indices() {
                    out.push((s + i, s + i + c.len_utf8()));
                }
            }
            Some(cs) => {
                let ce = chunk
                    .char_indices()
                    .rev()
                    .find(|(_, c)| !is_punct(*c))
                    .map(|(i, c)| i + c.len_utf8())
                    .unwrap_or(chunk.len());
                for (i, c) in chunk[..cs].char_indices() {
                    out.push((s + i, s + i + c.len_utf8()));
                }
                out.push((s + cs, s + ce));
                for (i, c) in chunk[ce..].char_indices() {
                    out.push((s + ce + i, s + ce + i + c.len_utf8()));
                }
            }
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = chunk_start.take() {
                push_chunk(s, i, &mut out);
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(i);
        }
    }
    if let Some(s) = chunk_start {
        push_chunk(s, text.len(), &mut out);
    }
    out
}

/// True for characters peeled off word edges.
pub fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// True when every character of the token is punctuation.
pub fn is_punct_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punct)
}

/// Replace sentence `index` of the article body with [`MASK_MARKER`].
pub fn mask_sentence(article: &NewsArticle, index: usize) -> Result<MaskedVariant, TextError> {
    mask_text(&article.text, index)
}

pub fn mask_text(text: &str, index: usize) -> Result<MaskedVariant, TextError> {
    let ranges = sentence_ranges(text);
    mask_ranges(text, &ranges, index)
}

pub(crate) fn mask_ranges(
    text: &str,
    ranges: &[(usize, usize)],
    index: usize,
) -> Result<MaskedVariant, TextError> {
    let &(s, e) = ranges.get(index).ok_or(TextError::IndexOutOfRange {
        index,
        count: ranges.len(),
    })?;
    let mut masked = String::with_capacity(text.len() - (e - s) + MASK_MARKER.len());
    masked.push_str(&text[..s]);
    masked.push_str(MASK_MARKER);
    masked.push_str(&text[e..]);
    let shift = MASK_MARKER.len() as isize - (e - s) as isize;
    let spans = ranges
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| match i.cmp(&index) {
            std::cmp::Ordering::Less => (a, b),
            std::cmp::Ordering::Equal => (s, s + MASK_MARKER.len()),
            std::cmp::Ordering::Greater => {
                ((a as isize + shift) as usize, (b as isize + shift) as usize)
            }
        })
        .collect();
    Ok(MaskedVariant {
        masked_index: index,
        text: masked,
        spans,
    })
}
