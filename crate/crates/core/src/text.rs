//! Lightweight text segmentation shared by the parser and the metrics.
//!
//! Sentence splitting is a terminal-punctuation heuristic: a sentence ends at
//! `.`, `!` or `?` followed by whitespace or end of text. It can be replaced
//! by a real tokenizer without touching callers.

use crate::model::Span;

fn is_terminal(b: u8) -> bool {
    matches!(b, b'.' | b'!' | b'?')
}

/// Byte spans of the sentences of `text`, trimmed of surrounding whitespace.
///
/// No boundary is placed strictly inside a `protected` span, so a mention
/// such as `[Dr. Smith]` never straddles two sentences.
pub fn sentence_spans(text: &str, protected: &[Span]) -> Vec<Span> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0usize;
    for i in 0..bytes.len() {
        if !is_terminal(bytes[i]) {
            continue;
        }
        let end = i + 1;
        let at_break = end == bytes.len() || bytes[end].is_ascii_whitespace();
        if !at_break || protected.iter().any(|p| p.start < end && end < p.end) {
            continue;
        }
        push_trimmed(text, start, end, &mut spans);
        start = end;
    }
    push_trimmed(text, start, bytes.len(), &mut spans);
    spans
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<Span>) {
    let piece = &text[start..end];
    let lead = piece.len() - piece.trim_start().len();
    let trail = piece.len() - piece.trim_end().len();
    if lead + trail < piece.len() {
        out.push(Span::new(start + lead, end - trail));
    }
}

pub fn sentences(text: &str) -> Vec<&str> {
    sentence_spans(text, &[])
        .into_iter()
        .map(|s| &text[s.start..s.end])
        .collect()
}

/// Index of the sentence that contains byte `offset` (the last sentence
/// starting at or before it).
pub fn sentence_of(spans: &[Span], offset: usize) -> usize {
    spans
        .iter()
        .rposition(|s| s.start <= offset)
        .unwrap_or(0)
}

/// Whitespace-separated words with leading/trailing punctuation removed.
/// Tokens without any alphanumeric character are dropped.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect()
}

/// Lowercased tokens with every non-alphanumeric character removed.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Vowel-group syllable estimate.
///
/// Counts maximal runs of `a e i o u y`, drops a trailing silent `e` unless
/// the word ends in `le`, and never returns less than one.
pub fn syllables(word: &str) -> usize {
    let w: Vec<char> = word
        .chars()
        .filter(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    if w.is_empty() {
        return 1;
    }
    let is_vowel = |c: char| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
    let mut groups = 0usize;
    let mut prev = false;
    for &c in &w {
        let v = is_vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    let n = w.len();
    if w[n - 1] == 'e' && !(n >= 2 && w[n - 2] == 'l') {
        groups = groups.saturating_sub(1);
    }
    groups.max(1)
}

/// Whitespace-insensitive comparison. Returns the byte offset in `a` where
/// the two strings first diverge once whitespace runs are collapsed and
/// both ends trimmed, or `None` if they agree.
pub fn first_divergence(a: &str, b: &str) -> Option<usize> {
    let ta: Vec<(usize, char)> = collapse(a);
    let tb: Vec<(usize, char)> = collapse(b);
    for (i, (x, y)) in ta.iter().zip(&tb).enumerate() {
        if x.1 != y.1 {
            return Some(ta[i].0);
        }
    }
    match ta.len().cmp(&tb.len()) {
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Less => Some(a.len()),
        std::cmp::Ordering::Greater => Some(ta[tb.len()].0),
    }
}

fn collapse(s: &str) -> Vec<(usize, char)> {
    let mut out = Vec::new();
    let mut pending_space: Option<usize> = None;
    for (i, c) in s.char_indices() {
        if c.is_whitespace() {
            if !out.is_empty() && pending_space.is_none() {
                pending_space = Some(i);
            }
        } else {
            if let Some(p) = pending_space.take() {
                out.push((p, ' '));
            }
            out.push((i, c));
        }
    }
    out
}
