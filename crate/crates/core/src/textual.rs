//! Markdown grounding format for character mentions.
//!
//! A mention is written `[surface](#id)`; plural mentions list every
//! cluster they refer to, `[We](#1, #2)`. Parsing strips the tags and
//! records byte spans against the plain text; rendering is its inverse.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::model::{AnnotatedStory, Span, TextualMention};
use crate::text;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnbalancedBracket,
    NestedBracket,
    UntaggedMention,
    UnclosedTagGroup,
    EmptyTagList,
    MalformedTag,
    EmptyMention,
    DuplicateCluster,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UnbalancedBracket => "unbalanced bracket",
            Self::NestedBracket => "nested bracket",
            Self::UntaggedMention => "untagged mention",
            Self::UnclosedTagGroup => "unclosed tag group",
            Self::EmptyTagList => "empty tag list",
            Self::MalformedTag => "malformed tag",
            Self::EmptyMention => "empty mention",
            Self::DuplicateCluster => "duplicate cluster id",
        })
    }
}

/// Parse failure at a byte offset of the annotated input.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("mentions {0} and {1} overlap")]
    Overlap(String, String),
    #[error("mention {0} does not match the story text")]
    SpanMismatch(String),
    #[error("mention {0} has no cluster")]
    NoCluster(String),
    #[error("cluster id {0:?} cannot be written as a tag")]
    BadClusterId(String),
    #[error("story text contains a bracket at byte {0}")]
    BracketInText(usize),
}

fn parse_err(offset: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { offset, kind }
}

fn is_id_char(c: char) -> bool {
    !(c.is_whitespace() || matches!(c, ',' | '(' | ')' | '[' | ']' | '#'))
}

pub fn is_valid_cluster_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(is_id_char)
}

/// Parses `#a, #b` (already cut out of the parentheses). `base` is the byte
/// offset of `inner` in the input.
fn parse_tags(inner: &str, base: usize) -> Result<Vec<String>, ParseError> {
    if inner.trim().is_empty() {
        return Err(parse_err(base, ParseErrorKind::EmptyTagList));
    }
    let mut ids: Vec<String> = Vec::new();
    let mut offset = base;
    for piece in inner.split(',') {
        let lead = piece.len() - piece.trim_start().len();
        let tag = piece.trim();
        let at = offset + lead;
        let id = tag
            .strip_prefix('#')
            .filter(|id| is_valid_cluster_id(id))
            .ok_or_else(|| parse_err(at, ParseErrorKind::MalformedTag))?;
        if ids.iter().any(|x| x == id) {
            return Err(parse_err(at, ParseErrorKind::DuplicateCluster));
        }
        ids.push(id.to_string());
        offset += piece.len() + 1;
    }
    Ok(ids)
}

struct RawMention {
    span: Span,
    clusters: Vec<String>,
}

fn scan(input: &str) -> Result<(String, Vec<RawMention>), ParseError> {
    let bytes = input.as_bytes();
    let mut plain = String::with_capacity(input.len());
    let mut mentions = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let next = bytes[i..]
            .iter()
            .position(|&b| b == b'[' || b == b']')
            .map(|p| p + i);
        let Some(open) = next else {
            plain.push_str(&input[i..]);
            break;
        };
        plain.push_str(&input[i..open]);
        if bytes[open] == b']' {
            return Err(parse_err(open, ParseErrorKind::UnbalancedBracket));
        }
        let close = bytes[open + 1..]
            .iter()
            .position(|&b| b == b'[' || b == b']')
            .map(|p| p + open + 1)
            .ok_or_else(|| parse_err(open, ParseErrorKind::UnbalancedBracket))?;
        if bytes[close] == b'[' {
            return Err(parse_err(close, ParseErrorKind::NestedBracket));
        }
        let surface = &input[open + 1..close];
        if surface.is_empty() {
            return Err(parse_err(open, ParseErrorKind::EmptyMention));
        }
        let group = close + 1;
        if bytes.get(group) != Some(&b'(') {
            return Err(parse_err(open, ParseErrorKind::UntaggedMention));
        }
        let end = bytes[group + 1..]
            .iter()
            .position(|&b| b == b')')
            .map(|p| p + group + 1)
            .ok_or_else(|| parse_err(group, ParseErrorKind::UnclosedTagGroup))?;
        let clusters = parse_tags(&input[group + 1..end], group + 1)?;
        let start = plain.len();
        plain.push_str(surface);
        mentions.push(RawMention {
            span: Span::new(start, plain.len()),
            clusters,
        });
        i = end + 1;
    }
    Ok((plain, mentions))
}

/// Parses a tagged story. Mention ids are `m0, m1, ...` in reading order.
pub fn parse_annotated(input: &str) -> Result<AnnotatedStory, ParseError> {
    let (plain, raw) = scan(input)?;
    let protected: Vec<Span> = raw.iter().map(|m| m.span).collect();
    let sentence_spans = text::sentence_spans(&plain, &protected);
    let mentions: Vec<TextualMention> = raw
        .into_iter()
        .enumerate()
        .map(|(i, m)| TextualMention {
            mention_id: format!("m{i}"),
            sentence_index: text::sentence_of(&sentence_spans, m.span.start),
            surface: plain[m.span.start..m.span.end].to_string(),
            span: m.span,
            cluster_ids: m.clusters,
        })
        .collect();
    let chains = AnnotatedStory::chain_index(&mentions);
    Ok(AnnotatedStory {
        story_id: String::new(),
        sentences: sentence_spans
            .iter()
            .map(|s| plain[s.start..s.end].to_string())
            .collect(),
        text: plain,
        mentions,
        chains,
    })
}

/// Writes the story back in tagged form. Clusters are joined with `", "`.
pub fn render_annotated(story: &AnnotatedStory) -> Result<String, RenderError> {
    if let Some(p) = story.text.bytes().position(|b| b == b'[' || b == b']') {
        return Err(RenderError::BracketInText(p));
    }
    let mut ordered: Vec<&TextualMention> = story.mentions.iter().collect();
    ordered.sort_by_key(|m| m.span);
    for w in ordered.windows(2) {
        if w[0].span.overlaps(&w[1].span) {
            return Err(RenderError::Overlap(
                w[0].mention_id.clone(),
                w[1].mention_id.clone(),
            ));
        }
    }
    let mut out = String::with_capacity(story.text.len() + 8 * ordered.len());
    let mut cursor = 0usize;
    for m in ordered {
        match story.text.get(m.span.start..m.span.end) {
            Some(s) if s == m.surface && !m.span.is_empty() => {}
            _ => return Err(RenderError::SpanMismatch(m.mention_id.clone())),
        }
        if m.cluster_ids.is_empty() {
            return Err(RenderError::NoCluster(m.mention_id.clone()));
        }
        if let Some(bad) = m.cluster_ids.iter().find(|c| !is_valid_cluster_id(c)) {
            return Err(RenderError::BadClusterId(bad.clone()));
        }
        out.push_str(&story.text[cursor..m.span.start]);
        out.push('[');
        out.push_str(&m.surface);
        out.push_str("](");
        out.push_str(&tag_group(&m.cluster_ids));
        out.push(')');
        cursor = m.span.end;
    }
    out.push_str(&story.text[cursor..]);
    Ok(out)
}

fn tag_group(ids: &[String]) -> String {
    ids.iter()
        .map(|c| format!("#{c}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Plain story text with every tag removed.
pub fn strip_annotations(input: &str) -> Result<String, ParseError> {
    scan(input).map(|(plain, _)| plain)
}

/// Cluster id -> mention ids, ordered by `(sentence_index, span)`.
pub fn textual_chains(story: &AnnotatedStory) -> BTreeMap<String, Vec<String>> {
    AnnotatedStory::chain_index(&story.mentions)
}

/// Removes bare `[...]` brackets (the pre-annotation markup fed to the
/// coreference prompt) without interpreting them.
pub fn strip_brackets(input: &str) -> String {
    input.chars().filter(|&c| c != '[' && c != ']').collect()
}
