//! Parser and serializer for the tag grammar used in annotated system
//! messages: `<<Tag>>phrase<</Tag>>` spans with one of the eight canonical
//! tag names, no nesting.
//!
//! Parsing never fails. Anything that is not a well-formed span of a known
//! tag is reported as a [`Residue`], and each residue carries the exact raw
//! slice of input it covers. The input is thereby partitioned into kept
//! phrase spans, residue slices, and silently dropped whitespace separators.

use serde::{Deserialize, Serialize};

use crate::model::{AnnotatedSystemMessage, FunctionalityTag, TaggedPhrase};

/// Why a piece of input was not kept as a tagged phrase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidueReason {
    /// An opener without its closer, a closer without its opener, a closer
    /// with the wrong name, or a new opener before the previous span closed.
    MismatchedTag,
    /// A well-formed span whose name is not one of the eight canonical tags
    /// (including a case mismatch).
    UnknownTag,
    /// Non-whitespace text between spans.
    UntaggedText,
    /// A well-formed span of a known tag whose interior trims to nothing.
    EmptyPhrase,
}

impl ResidueReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResidueReason::MismatchedTag => "mismatched_tag",
            ResidueReason::UnknownTag => "unknown_tag",
            ResidueReason::UntaggedText => "untagged_text",
            ResidueReason::EmptyPhrase => "empty_phrase",
        }
    }
}

/// A discarded piece of input: the raw slice plus the reason it was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residue {
    pub reason: ResidueReason,
    pub text: String,
}

impl Residue {
    fn new(reason: ResidueReason, text: &str) -> Self {
        Self {
            reason,
            text: text.to_string(),
        }
    }
}

/// Result of parsing one candidate system message.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub message: AnnotatedSystemMessage,
    pub residues: Vec<Residue>,
}

impl ParseOutcome {
    /// True when the whole input was consumed as well-formed tagged phrases.
    pub fn is_clean(&self) -> bool {
        self.residues.is_empty()
    }
}

/// A `<<Name>>` or `<</Name>>` marker matched at the start of a slice.
struct Marker<'a> {
    closing: bool,
    name: &'a str,
    len: usize,
}

/// Matches a marker at the start of `s`. A marker is `<<`, an optional `/`,
/// a name free of angle brackets (possibly empty), then `>>`. Anything else
/// is literal text, which is how stray `<` characters stay representable.
fn match_marker(s: &str) -> Option<Marker<'_>> {
    let rest = s.strip_prefix("<<")?;
    let (closing, body) = match rest.strip_prefix('/') {
        Some(b) => (true, b),
        None => (false, rest),
    };
    let end = body.find(['<', '>'])?;
    if !body[end..].starts_with(">>") {
        return None;
    }
    Some(Marker {
        closing,
        name: &body[..end],
        len: 2 + usize::from(closing) + end + 2,
    })
}

/// An opener we have seen and not yet resolved.
struct OpenSpan<'a> {
    name: &'a str,
    /// Byte offset of the opener's `<<`.
    span_start: usize,
    /// Byte offset just past the opener.
    interior_start: usize,
}

/// Parses tagged text into phrases and residues. Total: every input yields
/// an outcome, and residues appear in source order.
pub fn parse(text: &str) -> ParseOutcome {
    let mut phrases: Vec<TaggedPhrase> = Vec::new();
    let mut residues: Vec<Residue> = Vec::new();
    let mut open: Option<OpenSpan<'_>> = None;
    // Start of the current top-level literal run, if any.
    let mut literal_start: Option<usize> = None;
    let mut i = 0;

    let flush_literal = |from: &mut Option<usize>, to: usize, residues: &mut Vec<Residue>| {
        if let Some(start) = from.take() {
            let run = &text[start..to];
            if !run.trim().is_empty() {
                residues.push(Residue::new(ResidueReason::UntaggedText, run));
            }
        }
    };

    while i < text.len() {
        let rest = &text[i..];
        let marker = if rest.starts_with("<<") {
            match_marker(rest)
        } else {
            None
        };
        let Some(marker) = marker else {
            // Literal character. Interiors are recovered from offsets, so we
            // only track runs at the top level.
            if open.is_none() && literal_start.is_none() {
                literal_start = Some(i);
            }
            i += rest.chars().next().expect("non-empty rest").len_utf8();
            continue;
        };

        if !marker.closing {
            match open.take() {
                None => flush_literal(&mut literal_start, i, &mut residues),
                Some(outer) => {
                    // A second opener before the first span closed: the outer
                    // opener and everything it accumulated are discarded.
                    residues.push(Residue::new(
                        ResidueReason::MismatchedTag,
                        &text[outer.span_start..i],
                    ));
                }
            }
            open = Some(OpenSpan {
                name: marker.name,
                span_start: i,
                interior_start: i + marker.len,
            });
        } else {
            match open.take() {
                None => {
                    // Closer with nothing open.
                    flush_literal(&mut literal_start, i, &mut residues);
                    residues.push(Residue::new(
                        ResidueReason::MismatchedTag,
                        &text[i..i + marker.len],
                    ));
                }
                Some(span) if span.name != marker.name => {
                    residues.push(Residue::new(
                        ResidueReason::MismatchedTag,
                        &text[span.span_start..i + marker.len],
                    ));
                }
                Some(span) => {
                    let whole = &text[span.span_start..i + marker.len];
                    match FunctionalityTag::from_name(span.name) {
                        None => {
                            residues.push(Residue::new(ResidueReason::UnknownTag, whole));
                        }
                        Some(tag) => {
                            let interior = text[span.interior_start..i].trim();
                            if interior.is_empty() {
                                residues
                                    .push(Residue::new(ResidueReason::EmptyPhrase, whole));
                            } else {
                                // Built directly rather than through
                                // `TaggedPhrase::new`: a parsed interior can
                                // hold delimiter-like substrings (e.g.
                                // `a<<b`) that provably re-parse unchanged
                                // but that the conservative constructor
                                // refuses.
                                phrases.push(TaggedPhrase {
                                    tag,
                                    phrase: interior.to_string(),
                                });
                            }
                        }
                    }
                }
            }
        }
        i += marker.len;
    }

    match open {
        Some(span) => {
            // Opener never closed; everything from it to the end is dropped.
            residues.push(Residue::new(
                ResidueReason::MismatchedTag,
                &text[span.span_start..],
            ));
        }
        None => flush_literal(&mut literal_start, text.len(), &mut residues),
    }

    ParseOutcome {
        message: AnnotatedSystemMessage::new(phrases),
        residues,
    }
}

/// Renders a message back to tagged text: spans joined by single spaces.
pub fn serialize(message: &AnnotatedSystemMessage) -> String {
    message
        .phrases
        .iter()
        .map(|p| {
            format!(
                "<<{tag}>>{phrase}<</{tag}>>",
                tag = p.tag.name(),
                phrase = p.phrase
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders a message as plain text: phrases joined by single spaces, no tag
/// markers. This is the form a model actually receives as a system message.
pub fn render_plain(message: &AnnotatedSystemMessage) -> String {
    message
        .phrases
        .iter()
        .map(|p| p.phrase.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Strips tag markers from raw tagged text, keeping only the phrases of
/// well-formed known spans.
pub fn strip_tags(text: &str) -> String {
    render_plain(&parse(text).message)
}
