//! Rule-based filtering and normalization of annotated system messages.
//!
//! [`apply_phase2`] turns a raw parse outcome into a normalized message:
//! residues are dropped, survivors are stably sorted into canonical tag
//! order, and a per-tag cap bounds repetition. [`apply_phase3_removal`]
//! applies verification verdicts, removing every phrase not labeled Good.
//! Both return a [`FilterReport`] that accounts for every input span.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{ParseOutcome, Residue, ResidueReason};
use crate::model::{AnnotatedSystemMessage, FunctionalityTag, TaggedPhrase, Verdict, VerificationLabel};

/// Rejection reason recorded when filtering leaves nothing.
pub const REJECT_EMPTY_AFTER_FILTERING: &str = "empty_after_filtering";
/// Rejection reason recorded when verification removal leaves nothing.
pub const REJECT_EMPTY_AFTER_VERIFICATION: &str = "empty_after_verification";

/// Why a span or phrase was dropped.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    MismatchedTag,
    UnknownTag,
    UntaggedText,
    EmptyPhrase,
    /// Phrase beyond the per-tag cap.
    OverCap,
    /// Removed because verification labeled it Bad.
    LabeledBad,
    /// Removed because verification labeled it None (not reflected in the
    /// response).
    LabeledNone,
}

impl From<ResidueReason> for DropReason {
    fn from(reason: ResidueReason) -> Self {
        match reason {
            ResidueReason::MismatchedTag => DropReason::MismatchedTag,
            ResidueReason::UnknownTag => DropReason::UnknownTag,
            ResidueReason::UntaggedText => DropReason::UntaggedText,
            ResidueReason::EmptyPhrase => DropReason::EmptyPhrase,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FilterConfigError {
    #[error("canonical_order must list each of the eight tags exactly once")]
    NotAPermutation,
    #[error("max_per_tag must be at least 1")]
    ZeroCap,
}

/// Normalization settings: the canonical tag order and the per-tag cap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(default = "default_canonical_order")]
    pub canonical_order: Vec<FunctionalityTag>,
    #[serde(default = "default_max_per_tag")]
    pub max_per_tag: usize,
}

fn default_canonical_order() -> Vec<FunctionalityTag> {
    FunctionalityTag::ALL.to_vec()
}

fn default_max_per_tag() -> usize {
    3
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            canonical_order: default_canonical_order(),
            max_per_tag: default_max_per_tag(),
        }
    }
}

impl FilterConfig {
    pub fn new(
        canonical_order: Vec<FunctionalityTag>,
        max_per_tag: usize,
    ) -> Result<Self, FilterConfigError> {
        let config = Self {
            canonical_order,
            max_per_tag,
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks that the order is a total order over all eight tags and the
    /// cap is usable.
    pub fn validate(&self) -> Result<(), FilterConfigError> {
        if self.max_per_tag == 0 {
            return Err(FilterConfigError::ZeroCap);
        }
        let mut seen = [false; 8];
        if self.canonical_order.len() != 8 {
            return Err(FilterConfigError::NotAPermutation);
        }
        for tag in &self.canonical_order {
            let slot = FunctionalityTag::ALL
                .iter()
                .position(|t| t == tag)
                .expect("tag is one of the eight");
            if seen[slot] {
                return Err(FilterConfigError::NotAPermutation);
            }
            seen[slot] = true;
        }
        Ok(())
    }

    fn rank(&self) -> BTreeMap<FunctionalityTag, usize> {
        self.canonical_order
            .iter()
            .enumerate()
            .map(|(i, t)| (*t, i))
            .collect()
    }
}

/// Accounting for one filtering step. Every span of the input ends up either
/// in `kept` or in `dropped`; the two always sum to the input span count.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Surviving phrase count per tag.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub kept: BTreeMap<FunctionalityTag, usize>,
    /// Dropped span count per reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dropped: BTreeMap<DropReason, usize>,
    /// Phrases removed by verification, per tag per label. Populated by
    /// [`apply_phase3_removal`] only.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub removed_labels: BTreeMap<FunctionalityTag, BTreeMap<VerificationLabel, usize>>,
    /// True when normalization changed the phrase order.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reordered: bool,
    /// Set when nothing survived; the whole record is rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_rejected: Option<String>,
}

impl FilterReport {
    pub fn kept_total(&self) -> usize {
        self.kept.values().sum()
    }

    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }

    fn note_kept(&mut self, tag: FunctionalityTag) {
        *self.kept.entry(tag).or_insert(0) += 1;
    }

    fn note_dropped(&mut self, reason: DropReason) {
        *self.dropped.entry(reason).or_insert(0) += 1;
    }
}

/// Applies the filtering rules to a parse outcome and normalizes the result:
/// residues (mismatched, unknown, untagged, empty) are dropped; survivors
/// are stably sorted into canonical order; at most `max_per_tag` phrases per
/// tag are kept (earliest first). Zero survivors reject the record.
pub fn apply_phase2(
    outcome: &ParseOutcome,
    config: &FilterConfig,
) -> (AnnotatedSystemMessage, FilterReport) {
    let mut report = FilterReport::default();
    for Residue { reason, .. } in &outcome.residues {
        report.note_dropped(DropReason::from(*reason));
    }

    let rank = config.rank();
    let mut phrases = outcome.message.phrases.clone();
    let before: Vec<FunctionalityTag> = phrases.iter().map(|p| p.tag).collect();
    phrases.sort_by_key(|p| rank[&p.tag]);
    let after: Vec<FunctionalityTag> = phrases.iter().map(|p| p.tag).collect();
    report.reordered = before != after;

    let capped = enforce_cap(phrases, config.max_per_tag, &mut report);
    for phrase in &capped {
        report.note_kept(phrase.tag);
    }
    if capped.is_empty() {
        report.record_rejected = Some(REJECT_EMPTY_AFTER_FILTERING.to_string());
    }
    (AnnotatedSystemMessage::new(capped), report)
}

/// Keeps at most `cap` phrases per tag, earliest first, recording the rest
/// as over-cap drops.
fn enforce_cap(
    phrases: Vec<TaggedPhrase>,
    cap: usize,
    report: &mut FilterReport,
) -> Vec<TaggedPhrase> {
    let mut counts: BTreeMap<FunctionalityTag, usize> = BTreeMap::new();
    let mut kept = Vec::with_capacity(phrases.len());
    for phrase in phrases {
        let count = counts.entry(phrase.tag).or_insert(0);
        if *count < cap {
            *count += 1;
            kept.push(phrase);
        } else {
            report.note_dropped(DropReason::OverCap);
        }
    }
    kept
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerdictCoverageError {
    #[error("no verdict for phrase {index} ({tag}: {phrase:?})")]
    MissingVerdict {
        index: usize,
        tag: FunctionalityTag,
        phrase: String,
    },
    #[error("{count} verdict(s) do not correspond to any phrase of the message")]
    ExtraVerdicts { count: usize },
}

/// Applies verification verdicts: phrases labeled Good survive in their
/// existing order; Bad and None phrases are removed and accounted per tag
/// per label. The per-tag cap is re-enforced on the survivors. Verdicts must
/// cover the message's phrases exactly one-to-one (matched by tag and
/// phrase text, in message order).
pub fn apply_phase3_removal(
    message: &AnnotatedSystemMessage,
    verdicts: &[Verdict],
    config: &FilterConfig,
) -> Result<(AnnotatedSystemMessage, FilterReport), VerdictCoverageError> {
    let mut used = vec![false; verdicts.len()];
    let mut labeled: Vec<(&TaggedPhrase, VerificationLabel)> =
        Vec::with_capacity(message.phrases.len());
    for (index, phrase) in message.phrases.iter().enumerate() {
        let found = verdicts.iter().enumerate().find(|(vi, v)| {
            !used[*vi] && v.tag == phrase.tag && v.phrase == phrase.phrase
        });
        match found {
            Some((vi, verdict)) => {
                used[vi] = true;
                labeled.push((phrase, verdict.label));
            }
            None => {
                return Err(VerdictCoverageError::MissingVerdict {
                    index,
                    tag: phrase.tag,
                    phrase: phrase.phrase.clone(),
                })
            }
        }
    }
    let unused = used.iter().filter(|u| !**u).count();
    if unused > 0 {
        return Err(VerdictCoverageError::ExtraVerdicts { count: unused });
    }

    let mut report = FilterReport::default();
    let mut survivors = Vec::new();
    for (phrase, label) in labeled {
        match label {
            VerificationLabel::Good => survivors.push(phrase.clone()),
            VerificationLabel::Bad | VerificationLabel::None => {
                let reason = if label == VerificationLabel::Bad {
                    DropReason::LabeledBad
                } else {
                    DropReason::LabeledNone
                };
                report.note_dropped(reason);
                *report
                    .removed_labels
                    .entry(phrase.tag)
                    .or_default()
                    .entry(label)
                    .or_insert(0) += 1;
            }
        }
    }

    let capped = enforce_cap(survivors, config.max_per_tag, &mut report);
    for phrase in &capped {
        report.note_kept(phrase.tag);
    }
    if capped.is_empty() {
        report.record_rejected = Some(REJECT_EMPTY_AFTER_VERIFICATION.to_string());
    }
    Ok((AnnotatedSystemMessage::new(capped), report))
}
