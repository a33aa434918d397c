//! Shared domain vocabulary for the pipeline: conversations, the eight
//! functionality tags, annotated system messages, verification labels, and
//! per-phase provenance.
//!
//! Every type here is an immutable value. Workers never mutate records in
//! place; each phase constructs a new [`PipelineRecord`] from the previous one.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Who is speaking in a conversation turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    System,
    User,
    Assistant,
}

impl fmt::Display for SpeakerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpeakerRole::System => write!(f, "system"),
            SpeakerRole::User => write!(f, "user"),
            SpeakerRole::Assistant => write!(f, "assistant"),
        }
    }
}

/// One conversation turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub role: SpeakerRole,
    pub content: String,
}

impl Message {
    pub fn new(role: SpeakerRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(SpeakerRole::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(SpeakerRole::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(SpeakerRole::Assistant, content)
    }
}

/// One source conversation: the pipeline's unit of work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub id: String,
    pub source: String,
    pub messages: Vec<Message>,
}

impl SftRecord {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        messages: Vec<Message>,
    ) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            messages,
        }
    }

    /// The first user message and the first assistant message that follows it.
    ///
    /// Multi-turn sources are truncated to this first exchange; callers that
    /// do so should flag `truncated_multi_turn` in provenance.
    pub fn first_exchange(&self) -> Option<(&Message, &Message)> {
        let user_idx = self
            .messages
            .iter()
            .position(|m| m.role == SpeakerRole::User)?;
        let assistant = self.messages[user_idx + 1..]
            .iter()
            .find(|m| m.role == SpeakerRole::Assistant)?;
        Some((&self.messages[user_idx], assistant))
    }

    /// True when the record holds more turns than the single (user, assistant)
    /// exchange the pipeline consumes.
    pub fn has_extra_turns(&self) -> bool {
        let non_system = self
            .messages
            .iter()
            .filter(|m| m.role != SpeakerRole::System)
            .count();
        non_system > 2
    }
}

/// A violation found by [`validate_record`]. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyContent { message_index: usize },
    MissingUserMessage,
    MissingAssistantResponse,
    EmptyId,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyContent { message_index } => {
                write!(f, "empty content in message {message_index}")
            }
            Violation::MissingUserMessage => write!(f, "missing user message"),
            Violation::MissingAssistantResponse => {
                write!(f, "missing assistant response after user message")
            }
            Violation::EmptyId => write!(f, "empty record id"),
        }
    }
}

/// Checks every record invariant and returns all violations found.
/// Duplicate-id detection is per-file and lives in dataset reading.
pub fn validate_record(record: &SftRecord) -> Vec<Violation> {
    let mut violations = Vec::new();
    if record.id.trim().is_empty() {
        violations.push(Violation::EmptyId);
    }
    for (i, message) in record.messages.iter().enumerate() {
        if message.content.trim().is_empty() {
            violations.push(Violation::EmptyContent { message_index: i });
        }
    }
    if record.first_exchange().is_none() {
        let has_user = record
            .messages
            .iter()
            .any(|m| m.role == SpeakerRole::User);
        if has_user {
            violations.push(Violation::MissingAssistantResponse);
        } else {
            violations.push(Violation::MissingUserMessage);
        }
    }
    violations
}

/// The eight phrase-level functionality tags a system message is built from.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum FunctionalityTag {
    Role,
    Content,
    Task,
    Action,
    Style,
    Background,
    Tool,
    Format,
}

impl FunctionalityTag {
    /// All eight tags in canonical order.
    pub const ALL: [FunctionalityTag; 8] = [
        FunctionalityTag::Role,
        FunctionalityTag::Content,
        FunctionalityTag::Task,
        FunctionalityTag::Action,
        FunctionalityTag::Style,
        FunctionalityTag::Background,
        FunctionalityTag::Tool,
        FunctionalityTag::Format,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FunctionalityTag::Role => "Role",
            FunctionalityTag::Content => "Content",
            FunctionalityTag::Task => "Task",
            FunctionalityTag::Action => "Action",
            FunctionalityTag::Style => "Style",
            FunctionalityTag::Background => "Background",
            FunctionalityTag::Tool => "Tool",
            FunctionalityTag::Format => "Format",
        }
    }

    /// Exact-case lookup of a canonical tag name. Any other spelling is
    /// rejected at the grammar level.
    pub fn from_name(name: &str) -> Option<FunctionalityTag> {
        Self::ALL.iter().copied().find(|t| t.name() == name)
    }

    /// Case-insensitive lookup, used when matching lenient judge replies.
    pub fn from_name_ci(name: &str) -> Option<FunctionalityTag> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for FunctionalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PhraseError {
    #[error("phrase is empty after trimming")]
    Empty,
    #[error("phrase contains a tag delimiter substring")]
    ContainsDelimiter,
}

/// A phrase of a system message together with its functionality tag.
///
/// The phrase is stored trimmed. [`TaggedPhrase::new`] conservatively rejects
/// any phrase containing a `<<` or `>>` substring so that serialized form can
/// never be misread as tag markers; the parser itself may produce phrases
/// with delimiter-like substrings that provably re-parse unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedPhrase {
    pub tag: FunctionalityTag,
    pub phrase: String,
}

impl TaggedPhrase {
    pub fn new(tag: FunctionalityTag, phrase: &str) -> Result<Self, PhraseError> {
        let phrase = phrase.trim();
        if phrase.is_empty() {
            return Err(PhraseError::Empty);
        }
        if phrase.contains("<<") || phrase.contains(">>") {
            return Err(PhraseError::ContainsDelimiter);
        }
        Ok(Self {
            tag,
            phrase: phrase.to_string(),
        })
    }
}

/// An ordered list of tagged phrases: the annotated form of a system message.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotatedSystemMessage {
    pub phrases: Vec<TaggedPhrase>,
}

impl AnnotatedSystemMessage {
    pub fn new(phrases: Vec<TaggedPhrase>) -> Self {
        Self { phrases }
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }
}

/// Outcome of judging one tagged phrase.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum VerificationLabel {
    Good,
    Bad,
    None,
}

impl VerificationLabel {
    pub fn from_str_ci(s: &str) -> Option<VerificationLabel> {
        match s.to_ascii_lowercase().as_str() {
            "good" => Some(VerificationLabel::Good),
            "bad" => Some(VerificationLabel::Bad),
            "none" => Some(VerificationLabel::None),
            _ => None,
        }
    }
}

impl fmt::Display for VerificationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerificationLabel::Good => write!(f, "Good"),
            VerificationLabel::Bad => write!(f, "Bad"),
            VerificationLabel::None => write!(f, "None"),
        }
    }
}

/// A phrase paired with the label the judge assigned to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub tag: FunctionalityTag,
    pub phrase: String,
    pub label: VerificationLabel,
}

/// The four pipeline phases.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Phase {
    #[serde(rename = "phase1")]
    Phase1,
    #[serde(rename = "phase2")]
    Phase2,
    #[serde(rename = "phase3")]
    Phase3,
    #[serde(rename = "phase4")]
    Phase4,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Phase1, Phase::Phase2, Phase::Phase3, Phase::Phase4];

    pub fn name(&self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::Phase3 => "phase3",
            Phase::Phase4 => "phase4",
        }
    }

    pub fn prev(&self) -> Option<Phase> {
        match self {
            Phase::Phase1 => None,
            Phase::Phase2 => Some(Phase::Phase1),
            Phase::Phase3 => Some(Phase::Phase2),
            Phase::Phase4 => Some(Phase::Phase3),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which kind of model call a set of decoding parameters belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallPhase {
    Phase1,
    Phase3,
    Phase4,
    Judge,
}

impl fmt::Display for CallPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CallPhase::Phase1 => write!(f, "phase1"),
            CallPhase::Phase3 => write!(f, "phase3"),
            CallPhase::Phase4 => write!(f, "phase4"),
            CallPhase::Judge => write!(f, "judge"),
        }
    }
}

/// Decoding parameters bound to a pipeline phase.
///
/// Defaults per phase: generation 0.7/512, self-feedback 0.7/256,
/// regeneration 0.7/1024. Judge calls reuse the self-feedback values unless
/// overridden.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub phase: CallPhase,
}

impl GenerationParams {
    pub fn for_phase(phase: CallPhase) -> Self {
        let (temperature, max_tokens) = match phase {
            CallPhase::Phase1 => (0.7, 512),
            CallPhase::Phase3 => (0.7, 256),
            CallPhase::Phase4 => (0.7, 1024),
            CallPhase::Judge => (0.7, 256),
        };
        Self {
            temperature,
            max_tokens,
            phase,
        }
    }
}

/// Progress of one record through one phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseStatus {
    Pending,
    Done,
    Rejected { rejected: String },
}

impl PhaseStatus {
    pub fn rejected(reason: impl Into<String>) -> Self {
        PhaseStatus::Rejected {
            rejected: reason.into(),
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self, PhaseStatus::Done)
    }

    pub fn is_rejected(&self) -> bool {
        matches!(self, PhaseStatus::Rejected { .. })
    }
}

/// Model call metadata recorded per phase for reproducible accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMeta {
    pub model: String,
    pub backend: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// Per-record provenance accumulated across phases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated_multi_turn: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub calls: BTreeMap<Phase, PhaseMeta>,
    /// The source assistant response, kept once phase 4 replaces the message
    /// list with the generated triplet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_response: Option<String>,
}

/// Per-record scores comparing the regenerated response against the original.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    /// Clipped n-gram precision per order n (only orders the candidate is
    /// long enough for are present).
    pub ngram_precision: BTreeMap<u8, f64>,
    pub lcs_f1: f64,
    pub length_ratio: f64,
}

/// An [`SftRecord`] plus everything the pipeline has produced for it so far.
///
/// Phase artifacts are monotone: a later-phase field is populated only when
/// every earlier phase is done. Serialization lives in the dataset-io
/// layer, which maps records onto the file schema.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRecord {
    pub source: SftRecord,
    pub raw_generation: Option<String>,
    pub annotated: Option<AnnotatedSystemMessage>,
    pub verdicts: Option<Vec<Verdict>>,
    pub refined_system_message: Option<String>,
    pub new_response: Option<String>,
    pub phase_status: BTreeMap<Phase, PhaseStatus>,
    pub provenance: Provenance,
    pub similarity: Option<SimilarityScores>,
}

impl PipelineRecord {
    pub fn new(source: SftRecord) -> Self {
        let mut phase_status = BTreeMap::new();
        for phase in Phase::ALL {
            phase_status.insert(phase, PhaseStatus::Pending);
        }
        Self {
            source,
            raw_generation: None,
            annotated: None,
            verdicts: None,
            refined_system_message: None,
            new_response: None,
            phase_status,
            provenance: Provenance::default(),
            similarity: None,
        }
    }

    pub fn status(&self, phase: Phase) -> &PhaseStatus {
        self.phase_status.get(&phase).unwrap_or(&PhaseStatus::Pending)
    }

    pub fn set_status(&mut self, phase: Phase, status: PhaseStatus) {
        self.phase_status.insert(phase, status);
    }

    pub fn is_done(&self, phase: Phase) -> bool {
        self.status(phase).is_done()
    }

    /// True when the record should be processed by `phase`: all earlier
    /// phases done and this phase not yet done.
    pub fn ready_for(&self, phase: Phase) -> bool {
        match phase.prev() {
            None => !self.is_done(phase),
            Some(prev) => self.is_done(prev) && !self.is_done(phase),
        }
    }
}
