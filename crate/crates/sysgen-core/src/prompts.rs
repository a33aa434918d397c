//! Prompt templates and their renderers.
//!
//! Templates are data: UTF-8 text files with `{placeholder}` slots, shipped
//! as embedded defaults and overridable per file from a directory. Few-shot
//! demonstrations are ordinary dataset records whose leading system message
//! carries the tagged exemplar. Rendering is pure and deterministic.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::grammar;
use crate::model::{
    AnnotatedSystemMessage, FunctionalityTag, Message, SftRecord, SpeakerRole, Verdict,
    VerificationLabel,
};

const BUILTIN_PHASE1: &str = include_str!("../assets/phase1.txt");
const BUILTIN_PHASE3: &str = include_str!("../assets/phase3.txt");
const BUILTIN_PHASE4_SYSTEM_HEADER: &str = include_str!("../assets/phase4_system_header.txt");
const BUILTIN_JUDGE_PAIRWISE: &str = include_str!("../assets/judge_pairwise.txt");
const BUILTIN_JUDGE_ALIGNMENT: &str = include_str!("../assets/judge_alignment.txt");
const BUILTIN_DEMONSTRATIONS: &str = include_str!("../assets/demonstrations.jsonl");

/// The five template slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateName {
    Phase1,
    Phase3,
    Phase4SystemHeader,
    JudgePairwise,
    JudgeAlignment,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::Phase1,
        TemplateName::Phase3,
        TemplateName::Phase4SystemHeader,
        TemplateName::JudgePairwise,
        TemplateName::JudgeAlignment,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateName::Phase1 => "phase1",
            TemplateName::Phase3 => "phase3",
            TemplateName::Phase4SystemHeader => "phase4_system_header",
            TemplateName::JudgePairwise => "judge_pairwise",
            TemplateName::JudgeAlignment => "judge_alignment",
        }
    }

    /// File name of the override in a template directory.
    pub fn file_name(&self) -> String {
        format!("{}.txt", self.as_str())
    }

    /// Placeholders the renderer fills and therefore requires exactly once.
    fn required_placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateName::Phase1 => &["conversation"],
            TemplateName::Phase3 => &["annotated", "filtered"],
            TemplateName::Phase4SystemHeader => &["system"],
            TemplateName::JudgePairwise => &["instruction", "answer_a", "answer_b"],
            TemplateName::JudgeAlignment => &["system", "response"],
        }
    }

    fn builtin_body(&self) -> &'static str {
        match self {
            TemplateName::Phase1 => BUILTIN_PHASE1,
            TemplateName::Phase3 => BUILTIN_PHASE3,
            TemplateName::Phase4SystemHeader => BUILTIN_PHASE4_SYSTEM_HEADER,
            TemplateName::JudgePairwise => BUILTIN_JUDGE_PAIRWISE,
            TemplateName::JudgeAlignment => BUILTIN_JUDGE_ALIGNMENT,
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} is missing the {{{placeholder}}} placeholder")]
    MissingPlaceholder {
        template: &'static str,
        placeholder: String,
    },
    #[error("template {template} contains {{{placeholder}}} more than once")]
    DuplicatePlaceholder {
        template: &'static str,
        placeholder: String,
    },
    #[error("phase1 template references {{demonstrations}} but no demonstrations are loaded")]
    NoDemonstrations,
    #[error("demonstration {index} is unusable: {reason}")]
    BadDemonstration { index: usize, reason: String },
    #[error("record {id} has no (user, assistant) exchange to render")]
    RecordWithoutExchange { id: String },
    #[error("phase3 prompt needs at least one phrase")]
    EmptyAnnotatedMessage,
    #[error("refined system message is empty")]
    EmptyRefinedSystem,
    #[error("refined system message still contains tag delimiters")]
    TaggedRefinedSystem,
    #[error("cannot read template file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse demonstration on line {line} of {path}: {source}")]
    ParseDemonstration {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

/// One template: a named body whose required placeholders were verified to
/// appear exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        for placeholder in name.required_placeholders() {
            match count_placeholder(&body, placeholder) {
                0 => {
                    return Err(PromptError::MissingPlaceholder {
                        template: name.as_str(),
                        placeholder: placeholder.to_string(),
                    })
                }
                1 => {}
                _ => {
                    return Err(PromptError::DuplicatePlaceholder {
                        template: name.as_str(),
                        placeholder: placeholder.to_string(),
                    })
                }
            }
        }
        // Optional placeholders may appear at most once.
        if name == TemplateName::Phase1 && count_placeholder(&body, "demonstrations") > 1 {
            return Err(PromptError::DuplicatePlaceholder {
                template: name.as_str(),
                placeholder: "demonstrations".to_string(),
            });
        }
        Ok(Self { name, body })
    }

    fn fill(&self, values: &[(&str, &str)]) -> String {
        let mut text = self.body.clone();
        for (key, value) in values {
            text = text.replace(&format!("{{{key}}}"), value);
        }
        text
    }
}

fn count_placeholder(body: &str, name: &str) -> usize {
    body.matches(&format!("{{{name}}}")).count()
}

/// The full set of templates plus the phase-1 demonstrations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub phase1: PromptTemplate,
    pub phase3: PromptTemplate,
    pub phase4_system_header: PromptTemplate,
    pub judge_pairwise: PromptTemplate,
    pub judge_alignment: PromptTemplate,
    pub demonstrations: Vec<SftRecord>,
}

impl PromptSet {
    /// The embedded defaults: fresh template bodies and three demonstrations.
    pub fn builtin() -> Self {
        Self::assemble(
            |name| Ok(name.builtin_body().to_string()),
            parse_demonstrations(BUILTIN_DEMONSTRATIONS, "<builtin>")
                .expect("builtin demonstrations are valid"),
        )
        .expect("builtin templates are valid")
    }

    /// Loads overrides from a directory: any of `phase1.txt`, `phase3.txt`,
    /// `phase4_system_header.txt`, `judge_pairwise.txt`,
    /// `judge_alignment.txt`, and `demonstrations.jsonl` present there
    /// replaces the builtin; everything else falls back.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let demos_path = dir.join("demonstrations.jsonl");
        let demonstrations = if demos_path.exists() {
            let text = std::fs::read_to_string(&demos_path).map_err(|source| PromptError::Io {
                path: demos_path.display().to_string(),
                source,
            })?;
            parse_demonstrations(&text, &demos_path.display().to_string())?
        } else {
            parse_demonstrations(BUILTIN_DEMONSTRATIONS, "<builtin>")?
        };
        Self::assemble(
            |name| {
                let path = dir.join(name.file_name());
                if path.exists() {
                    std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                } else {
                    Ok(name.builtin_body().to_string())
                }
            },
            demonstrations,
        )
    }

    fn assemble<F>(mut body_for: F, demonstrations: Vec<SftRecord>) -> Result<Self, PromptError>
    where
        F: FnMut(TemplateName) -> Result<String, PromptError>,
    {
        let set = Self {
            phase1: PromptTemplate::new(TemplateName::Phase1, body_for(TemplateName::Phase1)?)?,
            phase3: PromptTemplate::new(TemplateName::Phase3, body_for(TemplateName::Phase3)?)?,
            phase4_system_header: PromptTemplate::new(
                TemplateName::Phase4SystemHeader,
                body_for(TemplateName::Phase4SystemHeader)?,
            )?,
            judge_pairwise: PromptTemplate::new(
                TemplateName::JudgePairwise,
                body_for(TemplateName::JudgePairwise)?,
            )?,
            judge_alignment: PromptTemplate::new(
                TemplateName::JudgeAlignment,
                body_for(TemplateName::JudgeAlignment)?,
            )?,
            demonstrations,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<(), PromptError> {
        if count_placeholder(&self.phase1.body, "demonstrations") == 1
            && self.demonstrations.is_empty()
        {
            return Err(PromptError::NoDemonstrations);
        }
        for (index, demo) in self.demonstrations.iter().enumerate() {
            validate_demonstration(demo)
                .map_err(|reason| PromptError::BadDemonstration { index, reason })?;
        }
        Ok(())
    }

    /// Builds the Phase 1 generation prompt: demonstrations, then the
    /// record's first (user, assistant) exchange as the conversational
    /// history.
    pub fn render_phase1(&self, record: &SftRecord) -> Result<Vec<Message>, PromptError> {
        let (question, answer) =
            record
                .first_exchange()
                .ok_or_else(|| PromptError::RecordWithoutExchange {
                    id: record.id.clone(),
                })?;
        let demos = self
            .demonstrations
            .iter()
            .enumerate()
            .map(|(i, demo)| render_demonstration(i + 1, demo))
            .collect::<Vec<_>>()
            .join("\n\n");
        let conversation = render_conversation(&question.content, Some(&answer.content));
        let body = self.phase1.fill(&[
            ("demonstrations", demos.as_str()),
            ("conversation", conversation.as_str()),
        ]);
        Ok(vec![Message::user(body)])
    }

    /// Builds the Phase 3 verification prompt over a filtered message: the
    /// plain assembled text plus one "Tag: phrase" line per phrase.
    pub fn render_phase3(
        &self,
        annotated: &AnnotatedSystemMessage,
    ) -> Result<Vec<Message>, PromptError> {
        if annotated.is_empty() {
            return Err(PromptError::EmptyAnnotatedMessage);
        }
        let lines = annotated
            .phrases
            .iter()
            .map(|p| format!("{}: {}", p.tag, p.phrase))
            .collect::<Vec<_>>()
            .join("\n");
        let filtered = grammar::render_plain(annotated);
        let body = self.phase3.fill(&[
            ("annotated", lines.as_str()),
            ("filtered", filtered.as_str()),
        ]);
        Ok(vec![Message::user(body)])
    }

    /// Builds the Phase 4 regeneration request: the refined system message
    /// (wrapped by the header template) and the user's question. The
    /// original answer is deliberately absent.
    pub fn render_phase4(
        &self,
        record: &SftRecord,
        refined_system: &str,
    ) -> Result<Vec<Message>, PromptError> {
        if refined_system.trim().is_empty() {
            return Err(PromptError::EmptyRefinedSystem);
        }
        if refined_system.contains("<<") || refined_system.contains(">>") {
            return Err(PromptError::TaggedRefinedSystem);
        }
        let (question, _) =
            record
                .first_exchange()
                .ok_or_else(|| PromptError::RecordWithoutExchange {
                    id: record.id.clone(),
                })?;
        let system = self.phase4_system_header.fill(&[("system", refined_system)]);
        Ok(vec![
            Message::system(system),
            Message::user(question.content.clone()),
        ])
    }

    /// Builds the pairwise judging prompt with the two answers already
    /// placed in their (possibly swapped) A/B positions.
    pub fn render_judge_pairwise(
        &self,
        instruction: &str,
        answer_a: &str,
        answer_b: &str,
    ) -> Vec<Message> {
        let body = self.judge_pairwise.fill(&[
            ("instruction", instruction),
            ("answer_a", answer_a),
            ("answer_b", answer_b),
        ]);
        vec![Message::user(body)]
    }

    /// Builds the system/response alignment judging prompt.
    pub fn render_judge_alignment(&self, system: &str, response: &str) -> Vec<Message> {
        let body = self
            .judge_alignment
            .fill(&[("system", system), ("response", response)]);
        vec![Message::user(body)]
    }
}

fn render_conversation(question: &str, answer: Option<&str>) -> String {
    match answer {
        Some(answer) => format!("User: {question}\nAssistant: {answer}"),
        None => format!("User: {question}"),
    }
}

fn render_demonstration(number: usize, demo: &SftRecord) -> String {
    let system = demo
        .messages
        .iter()
        .find(|m| m.role == SpeakerRole::System)
        .map(|m| m.content.as_str())
        .unwrap_or_default();
    let (question, answer) = demo
        .first_exchange()
        .map(|(q, a)| (q.content.as_str(), a.content.as_str()))
        .unwrap_or_default();
    format!(
        "### Example {number}\nConversational History:\n{}\n\nSystem Message:\n{system}",
        render_conversation(question, Some(answer))
    )
}

fn validate_demonstration(demo: &SftRecord) -> Result<(), String> {
    let system = match demo.messages.first() {
        Some(message) if message.role == SpeakerRole::System => &message.content,
        _ => return Err("first message must be the tagged system message".to_string()),
    };
    let outcome = grammar::parse(system);
    if !outcome.is_clean() {
        return Err(format!(
            "system message does not parse cleanly ({} residue(s))",
            outcome.residues.len()
        ));
    }
    if outcome.message.is_empty() {
        return Err("system message has no tagged phrases".to_string());
    }
    if demo.first_exchange().is_none() {
        return Err("no (user, assistant) exchange".to_string());
    }
    Ok(())
}

fn parse_demonstrations(text: &str, path: &str) -> Result<Vec<SftRecord>, PromptError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SftRecord =
            serde_json::from_str(line).map_err(|source| PromptError::ParseDemonstration {
                path: path.to_string(),
                line: i + 1,
                source,
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Extracts one verification label per expected phrase from a judge reply.
///
/// Verdict lines look like "TagName: Label" (bullets, numbering, and tag
/// markers around the name are tolerated; label matching is
/// case-insensitive). Labels are matched to phrases per tag in message
/// order: the first line naming a tag labels that tag's first phrase, the
/// second line its second, and so on. A phrase no line accounts for gets
/// None.
pub fn parse_verdicts(reply: &str, expected: &AnnotatedSystemMessage) -> Vec<Verdict> {
    let mut queues: BTreeMap<FunctionalityTag, VecDeque<VerificationLabel>> = BTreeMap::new();
    for line in reply.lines() {
        if let Some((tag, label)) = parse_verdict_line(line) {
            queues.entry(tag).or_default().push_back(label);
        }
    }
    expected
        .phrases
        .iter()
        .map(|phrase| {
            let label = queues
                .get_mut(&phrase.tag)
                .and_then(|queue| queue.pop_front())
                .unwrap_or_else(|| {
                    tracing::debug!(tag = %phrase.tag, "no verdict line for phrase; labeling None");
                    VerificationLabel::None
                });
            Verdict {
                tag: phrase.tag,
                phrase: phrase.phrase.clone(),
                label,
            }
        })
        .collect()
}

fn parse_verdict_line(line: &str) -> Option<(FunctionalityTag, VerificationLabel)> {
    static LINE: OnceLock<Regex> = OnceLock::new();
    let regex = LINE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*]\s*|\d+[.)]\s*)?(\w+)\s*:\s*(\w+)")
            .expect("verdict line regex compiles")
    });
    let sanitized: String = line.chars().filter(|c| *c != '<' && *c != '>' && *c != '/').collect();
    let captures = regex.captures(&sanitized)?;
    let tag = FunctionalityTag::from_name_ci(captures.get(1)?.as_str())?;
    let label = VerificationLabel::from_str_ci(captures.get(2)?.as_str())?;
    Some((tag, label))
}
