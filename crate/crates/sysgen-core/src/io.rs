//! Dataset files in and out.
//!
//! One JSONL schema covers both fresh inputs and pipeline outputs:
//! `{"id", "source", "messages", "sysgen"}`, where `sysgen` holds
//! everything the pipeline added. Reading streams line by line and turns
//! every problem into an issue with its line number; writing is
//! single-writer and finalizes atomically (temp file, then rename). The
//! run directory holds one file per phase plus `progress.json` and
//! `report.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar;
use crate::metrics::{mean, median};
use crate::model::{
    validate_record, FunctionalityTag, Message, Phase, PhaseStatus, PipelineRecord, Provenance,
    SftRecord, SimilarityScores, SpeakerRole, Verdict, VerificationLabel,
};

/// Version of the record and report schemas this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const PROGRESS_FILE: &str = "progress.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot access {path}: {source}")]
    File { path: String, source: io::Error },
    #[error("cannot serialize {path}: {source}")]
    Serialize {
        path: String,
        source: serde_json::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("phase file {path} is unusable: {issue}")]
    CorruptPhaseFile { path: String, issue: String },
    #[error("no phase output files in {dir}")]
    NoPhaseFiles { dir: String },
}

impl IoError {
    fn file(path: &Path, source: io::Error) -> Self {
        IoError::File {
            path: path.display().to_string(),
            source,
        }
    }
}

// ---------------------------------------------------------------------------
// The line schema

/// One JSONL line. `messages` is the conversation as consumers see it: the
/// original turns until phase 4 completes, then the
/// system/question/new-answer triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    id: String,
    source: String,
    messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sysgen: Option<WireSysgen>,
}

/// Everything the pipeline attached to a record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSysgen {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_generation: Option<String>,
    /// The current system message in tagged form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotated: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verdicts: Option<Vec<Verdict>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    refined_system_message: Option<String>,
    #[serde(default)]
    phase_status: BTreeMap<Phase, PhaseStatus>,
    #[serde(default)]
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    similarity: Option<SimilarityScores>,
}

fn to_wire(record: &PipelineRecord) -> WireRecord {
    let triplet = if record.is_done(Phase::Phase4) {
        match (
            record.refined_system_message.as_deref(),
            record.new_response.as_deref(),
            record.source.first_exchange(),
        ) {
            (Some(system), Some(answer), Some((question, _))) => Some(vec![
                Message::system(system),
                Message::user(question.content.clone()),
                Message::assistant(answer),
            ]),
            _ => {
                tracing::error!(
                    id = %record.source.id,
                    "record marked done for phase 4 without its artifacts; keeping original messages"
                );
                None
            }
        }
    } else {
        None
    };
    WireRecord {
        id: record.source.id.clone(),
        source: record.source.source.clone(),
        messages: triplet.unwrap_or_else(|| record.source.messages.clone()),
        sysgen: Some(WireSysgen {
            raw_generation: record.raw_generation.clone(),
            annotated: record.annotated.as_ref().map(grammar::serialize),
            verdicts: record.verdicts.clone(),
            refined_system_message: record.refined_system_message.clone(),
            phase_status: record.phase_status.clone(),
            provenance: record.provenance.clone(),
            similarity: record.similarity.clone(),
        }),
    }
}

fn triplet_parts(messages: &[Message]) -> Option<(&Message, &Message, &Message)> {
    match messages {
        [system, user, assistant]
            if system.role == SpeakerRole::System
                && user.role == SpeakerRole::User
                && assistant.role == SpeakerRole::Assistant =>
        {
            Some((system, user, assistant))
        }
        _ => None,
    }
}

fn from_wire(wire: WireRecord) -> Result<PipelineRecord, String> {
    let sysgen = match wire.sysgen {
        None => {
            return Ok(PipelineRecord::new(SftRecord::new(
                wire.id,
                wire.source,
                wire.messages,
            )))
        }
        Some(sysgen) => sysgen,
    };
    let mut phase_status = sysgen.phase_status;
    for phase in Phase::ALL {
        phase_status.entry(phase).or_insert(PhaseStatus::Pending);
    }
    let annotated = match sysgen.annotated {
        None => None,
        Some(text) => {
            let outcome = grammar::parse(&text);
            if !outcome.is_clean() {
                return Err("annotated field does not parse cleanly".to_string());
            }
            Some(outcome.message)
        }
    };
    let regenerated = phase_status
        .get(&Phase::Phase4)
        .is_some_and(PhaseStatus::is_done);
    let (source_messages, new_response) = if regenerated {
        let (system, user, assistant) = triplet_parts(&wire.messages)
            .ok_or("a regenerated record must hold a system/user/assistant triplet")?;
        if sysgen.refined_system_message.as_deref() != Some(system.content.as_str()) {
            return Err(
                "refined system message disagrees with the leading system message".to_string(),
            );
        }
        let original = sysgen
            .provenance
            .original_response
            .clone()
            .ok_or("a regenerated record must keep its original response")?;
        (
            vec![user.clone(), Message::assistant(original)],
            Some(assistant.content.clone()),
        )
    } else {
        (wire.messages, None)
    };
    Ok(PipelineRecord {
        source: SftRecord::new(wire.id, wire.source, source_messages),
        raw_generation: sysgen.raw_generation,
        annotated,
        verdicts: sysgen.verdicts,
        refined_system_message: sysgen.refined_system_message,
        new_response,
        phase_status,
        provenance: sysgen.provenance,
        similarity: sysgen.similarity,
    })
}

// ---------------------------------------------------------------------------
// Reading

/// What a file is expected to contain. Fresh datasets must not carry
/// `sysgen` artifacts and get full record validation; run artifacts must
/// reconstruct cleanly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    FreshDataset,
    RunArtifacts,
}

/// A per-line problem found while reading. The record behind an issue is
/// not yielded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetIssue {
    MalformedJson { line: usize, message: String },
    DuplicateId { id: String, first_line: usize, line: usize },
    InvalidRecord { line: usize, id: String, problems: Vec<String> },
    UnexpectedArtifacts { line: usize, id: String },
    CorruptArtifacts { line: usize, id: String, message: String },
}

impl DatasetIssue {
    pub fn line(&self) -> usize {
        match self {
            DatasetIssue::MalformedJson { line, .. }
            | DatasetIssue::DuplicateId { line, .. }
            | DatasetIssue::InvalidRecord { line, .. }
            | DatasetIssue::UnexpectedArtifacts { line, .. }
            | DatasetIssue::CorruptArtifacts { line, .. } => *line,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DatasetIssue::MalformedJson { .. } => "malformed_json",
            DatasetIssue::DuplicateId { .. } => "duplicate_id",
            DatasetIssue::InvalidRecord { .. } => "invalid_record",
            DatasetIssue::UnexpectedArtifacts { .. } => "unexpected_artifacts",
            DatasetIssue::CorruptArtifacts { .. } => "corrupt_artifacts",
        }
    }
}

/// One reader step: a usable record or an issue.
#[derive(Debug)]
pub enum ReadEvent {
    Record(Box<PipelineRecord>),
    Issue(DatasetIssue),
}

/// Streaming JSONL reader; one line in memory at a time, duplicate-id
/// tracking across the file.
pub struct DatasetReader {
    lines: Lines<BufReader<File>>,
    path: PathBuf,
    mode: ReadMode,
    line_no: usize,
    seen_ids: HashMap<String, usize>,
    finished: bool,
}

impl DatasetReader {
    pub fn open(path: &Path, mode: ReadMode) -> Result<Self, IoError> {
        let file = File::open(path).map_err(|e| IoError::file(path, e))?;
        Ok(Self {
            lines: BufReader::new(file).lines(),
            path: path.to_path_buf(),
            mode,
            line_no: 0,
            seen_ids: HashMap::new(),
            finished: false,
        })
    }

    fn classify(&mut self, line: &str) -> ReadEvent {
        let wire: WireRecord = match serde_json::from_str(line) {
            Ok(wire) => wire,
            Err(error) => {
                return ReadEvent::Issue(DatasetIssue::MalformedJson {
                    line: self.line_no,
                    message: error.to_string(),
                })
            }
        };
        if let Some(&first_line) = self.seen_ids.get(&wire.id) {
            return ReadEvent::Issue(DatasetIssue::DuplicateId {
                id: wire.id,
                first_line,
                line: self.line_no,
            });
        }
        self.seen_ids.insert(wire.id.clone(), self.line_no);
        match self.mode {
            ReadMode::FreshDataset => {
                if wire.sysgen.is_some() {
                    return ReadEvent::Issue(DatasetIssue::UnexpectedArtifacts {
                        line: self.line_no,
                        id: wire.id,
                    });
                }
                let record = SftRecord::new(wire.id, wire.source, wire.messages);
                let violations = validate_record(&record);
                if !violations.is_empty() {
                    return ReadEvent::Issue(DatasetIssue::InvalidRecord {
                        line: self.line_no,
                        id: record.id,
                        problems: violations.iter().map(|v| v.to_string()).collect(),
                    });
                }
                ReadEvent::Record(Box::new(PipelineRecord::new(record)))
            }
            ReadMode::RunArtifacts => {
                let id = wire.id.clone();
                match from_wire(wire) {
                    Ok(record) => ReadEvent::Record(Box::new(record)),
                    Err(message) => ReadEvent::Issue(DatasetIssue::CorruptArtifacts {
                        line: self.line_no,
                        id,
                        message,
                    }),
                }
            }
        }
    }
}

impl Iterator for DatasetReader {
    type Item = Result<ReadEvent, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let line = match self.lines.next()? {
            Ok(line) => line,
            Err(error) => {
                self.finished = true;
                return Some(Err(IoError::file(&self.path, error)));
            }
        };
        self.line_no += 1;
        Some(Ok(self.classify(&line)))
    }
}

/// Reads a whole file, separating records from issues.
pub fn read_all(
    path: &Path,
    mode: ReadMode,
) -> Result<(Vec<PipelineRecord>, Vec<DatasetIssue>), IoError> {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for event in DatasetReader::open(path, mode)? {
        match event? {
            ReadEvent::Record(record) => records.push(*record),
            ReadEvent::Issue(issue) => issues.push(issue),
        }
    }
    Ok((records, issues))
}

/// Summary of one dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub records: usize,
    pub schema_version: u32,
    pub issues: Vec<DatasetIssue>,
}

/// Scans a file for its record count and issue list without keeping the
/// records.
pub fn scan_dataset(path: &Path, mode: ReadMode) -> Result<DatasetFile, IoError> {
    let mut records = 0usize;
    let mut issues = Vec::new();
    for event in DatasetReader::open(path, mode)? {
        match event? {
            ReadEvent::Record(_) => records += 1,
            ReadEvent::Issue(issue) => issues.push(issue),
        }
    }
    Ok(DatasetFile {
        path: path.to_path_buf(),
        records,
        schema_version: SCHEMA_VERSION,
        issues,
    })
}

// ---------------------------------------------------------------------------
// Writing

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a temp file in the same directory and renames into
/// place, so the destination is never observed half-written.
fn atomic_write<F>(path: &Path, fill: F) -> Result<(), IoError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), IoError>,
{
    let temp = temp_path(path);
    let file = File::create(&temp).map_err(|e| IoError::file(&temp, e))?;
    let mut writer = BufWriter::new(file);
    fill(&mut writer)?;
    writer.flush().map_err(|e| IoError::file(&temp, e))?;
    writer
        .get_ref()
        .sync_all()
        .map_err(|e| IoError::file(&temp, e))?;
    fs::rename(&temp, path).map_err(|e| IoError::file(path, e))
}

fn write_record_line<W: Write>(
    writer: &mut W,
    record: &PipelineRecord,
    path: &Path,
) -> Result<(), IoError> {
    serde_json::to_writer(&mut *writer, &to_wire(record)).map_err(|e| IoError::Serialize {
        path: path.display().to_string(),
        source: e,
    })?;
    writer.write_all(b"\n").map_err(|e| IoError::file(path, e))
}

/// Writes records as JSONL in iteration order, atomically. Returns the
/// record count.
pub fn write_records<'a, I>(records: I, path: &Path) -> Result<usize, IoError>
where
    I: IntoIterator<Item = &'a PipelineRecord>,
{
    let mut count = 0usize;
    atomic_write(path, |writer| {
        for record in records {
            write_record_line(writer, record, path)?;
            count += 1;
        }
        Ok(())
    })?;
    Ok(count)
}

/// Appends records to a checkpoint file, fsyncing once at the end. Unlike
/// the final phase files this grows in place; a crash can leave a torn
/// last line, which [`load_partial`] tolerates.
pub fn append_records<'a, I>(records: I, path: &Path) -> Result<usize, IoError>
where
    I: IntoIterator<Item = &'a PipelineRecord>,
{
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| IoError::file(path, e))?;
    let mut writer = BufWriter::new(file);
    let mut count = 0usize;
    for record in records {
        write_record_line(&mut writer, record, path)?;
        count += 1;
    }
    writer.flush().map_err(|e| IoError::file(path, e))?;
    writer
        .get_ref()
        .sync_all()
        .map_err(|e| IoError::file(path, e))?;
    Ok(count)
}

/// What could be recovered from a checkpoint file.
#[derive(Debug, Default)]
pub struct PartialLoad {
    pub records: Vec<PipelineRecord>,
    /// Lines at the tail that did not parse (a torn append) and were
    /// discarded; their records will be processed again.
    pub discarded_lines: usize,
}

/// Loads a checkpoint file, stopping at the first unusable line. A missing
/// file is an empty load.
pub fn load_partial(path: &Path) -> Result<PartialLoad, IoError> {
    let file = match File::open(path) {
        Ok(file) => file,
        Err(error) if error.kind() == io::ErrorKind::NotFound => {
            return Ok(PartialLoad::default())
        }
        Err(error) => return Err(IoError::file(path, error)),
    };
    let mut load = PartialLoad::default();
    let mut lines = BufReader::new(file).lines();
    let mut healthy = true;
    for line in &mut lines {
        let line = line.map_err(|e| IoError::file(path, e))?;
        if healthy {
            let parsed = serde_json::from_str::<WireRecord>(&line)
                .map_err(|e| e.to_string())
                .and_then(from_wire);
            match parsed {
                Ok(record) => {
                    load.records.push(record);
                    continue;
                }
                Err(message) => {
                    tracing::warn!(
                        path = %path.display(),
                        line = load.records.len() + 1,
                        message,
                        "discarding checkpoint tail from unusable line"
                    );
                    healthy = false;
                }
            }
        }
        load.discarded_lines += 1;
    }
    Ok(load)
}

// ---------------------------------------------------------------------------
// Run directory layout

pub fn phase_file_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Phase1 => "phase1.jsonl",
        Phase::Phase2 => "phase2.jsonl",
        Phase::Phase3 => "phase3.jsonl",
        Phase::Phase4 => "phase4.jsonl",
    }
}

pub fn phase_file_path(dir: &Path, phase: Phase) -> PathBuf {
    dir.join(phase_file_name(phase))
}

pub fn partial_file_path(dir: &Path, phase: Phase) -> PathBuf {
    dir.join(format!("{}.partial", phase_file_name(phase)))
}

pub fn report_file_path(dir: &Path) -> PathBuf {
    dir.join(REPORT_FILE)
}

pub fn progress_file_path(dir: &Path) -> PathBuf {
    dir.join(PROGRESS_FILE)
}

/// The highest phase whose finalized output file exists.
pub fn latest_complete_phase(dir: &Path) -> Option<Phase> {
    Phase::ALL
        .into_iter()
        .rev()
        .find(|phase| phase_file_path(dir, *phase).exists())
}

/// The `progress.json` checkpoint: per phase, the ids whose processing
/// finished (done or rejected), in processing order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    #[serde(default)]
    pub phases: BTreeMap<Phase, Vec<String>>,
}

impl Progress {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = match fs::read_to_string(path) {
            Ok(text) => text,
            Err(error) if error.kind() == io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(error) => return Err(IoError::file(path, error)),
        };
        serde_json::from_str(&text).map_err(|e| IoError::Parse {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        atomic_write(path, |writer| {
            serde_json::to_writer_pretty(&mut *writer, self).map_err(|e| IoError::Serialize {
                path: path.display().to_string(),
                source: e,
            })?;
            writer.write_all(b"\n").map_err(|e| IoError::file(path, e))
        })
    }

    pub fn mark(&mut self, phase: Phase, id: impl Into<String>) {
        self.phases.entry(phase).or_default().push(id.into());
    }

    pub fn contains(&self, phase: Phase, id: &str) -> bool {
        self.phases
            .get(&phase)
            .is_some_and(|ids| ids.iter().any(|known| known == id))
    }
}

// ---------------------------------------------------------------------------
// The run report

/// How one phase treated the records that entered it. Percentages are
/// derived from these counts on demand, never stored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub entered: usize,
    pub done: usize,
    pub rejected: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rejection_reasons: BTreeMap<String, usize>,
}

impl RetentionRow {
    /// Fraction of entered records that survived the phase.
    pub fn retention(&self) -> Option<f64> {
        (self.entered > 0).then(|| self.done as f64 / self.entered as f64)
    }
}

/// Verification outcomes for one tag: how many phrases were judged, and
/// how many were removed under each removing label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedLabelRow {
    pub verified: usize,
    pub bad: usize,
    pub none: usize,
}

impl RemovedLabelRow {
    /// Fraction of this tag's verified phrases that were removed.
    pub fn removal_rate(&self) -> Option<f64> {
        (self.verified > 0).then(|| (self.bad + self.none) as f64 / self.verified as f64)
    }
}

/// Aggregated similarity scores over records that completed phase 4.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregates {
    pub scored_records: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ngram_precision_mean: BTreeMap<u8, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lcs_f1_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lcs_f1_median: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_ratio_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_ratio_median: Option<f64>,
}

/// What happened at intake, before phase 1 saw anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntakeSummary {
    pub lines: usize,
    pub accepted: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub issues: BTreeMap<String, usize>,
}

impl IntakeSummary {
    pub fn from_issues(accepted: usize, issues: &[DatasetIssue]) -> Self {
        let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
        for issue in issues {
            *by_kind.entry(issue.kind().to_string()).or_insert(0) += 1;
        }
        Self {
            lines: accepted + issues.len(),
            accepted,
            issues: by_kind,
        }
    }
}

/// The aggregate report for a run: retention per phase, the tag
/// distribution over surviving system messages, removed-label counts per
/// tag, and similarity aggregates. Everything is recomputable from the
/// phase files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intake: Option<IntakeSummary>,
    pub phases: BTreeMap<Phase, RetentionRow>,
    pub tag_distribution: BTreeMap<FunctionalityTag, usize>,
    pub removed_labels: BTreeMap<FunctionalityTag, RemovedLabelRow>,
    pub metrics: MetricAggregates,
}

impl RunReport {
    pub fn from_records(records: &[PipelineRecord]) -> Self {
        let mut phases: BTreeMap<Phase, RetentionRow> = BTreeMap::new();
        for record in records {
            for phase in Phase::ALL {
                match record.status(phase) {
                    PhaseStatus::Pending => {}
                    PhaseStatus::Done => {
                        let row = phases.entry(phase).or_default();
                        row.entered += 1;
                        row.done += 1;
                    }
                    PhaseStatus::Rejected { rejected } => {
                        let row = phases.entry(phase).or_default();
                        row.entered += 1;
                        row.rejected += 1;
                        *row.rejection_reasons.entry(rejected.clone()).or_insert(0) += 1;
                    }
                }
            }
        }

        let mut tag_distribution: BTreeMap<FunctionalityTag, usize> = BTreeMap::new();
        for record in records {
            let refining_rejected = [Phase::Phase1, Phase::Phase2, Phase::Phase3]
                .iter()
                .any(|phase| record.status(*phase).is_rejected());
            if refining_rejected {
                continue;
            }
            if let Some(annotated) = &record.annotated {
                for phrase in &annotated.phrases {
                    *tag_distribution.entry(phrase.tag).or_insert(0) += 1;
                }
            }
        }

        let mut removed_labels: BTreeMap<FunctionalityTag, RemovedLabelRow> = BTreeMap::new();
        for record in records {
            for verdict in record.verdicts.iter().flatten() {
                let row = removed_labels.entry(verdict.tag).or_default();
                row.verified += 1;
                match verdict.label {
                    VerificationLabel::Good => {}
                    VerificationLabel::Bad => row.bad += 1,
                    VerificationLabel::None => row.none += 1,
                }
            }
        }

        let scored: Vec<&SimilarityScores> =
            records.iter().filter_map(|r| r.similarity.as_ref()).collect();
        let mut ngram_sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
        for scores in &scored {
            for (n, value) in &scores.ngram_precision {
                let slot = ngram_sums.entry(*n).or_insert((0.0, 0));
                slot.0 += value;
                slot.1 += 1;
            }
        }
        let lcs: Vec<f64> = scored.iter().map(|s| s.lcs_f1).collect();
        let ratios: Vec<f64> = scored.iter().map(|s| s.length_ratio).collect();
        let metrics = MetricAggregates {
            scored_records: scored.len(),
            ngram_precision_mean: ngram_sums
                .into_iter()
                .map(|(n, (sum, count))| (n, sum / count as f64))
                .collect(),
            lcs_f1_mean: mean(&lcs),
            lcs_f1_median: median(&lcs),
            length_ratio_mean: mean(&ratios),
            length_ratio_median: median(&ratios),
        };

        Self {
            schema_version: SCHEMA_VERSION,
            records: records.len(),
            intake: None,
            phases,
            tag_distribution,
            removed_labels,
            metrics,
        }
    }

    pub fn with_intake(mut self, intake: IntakeSummary) -> Self {
        self.intake = Some(intake);
        self
    }

    /// Recomputes the report from the most advanced finalized phase file.
    pub fn from_run_dir(dir: &Path) -> Result<Self, IoError> {
        let phase = latest_complete_phase(dir).ok_or_else(|| IoError::NoPhaseFiles {
            dir: dir.display().to_string(),
        })?;
        let path = phase_file_path(dir, phase);
        let (records, issues) = read_all(&path, ReadMode::RunArtifacts)?;
        if let Some(issue) = issues.first() {
            return Err(IoError::CorruptPhaseFile {
                path: path.display().to_string(),
                issue: format!("line {}: {}", issue.line(), issue.kind()),
            });
        }
        Ok(Self::from_records(&records))
    }

    /// Writes the report as pretty JSON, atomically.
    pub fn emit(&self, path: &Path) -> Result<(), IoError> {
        atomic_write(path, |writer| {
            serde_json::to_writer_pretty(&mut *writer, self).map_err(|e| IoError::Serialize {
                path: path.display().to_string(),
                source: e,
            })?;
            writer.write_all(b"\n").map_err(|e| IoError::file(path, e))
        })
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| IoError::Parse {
            path: path.display().to_string(),
            source: e,
        })
    }
}

// ---------------------------------------------------------------------------
// Source-dataset adapters

/// Thin converters from well-known instruction datasets into the generic
/// record schema. Only the generic schema is normative; these map the
/// published field names and synthesize stable ids from line numbers.
pub mod adapters {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum SourceFormat {
        Generic,
        Capybara,
        Airoboros,
        OrcaMath,
        MetaMathQa,
        Magicoder,
    }

    impl SourceFormat {
        pub const ALL: [SourceFormat; 6] = [
            SourceFormat::Generic,
            SourceFormat::Capybara,
            SourceFormat::Airoboros,
            SourceFormat::OrcaMath,
            SourceFormat::MetaMathQa,
            SourceFormat::Magicoder,
        ];

        pub fn name(&self) -> &'static str {
            match self {
                SourceFormat::Generic => "generic",
                SourceFormat::Capybara => "capybara",
                SourceFormat::Airoboros => "airoboros",
                SourceFormat::OrcaMath => "orcamath",
                SourceFormat::MetaMathQa => "metamathqa",
                SourceFormat::Magicoder => "magicoder",
            }
        }

        pub fn from_name(name: &str) -> Option<Self> {
            Self::ALL
                .into_iter()
                .find(|format| format.name() == name.to_ascii_lowercase())
        }
    }

    #[derive(Deserialize)]
    struct CapybaraTurn {
        input: String,
        output: String,
    }

    #[derive(Deserialize)]
    struct CapybaraLine {
        conversation: Vec<CapybaraTurn>,
    }

    #[derive(Deserialize)]
    struct AiroborosLine {
        instruction: String,
        response: String,
    }

    #[derive(Deserialize)]
    struct OrcaMathLine {
        question: String,
        answer: String,
    }

    #[derive(Deserialize)]
    struct MetaMathLine {
        query: String,
        response: String,
    }

    #[derive(Deserialize)]
    struct MagicoderLine {
        problem: String,
        solution: String,
    }

    fn exchange(question: String, answer: String) -> Vec<Message> {
        vec![Message::user(question), Message::assistant(answer)]
    }

    fn convert(format: SourceFormat, line: &str, line_no: usize) -> Result<SftRecord, String> {
        let id = format!("{}-{line_no:06}", format.name());
        let messages = match format {
            SourceFormat::Generic => unreachable!("generic files use the schema reader"),
            SourceFormat::Capybara => {
                let parsed: CapybaraLine =
                    serde_json::from_str(line).map_err(|e| e.to_string())?;
                parsed
                    .conversation
                    .into_iter()
                    .flat_map(|turn| exchange(turn.input, turn.output))
                    .collect()
            }
            SourceFormat::Airoboros => {
                let parsed: AiroborosLine =
                    serde_json::from_str(line).map_err(|e| e.to_string())?;
                exchange(parsed.instruction, parsed.response)
            }
            SourceFormat::OrcaMath => {
                let parsed: OrcaMathLine =
                    serde_json::from_str(line).map_err(|e| e.to_string())?;
                exchange(parsed.question, parsed.answer)
            }
            SourceFormat::MetaMathQa => {
                let parsed: MetaMathLine =
                    serde_json::from_str(line).map_err(|e| e.to_string())?;
                exchange(parsed.query, parsed.response)
            }
            SourceFormat::Magicoder => {
                let parsed: MagicoderLine =
                    serde_json::from_str(line).map_err(|e| e.to_string())?;
                exchange(parsed.problem, parsed.solution)
            }
        };
        Ok(SftRecord::new(id, format.name(), messages))
    }

    /// Reads a source file in the given format, validating each converted
    /// record the same way the generic reader does.
    pub fn read_source_records(
        path: &Path,
        format: SourceFormat,
    ) -> Result<(Vec<PipelineRecord>, Vec<DatasetIssue>), IoError> {
        if format == SourceFormat::Generic {
            return read_all(path, ReadMode::FreshDataset);
        }
        let file = File::open(path).map_err(|e| IoError::file(path, e))?;
        let mut records = Vec::new();
        let mut issues = Vec::new();
        for (index, line) in BufReader::new(file).lines().enumerate() {
            let line_no = index + 1;
            let line = line.map_err(|e| IoError::file(path, e))?;
            match convert(format, &line, line_no) {
                Ok(record) => {
                    let violations = validate_record(&record);
                    if violations.is_empty() {
                        records.push(PipelineRecord::new(record));
                    } else {
                        issues.push(DatasetIssue::InvalidRecord {
                            line: line_no,
                            id: record.id,
                            problems: violations.iter().map(|v| v.to_string()).collect(),
                        });
                    }
                }
                Err(message) => issues.push(DatasetIssue::MalformedJson {
                    line: line_no,
                    message,
                }),
            }
        }
        Ok((records, issues))
    }
}
