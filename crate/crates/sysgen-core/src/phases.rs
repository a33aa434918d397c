//! Orchestration of the four pipeline passes over a dataset.
//!
//! Each pass reads the previous pass's records, processes them with bounded
//! concurrency, and materializes its output as `<run>/phaseN.jsonl` before
//! the next pass starts. Failures never abort a pass: a record that cannot
//! be completed is carried forward as rejected, so every pass emits exactly
//! one output record per input record, in input order.
//!
//! Work is checkpointed. Completed records append to a `.partial` file in
//! input order and finished ids accumulate in `progress.json`; rerunning an
//! interrupted pass skips everything the checkpoint already holds. A
//! rejection is a completed outcome — resumption never retries it — which
//! keeps an interrupted-then-resumed run byte-identical to an uninterrupted
//! one under a scripted backend. When the checkpoint and `progress.json`
//! disagree (a crash can tear the last append), the `.partial` contents
//! win and the missing records are simply processed again.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use futures::StreamExt;
use thiserror::Error;

use crate::client::{ChatClient, ChatRequest};
use crate::filter::{apply_phase2, apply_phase3_removal, FilterConfig, FilterReport};
use crate::grammar;
use crate::io::{
    append_records, load_partial, partial_file_path, phase_file_path, progress_file_path,
    read_all, report_file_path, write_records, IntakeSummary, IoError, Progress, ReadMode,
    RunReport,
};
use crate::model::{
    CallPhase, GenerationParams, Phase, PhaseMeta, PhaseStatus, PipelineRecord, SimilarityScores,
};
use crate::prompts::{parse_verdicts, PromptError, PromptSet};

/// Rejection reason for records that reached a pass without the artifact it
/// consumes. Indicates corrupted intermediates or a skipped pass.
pub const REJECT_MISSING_ARTIFACT: &str = "missing_artifact";
/// Rejection reason when prompt rendering fails for a record.
pub const REJECT_UNRENDERABLE_PROMPT: &str = "unrenderable_prompt";
/// Defensive rejection: the refined system message came out empty.
pub const REJECT_EMPTY_REFINED_SYSTEM: &str = "empty_refined_system";
/// Defensive rejection: tag delimiters survived into the refined message.
pub const REJECT_TAGGED_REFINED_SYSTEM: &str = "tagged_refined_system";
/// Defensive rejection: verdicts did not cover the message one-to-one.
pub const REJECT_VERDICT_COVERAGE: &str = "verdict_coverage_mismatch";

#[derive(Debug, Error)]
pub enum PhaseError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("duplicate record id {id:?} in pass input")]
    DuplicateInputId { id: String },
    #[error("existing {path} does not match this run's input (resume requires the same dataset)")]
    InputMismatch { path: String },
    #[error("existing {path} is unusable: {issue}")]
    CorruptIntermediate { path: String, issue: String },
    #[error("record {id:?} went missing during {phase}; checkpoint is inconsistent")]
    MissingResult { id: String, phase: Phase },
}

/// Settings for a pipeline run.
#[derive(Debug, Clone)]
pub struct PhaseRunConfig {
    /// Model that generates system messages and regenerated responses.
    pub generator_model: String,
    /// Model that verifies phrases. `None` means self-feedback: the
    /// generator judges its own output.
    pub judge_model: Option<String>,
    /// Records processed per chunk; each chunk is flushed to the checkpoint
    /// before the next starts.
    pub batch_size: usize,
    /// Concurrent in-flight records within a chunk.
    pub concurrency: usize,
    /// Save `progress.json` after this many completed records.
    pub checkpoint_interval: usize,
    pub phase1_params: GenerationParams,
    pub phase3_params: GenerationParams,
    pub phase4_params: GenerationParams,
    pub filter: FilterConfig,
    /// Stop with [`RunOutcome::Interrupted`] after processing this many new
    /// records. For interruption drills and smoke runs; `None` runs to
    /// completion.
    pub max_records_per_run: Option<usize>,
}

impl PhaseRunConfig {
    pub fn new(generator_model: impl Into<String>) -> Self {
        Self {
            generator_model: generator_model.into(),
            judge_model: None,
            batch_size: 32,
            concurrency: 8,
            checkpoint_interval: 500,
            phase1_params: GenerationParams::for_phase(CallPhase::Phase1),
            phase3_params: GenerationParams::for_phase(CallPhase::Phase3),
            phase4_params: GenerationParams::for_phase(CallPhase::Phase4),
            filter: FilterConfig::default(),
            max_records_per_run: None,
        }
    }

    /// The verification model, falling back to the generator.
    pub fn judge_model(&self) -> &str {
        self.judge_model.as_deref().unwrap_or(&self.generator_model)
    }
}

/// Cooperative cancellation handle; cloneable into signal handlers. Raising
/// it stops the run at the next chunk boundary, after the checkpoint flush.
#[derive(Debug, Clone, Default)]
pub struct CancelFlag(Arc<AtomicBool>);

impl CancelFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// How a run ended.
#[derive(Debug)]
pub enum RunOutcome {
    /// All requested passes finished; the final records are in input order
    /// and `report.json` is written.
    Completed { records: Vec<PipelineRecord> },
    /// Cancelled or out of record budget. The checkpoint is flushed;
    /// rerunning over the same directory resumes where this stopped.
    Interrupted { phase: Phase },
}

impl RunOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunOutcome::Completed { .. })
    }
}

enum PassEnd {
    Complete(Vec<PipelineRecord>),
    Stopped,
}

/// The pipeline driver: owns the client, prompts, and run directory, and
/// executes any contiguous span of passes.
pub struct Pipeline {
    client: ChatClient,
    prompts: PromptSet,
    config: PhaseRunConfig,
    run_dir: PathBuf,
    cancel: CancelFlag,
    phase2_filtering: Mutex<FilterReport>,
    phase3_filtering: Mutex<FilterReport>,
}

impl Pipeline {
    pub fn new(
        client: ChatClient,
        prompts: PromptSet,
        config: PhaseRunConfig,
        run_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            client,
            prompts,
            config,
            run_dir: run_dir.into(),
            cancel: CancelFlag::new(),
            phase2_filtering: Mutex::new(FilterReport::default()),
            phase3_filtering: Mutex::new(FilterReport::default()),
        }
    }

    pub fn run_dir(&self) -> &std::path::Path {
        &self.run_dir
    }

    /// Handle for stopping the run from outside (e.g. a Ctrl-C handler).
    pub fn cancel_flag(&self) -> CancelFlag {
        self.cancel.clone()
    }

    /// Filtering accounting accumulated by the records processed in this
    /// invocation (records restored from a checkpoint are not re-counted).
    /// The first report covers rule filtering, the second verification
    /// removal.
    pub fn filter_reports(&self) -> (FilterReport, FilterReport) {
        (
            self.phase2_filtering.lock().expect("report lock").clone(),
            self.phase3_filtering.lock().expect("report lock").clone(),
        )
    }

    /// Runs passes `first..=last` over `input`, materializing each pass's
    /// output in the run directory. A pass whose output file already exists
    /// is loaded instead of re-executed, so rerunning an interrupted run
    /// continues it. On completion, writes `report.json` derived from the
    /// final records.
    pub async fn run(
        &self,
        input: Vec<PipelineRecord>,
        first: Phase,
        last: Phase,
        intake: Option<IntakeSummary>,
    ) -> Result<RunOutcome, PhaseError> {
        assert!(first <= last, "pass span must be ordered");
        let mut seen = HashSet::new();
        for record in &input {
            if !seen.insert(record.source.id.as_str()) {
                return Err(PhaseError::DuplicateInputId {
                    id: record.source.id.clone(),
                });
            }
        }
        fs::create_dir_all(&self.run_dir)
            .map_err(|e| IoError::File {
                path: self.run_dir.display().to_string(),
                source: e,
            })?;

        let mut fuel = self.config.max_records_per_run;
        let mut records = input;
        for phase in Phase::ALL.into_iter().filter(|p| (first..=last).contains(p)) {
            let final_path = phase_file_path(&self.run_dir, phase);
            if final_path.exists() {
                let (loaded, issues) = read_all(&final_path, ReadMode::RunArtifacts)?;
                if let Some(issue) = issues.first() {
                    return Err(PhaseError::CorruptIntermediate {
                        path: final_path.display().to_string(),
                        issue: format!("line {}: {}", issue.line(), issue.kind()),
                    });
                }
                let loaded_ids: HashSet<&str> =
                    loaded.iter().map(|r| r.source.id.as_str()).collect();
                let input_ids: HashSet<&str> =
                    records.iter().map(|r| r.source.id.as_str()).collect();
                if loaded_ids != input_ids {
                    return Err(PhaseError::InputMismatch {
                        path: final_path.display().to_string(),
                    });
                }
                tracing::info!(%phase, path = %final_path.display(), "pass output already present; loading it");
                records = loaded;
                continue;
            }
            match self.run_pass(phase, records, &mut fuel).await? {
                PassEnd::Complete(output) => records = output,
                PassEnd::Stopped => {
                    tracing::info!(%phase, "run stopped; checkpoint flushed");
                    return Ok(RunOutcome::Interrupted { phase });
                }
            }
        }

        let mut report = RunReport::from_records(&records);
        if let Some(intake) = intake {
            report = report.with_intake(intake);
        }
        report.emit(&report_file_path(&self.run_dir))?;
        Ok(RunOutcome::Completed { records })
    }

    /// One checkpointed pass: skip what the checkpoint holds, process the
    /// rest in chunks, then assemble the output in input order and finalize
    /// it atomically.
    async fn run_pass(
        &self,
        phase: Phase,
        input: Vec<PipelineRecord>,
        fuel: &mut Option<usize>,
    ) -> Result<PassEnd, PhaseError> {
        let final_path = phase_file_path(&self.run_dir, phase);
        let partial_path = partial_file_path(&self.run_dir, phase);
        let progress_path = progress_file_path(&self.run_dir);

        let mut progress = Progress::load(&progress_path)?;
        let partial = load_partial(&partial_path)?;
        progress.phases.insert(
            phase,
            partial.records.iter().map(|r| r.source.id.clone()).collect(),
        );
        let mut results: HashMap<String, PipelineRecord> = partial
            .records
            .into_iter()
            .map(|record| (record.source.id.clone(), record))
            .collect();
        if !results.is_empty() {
            tracing::info!(
                %phase,
                restored = results.len(),
                "resuming pass from checkpoint"
            );
        }

        let order: Vec<String> = input.iter().map(|r| r.source.id.clone()).collect();
        let pending: Vec<PipelineRecord> = input
            .into_iter()
            .filter(|record| !results.contains_key(&record.source.id))
            .collect();

        let batch = self.config.batch_size.max(1);
        let mut since_save = 0usize;
        let mut iter = pending.into_iter().peekable();
        while iter.peek().is_some() {
            if self.cancel.is_cancelled() {
                progress.save(&progress_path)?;
                return Ok(PassEnd::Stopped);
            }
            let budget = match fuel {
                Some(0) => {
                    progress.save(&progress_path)?;
                    return Ok(PassEnd::Stopped);
                }
                Some(remaining) => batch.min(*remaining),
                None => batch,
            };
            let chunk: Vec<PipelineRecord> = iter.by_ref().take(budget).collect();
            let processed = self.process_chunk(phase, chunk).await;

            append_records(&processed, &partial_path)?;
            for record in &processed {
                progress.mark(phase, record.source.id.clone());
            }
            if let Some(remaining) = fuel {
                *remaining -= processed.len();
            }
            since_save += processed.len();
            if since_save >= self.config.checkpoint_interval.max(1) {
                progress.save(&progress_path)?;
                since_save = 0;
            }
            for record in processed {
                results.insert(record.source.id.clone(), record);
            }
        }

        let mut output = Vec::with_capacity(order.len());
        for id in order {
            let record = results
                .remove(&id)
                .ok_or_else(|| PhaseError::MissingResult {
                    id,
                    phase,
                })?;
            output.push(record);
        }
        write_records(&output, &final_path)?;
        match fs::remove_file(&partial_path) {
            Ok(()) => {}
            Err(error) if error.kind() == std::io::ErrorKind::NotFound => {}
            Err(error) => {
                return Err(IoError::File {
                    path: partial_path.display().to_string(),
                    source: error,
                }
                .into())
            }
        }
        progress.save(&progress_path)?;
        Ok(PassEnd::Complete(output))
    }

    async fn process_chunk(
        &self,
        phase: Phase,
        chunk: Vec<PipelineRecord>,
    ) -> Vec<PipelineRecord> {
        let concurrency = self.config.concurrency.max(1);
        let mut processed: Vec<(usize, PipelineRecord)> =
            futures::stream::iter(chunk.into_iter().enumerate())
                .map(|(index, record)| async move {
                    (index, self.process_record(phase, record).await)
                })
                .buffer_unordered(concurrency)
                .collect()
                .await;
        processed.sort_unstable_by_key(|(index, _)| *index);
        processed.into_iter().map(|(_, record)| record).collect()
    }

    /// Records are touched only when every earlier pass succeeded and this
    /// one has not run yet; anything else (already rejected, already done,
    /// predecessor rejected) passes through unchanged.
    fn should_process(record: &PipelineRecord, phase: Phase) -> bool {
        record.ready_for(phase) && !record.status(phase).is_rejected()
    }

    async fn process_record(&self, phase: Phase, record: PipelineRecord) -> PipelineRecord {
        if !Self::should_process(&record, phase) {
            return record;
        }
        match phase {
            Phase::Phase1 => self.generate(record).await,
            Phase::Phase2 => self.filter(record),
            Phase::Phase3 => self.verify(record).await,
            Phase::Phase4 => self.regenerate(record).await,
        }
    }

    fn meta(&self, model: &str, params: GenerationParams) -> PhaseMeta {
        PhaseMeta {
            model: model.to_string(),
            backend: self.client.backend_name().to_string(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        }
    }

    fn reject(record: &mut PipelineRecord, phase: Phase, reason: &str) {
        tracing::warn!(id = %record.source.id, %phase, reason, "record rejected");
        record.set_status(phase, PhaseStatus::rejected(reason));
    }

    /// Pass 1: ask the generator for a tag-annotated system message.
    async fn generate(&self, mut record: PipelineRecord) -> PipelineRecord {
        let messages = match self.prompts.render_phase1(&record.source) {
            Ok(messages) => messages,
            Err(error) => {
                tracing::warn!(id = %record.source.id, %error, "cannot render generation prompt");
                Self::reject(&mut record, Phase::Phase1, REJECT_UNRENDERABLE_PROMPT);
                return record;
            }
        };
        let params = self.config.phase1_params;
        let request = ChatRequest::new(messages, params, &self.config.generator_model)
            .expect("rendered prompts form a valid request");
        match self.client.complete(&request).await {
            Ok(response) => {
                record.raw_generation = Some(response.text);
                record
                    .provenance
                    .calls
                    .insert(Phase::Phase1, self.meta(&self.config.generator_model, params));
                record.set_status(Phase::Phase1, PhaseStatus::Done);
            }
            Err(error) => Self::reject(&mut record, Phase::Phase1, error.code()),
        }
        record
    }

    /// Pass 2: parse the raw generation and apply the filtering rules.
    /// Purely local; never calls the model.
    fn filter(&self, mut record: PipelineRecord) -> PipelineRecord {
        let raw = match record.raw_generation.as_deref() {
            Some(raw) => raw,
            None => {
                Self::reject(&mut record, Phase::Phase2, REJECT_MISSING_ARTIFACT);
                return record;
            }
        };
        let outcome = grammar::parse(raw);
        let (message, report) = apply_phase2(&outcome, &self.config.filter);
        merge_filter_report(&self.phase2_filtering, &report);
        match report.record_rejected {
            Some(reason) => Self::reject(&mut record, Phase::Phase2, &reason),
            None => {
                record.annotated = Some(message);
                record.set_status(Phase::Phase2, PhaseStatus::Done);
            }
        }
        record
    }

    /// Pass 3: have the judge label every phrase and remove what it did not
    /// confirm. A rejected record keeps its pre-removal message and the
    /// verdicts as evidence.
    async fn verify(&self, mut record: PipelineRecord) -> PipelineRecord {
        let annotated = match record.annotated.clone() {
            Some(annotated) => annotated,
            None => {
                Self::reject(&mut record, Phase::Phase3, REJECT_MISSING_ARTIFACT);
                return record;
            }
        };
        let messages = match self.prompts.render_phase3(&annotated) {
            Ok(messages) => messages,
            Err(error) => {
                tracing::warn!(id = %record.source.id, %error, "cannot render verification prompt");
                Self::reject(&mut record, Phase::Phase3, REJECT_UNRENDERABLE_PROMPT);
                return record;
            }
        };
        let params = self.config.phase3_params;
        let request = ChatRequest::new(messages, params, self.config.judge_model())
            .expect("rendered prompts form a valid request");
        let reply = match self.client.complete(&request).await {
            Ok(reply) => reply,
            Err(error) => {
                Self::reject(&mut record, Phase::Phase3, error.code());
                return record;
            }
        };
        record
            .provenance
            .calls
            .insert(Phase::Phase3, self.meta(self.config.judge_model(), params));
        let verdicts = parse_verdicts(&reply.text, &annotated);
        record.verdicts = Some(verdicts.clone());
        match apply_phase3_removal(&annotated, &verdicts, &self.config.filter) {
            Ok((message, report)) => {
                merge_filter_report(&self.phase3_filtering, &report);
                match report.record_rejected {
                    Some(reason) => Self::reject(&mut record, Phase::Phase3, &reason),
                    None => {
                        record.annotated = Some(message);
                        record.set_status(Phase::Phase3, PhaseStatus::Done);
                    }
                }
            }
            Err(error) => {
                tracing::error!(id = %record.source.id, %error, "verdicts do not cover the message");
                Self::reject(&mut record, Phase::Phase3, REJECT_VERDICT_COVERAGE);
            }
        }
        record
    }

    /// Pass 4: strip the tags into the refined system message and ask the
    /// generator for a new response conditioned on it.
    async fn regenerate(&self, mut record: PipelineRecord) -> PipelineRecord {
        let annotated = match record.annotated.as_ref() {
            Some(annotated) => annotated,
            None => {
                Self::reject(&mut record, Phase::Phase4, REJECT_MISSING_ARTIFACT);
                return record;
            }
        };
        let refined = grammar::render_plain(annotated);
        let messages = match self.prompts.render_phase4(&record.source, &refined) {
            Ok(messages) => messages,
            Err(PromptError::EmptyRefinedSystem) => {
                Self::reject(&mut record, Phase::Phase4, REJECT_EMPTY_REFINED_SYSTEM);
                return record;
            }
            Err(PromptError::TaggedRefinedSystem) => {
                Self::reject(&mut record, Phase::Phase4, REJECT_TAGGED_REFINED_SYSTEM);
                return record;
            }
            Err(error) => {
                tracing::warn!(id = %record.source.id, %error, "cannot render regeneration prompt");
                Self::reject(&mut record, Phase::Phase4, REJECT_UNRENDERABLE_PROMPT);
                return record;
            }
        };
        record.refined_system_message = Some(refined);
        let params = self.config.phase4_params;
        let request = ChatRequest::new(messages, params, &self.config.generator_model)
            .expect("rendered prompts form a valid request");
        match self.client.complete(&request).await {
            Ok(response) => {
                let original = record
                    .source
                    .first_exchange()
                    .map(|(_, answer)| answer.content.clone())
                    .expect("regeneration prompt rendered, so the exchange exists");
                record.similarity = match SimilarityScores::compute(&response.text, &original) {
                    Ok(scores) => Some(scores),
                    Err(error) => {
                        tracing::warn!(id = %record.source.id, %error, "similarity not computable");
                        None
                    }
                };
                record.provenance.original_response = Some(original);
                record.provenance.truncated_multi_turn = record.source.has_extra_turns();
                record.new_response = Some(response.text);
                record
                    .provenance
                    .calls
                    .insert(Phase::Phase4, self.meta(&self.config.generator_model, params));
                record.set_status(Phase::Phase4, PhaseStatus::Done);
            }
            Err(error) => Self::reject(&mut record, Phase::Phase4, error.code()),
        }
        record
    }
}

fn merge_filter_report(target: &Mutex<FilterReport>, from: &FilterReport) {
    let mut target = target.lock().expect("report lock");
    for (tag, count) in &from.kept {
        *target.kept.entry(*tag).or_insert(0) += count;
    }
    for (reason, count) in &from.dropped {
        *target.dropped.entry(*reason).or_insert(0) += count;
    }
    for (tag, labels) in &from.removed_labels {
        let slot = target.removed_labels.entry(*tag).or_default();
        for (label, count) in labels {
            *slot.entry(*label).or_insert(0) += count;
        }
    }
    target.reordered |= from.reordered;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{Backend, ClientConfig, MockBackend, MockScript, ScriptRule};
    use crate::model::{FunctionalityTag, Message, SftRecord, VerificationLabel};
    use std::path::Path;

    const ANNOTATED: &str =
        "<<Role>>You are a tutor.<</Role>> <<Style>>Be brief.<</Style>>";

    fn record(id: &str) -> PipelineRecord {
        PipelineRecord::new(SftRecord::new(
            id,
            "test",
            vec![
                Message::user(format!("question {id}")),
                Message::assistant(format!("answer {id}")),
            ],
        ))
    }

    fn full_script() -> MockScript {
        MockScript {
            rules: vec![
                ScriptRule {
                    phase: Some(CallPhase::Phase1),
                    respond: Some(ANNOTATED.to_string()),
                    ..ScriptRule::default()
                },
                ScriptRule {
                    phase: Some(CallPhase::Phase3),
                    respond: Some("Role: Good\nStyle: Good".to_string()),
                    ..ScriptRule::default()
                },
                ScriptRule {
                    phase: Some(CallPhase::Phase4),
                    respond: Some("A fresh, brief answer.".to_string()),
                    ..ScriptRule::default()
                },
            ],
            default: None,
        }
    }

    fn pipeline(script: MockScript, dir: &Path) -> (Pipeline, Arc<MockBackend>) {
        let backend = Arc::new(MockBackend::from_script(script).unwrap());
        let client = ChatClient::new(
            backend.clone() as Arc<dyn Backend>,
            &ClientConfig {
                backoff_base_ms: 1,
                backoff_cap_ms: 2,
                ..ClientConfig::default()
            },
        )
        .unwrap();
        let pipeline = Pipeline::new(
            client,
            PromptSet::builtin(),
            PhaseRunConfig::new("test-model"),
            dir,
        );
        (pipeline, backend)
    }

    async fn run_all(pipeline: &Pipeline, input: Vec<PipelineRecord>) -> Vec<PipelineRecord> {
        match pipeline
            .run(input, Phase::Phase1, Phase::Phase4, None)
            .await
            .unwrap()
        {
            RunOutcome::Completed { records } => records,
            RunOutcome::Interrupted { phase } => panic!("unexpected interruption at {phase}"),
        }
    }

    #[tokio::test]
    async fn full_run_materializes_every_pass_and_the_report() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, _) = pipeline(full_script(), dir.path());
        let records = run_all(&pipeline, vec![record("a"), record("b"), record("c")]).await;

        assert_eq!(records.len(), 3);
        for rec in &records {
            assert!(Phase::ALL.iter().all(|p| rec.is_done(*p)));
            assert_eq!(
                rec.refined_system_message.as_deref(),
                Some("You are a tutor. Be brief.")
            );
            assert_eq!(rec.new_response.as_deref(), Some("A fresh, brief answer."));
            assert!(rec.similarity.is_some());
        }
        for phase in Phase::ALL {
            assert!(phase_file_path(dir.path(), phase).exists());
            assert!(!partial_file_path(dir.path(), phase).exists());
        }
        let report = RunReport::load(&report_file_path(dir.path())).unwrap();
        assert_eq!(report.records, 3);
        assert_eq!(report.phases[&Phase::Phase4].done, 3);
    }

    #[tokio::test]
    async fn output_preserves_input_order_and_count_with_failures() {
        let dir = tempfile::tempdir().unwrap();
        let mut script = full_script();
        script.rules.insert(
            0,
            ScriptRule {
                phase: Some(CallPhase::Phase1),
                contains: Some("question r-3".to_string()),
                fail: Some(crate::client::FailMode::Permanent),
                ..ScriptRule::default()
            },
        );
        let (pipeline, _) = pipeline(script, dir.path());
        let input: Vec<PipelineRecord> = (0..10).map(|i| record(&format!("r-{i}"))).collect();
        let records = run_all(&pipeline, input).await;

        assert_eq!(records.len(), 10);
        let ids: Vec<&str> = records.iter().map(|r| r.source.id.as_str()).collect();
        assert_eq!(ids, (0..10).map(|i| format!("r-{i}")).collect::<Vec<_>>());
        let failed = &records[3];
        assert_eq!(
            failed.status(Phase::Phase1),
            &PhaseStatus::rejected("request_rejected")
        );
        assert_eq!(failed.status(Phase::Phase2), &PhaseStatus::Pending);
        assert!(records
            .iter()
            .filter(|r| r.source.id != "r-3")
            .all(|r| r.is_done(Phase::Phase4)));
    }

    #[tokio::test]
    async fn rejected_records_pass_through_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let mut script = full_script();
        script.rules.insert(
            0,
            ScriptRule {
                phase: Some(CallPhase::Phase1),
                contains: Some("question u".to_string()),
                respond: Some("<<Example>>only an unknown tag<</Example>>".to_string()),
                ..ScriptRule::default()
            },
        );
        let (pipeline, backend) = pipeline(script, dir.path());
        let records = run_all(&pipeline, vec![record("u"), record("v")]).await;

        let rejected = &records[0];
        assert_eq!(
            rejected.status(Phase::Phase2),
            &PhaseStatus::rejected("empty_after_filtering")
        );
        assert!(rejected.annotated.is_none());
        assert_eq!(rejected.status(Phase::Phase3), &PhaseStatus::Pending);
        assert_eq!(rejected.status(Phase::Phase4), &PhaseStatus::Pending);
        assert!(records[1].is_done(Phase::Phase4));
        // The rejected record stopped calling the model after pass 1.
        let calls = backend.recorded_calls();
        assert_eq!(
            calls
                .iter()
                .filter(|c| c.payload.contains("question u"))
                .count(),
            1
        );
    }

    #[tokio::test]
    async fn filtering_pass_never_calls_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, backend) = pipeline(full_script(), dir.path());
        run_all(&pipeline, vec![record("a")]).await;
        assert!(backend
            .recorded_calls()
            .iter()
            .all(|call| call.phase != CallPhase::Judge));
        assert_eq!(backend.recorded_calls().len(), 3);
    }

    #[tokio::test]
    async fn per_pass_params_and_models_reach_the_backend() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(MockBackend::from_script(full_script()).unwrap());
        let client = ChatClient::new(
            backend.clone() as Arc<dyn Backend>,
            &ClientConfig::default(),
        )
        .unwrap();
        let mut config = PhaseRunConfig::new("gen-model");
        config.judge_model = Some("judge-model".to_string());
        let pipeline = Pipeline::new(client, PromptSet::builtin(), config, dir.path());
        run_all(&pipeline, vec![record("a")]).await;

        let calls = backend.recorded_calls();
        let by_phase = |phase: CallPhase| {
            calls
                .iter()
                .find(|c| c.phase == phase)
                .unwrap_or_else(|| panic!("no {phase:?} call"))
        };
        let phase1 = by_phase(CallPhase::Phase1);
        assert_eq!((phase1.temperature, phase1.max_tokens), (0.7, 512));
        assert_eq!(phase1.model, "gen-model");
        let phase3 = by_phase(CallPhase::Phase3);
        assert_eq!((phase3.temperature, phase3.max_tokens), (0.7, 256));
        assert_eq!(phase3.model, "judge-model");
        let phase4 = by_phase(CallPhase::Phase4);
        assert_eq!((phase4.temperature, phase4.max_tokens), (0.7, 1024));
        assert_eq!(phase4.model, "gen-model");
    }

    #[tokio::test]
    async fn judge_defaults_to_the_generator() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, backend) = pipeline(full_script(), dir.path());
        run_all(&pipeline, vec![record("a")]).await;
        assert!(backend
            .recorded_calls()
            .iter()
            .all(|call| call.model == "test-model"));
    }

    #[tokio::test]
    async fn unparseable_judge_reply_rejects_with_all_none_verdicts() {
        let dir = tempfile::tempdir().unwrap();
        let mut script = full_script();
        script.rules[1].respond = Some("I cannot evaluate this.".to_string());
        let (pipeline, _) = pipeline(script, dir.path());
        let records = run_all(&pipeline, vec![record("a")]).await;

        let rec = &records[0];
        assert_eq!(
            rec.status(Phase::Phase3),
            &PhaseStatus::rejected("empty_after_verification")
        );
        let verdicts = rec.verdicts.as_ref().unwrap();
        assert_eq!(verdicts.len(), 2);
        assert!(verdicts
            .iter()
            .all(|v| v.label == VerificationLabel::None));
        // Pre-removal message kept as evidence.
        assert_eq!(rec.annotated.as_ref().unwrap().phrases.len(), 2);
    }

    #[tokio::test]
    async fn verification_removal_trims_the_message() {
        let dir = tempfile::tempdir().unwrap();
        let mut script = full_script();
        script.rules[1].respond = Some("Role: Good\nStyle: Bad".to_string());
        let (pipeline, _) = pipeline(script, dir.path());
        let records = run_all(&pipeline, vec![record("a")]).await;

        let rec = &records[0];
        assert!(rec.is_done(Phase::Phase4));
        let annotated = rec.annotated.as_ref().unwrap();
        assert_eq!(annotated.phrases.len(), 1);
        assert_eq!(annotated.phrases[0].tag, FunctionalityTag::Role);
        assert_eq!(rec.refined_system_message.as_deref(), Some("You are a tutor."));
        let (_, removal) = pipeline.filter_reports();
        assert_eq!(
            removal.removed_labels[&FunctionalityTag::Style][&VerificationLabel::Bad],
            1
        );
    }

    #[tokio::test]
    async fn regeneration_records_provenance_and_similarity() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, _) = pipeline(full_script(), dir.path());
        let multi_turn = PipelineRecord::new(SftRecord::new(
            "m",
            "test",
            vec![
                Message::user("first question"),
                Message::assistant("first answer"),
                Message::user("follow-up"),
                Message::assistant("second answer"),
            ],
        ));
        let records = run_all(&pipeline, vec![multi_turn]).await;

        let rec = &records[0];
        assert!(rec.is_done(Phase::Phase4));
        assert_eq!(
            rec.provenance.original_response.as_deref(),
            Some("first answer")
        );
        assert!(rec.provenance.truncated_multi_turn);
        assert!(rec.similarity.is_some());
        let meta = &rec.provenance.calls[&Phase::Phase4];
        assert_eq!(meta.model, "test-model");
        assert_eq!(meta.max_tokens, 1024);
        assert_eq!(meta.backend, "mock");
        assert!(!rec.provenance.calls.contains_key(&Phase::Phase2));
    }

    #[tokio::test]
    async fn budget_interrupts_and_resume_matches_uninterrupted_bytes() {
        let interrupted_dir = tempfile::tempdir().unwrap();
        let reference_dir = tempfile::tempdir().unwrap();
        let input: Vec<PipelineRecord> = (0..5).map(|i| record(&format!("r-{i}"))).collect();

        let (reference, _) = pipeline(full_script(), reference_dir.path());
        run_all(&reference, input.clone()).await;

        let (first, _) = pipeline(full_script(), interrupted_dir.path());
        let mut budgeted = first;
        budgeted.config.max_records_per_run = Some(2);
        budgeted.config.batch_size = 1;
        match budgeted
            .run(input.clone(), Phase::Phase1, Phase::Phase4, None)
            .await
            .unwrap()
        {
            RunOutcome::Interrupted { phase } => assert_eq!(phase, Phase::Phase1),
            RunOutcome::Completed { .. } => panic!("budget should interrupt"),
        }
        assert!(partial_file_path(interrupted_dir.path(), Phase::Phase1).exists());

        let (resumed, backend) = pipeline(full_script(), interrupted_dir.path());
        let outcome = resumed
            .run(input, Phase::Phase1, Phase::Phase4, None)
            .await
            .unwrap();
        assert!(outcome.is_completed());
        // Only the three unprocessed records hit the model at pass 1.
        assert_eq!(
            backend
                .recorded_calls()
                .iter()
                .filter(|c| c.phase == CallPhase::Phase1)
                .count(),
            3
        );
        for phase in Phase::ALL {
            let interrupted = fs::read(phase_file_path(interrupted_dir.path(), phase)).unwrap();
            let uninterrupted = fs::read(phase_file_path(reference_dir.path(), phase)).unwrap();
            assert_eq!(interrupted, uninterrupted, "{phase} files must match");
        }
        assert_eq!(
            fs::read(report_file_path(interrupted_dir.path())).unwrap(),
            fs::read(report_file_path(reference_dir.path())).unwrap()
        );
    }

    #[tokio::test]
    async fn existing_pass_files_are_loaded_not_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let input = vec![record("a"), record("b")];
        let (first, _) = pipeline(full_script(), dir.path());
        first
            .run(input.clone(), Phase::Phase1, Phase::Phase2, None)
            .await
            .unwrap();

        let (second, backend) = pipeline(full_script(), dir.path());
        let outcome = second
            .run(input, Phase::Phase1, Phase::Phase4, None)
            .await
            .unwrap();
        assert!(outcome.is_completed());
        assert!(backend
            .recorded_calls()
            .iter()
            .all(|c| c.phase != CallPhase::Phase1));
    }

    #[tokio::test]
    async fn resuming_with_a_different_dataset_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let (first, _) = pipeline(full_script(), dir.path());
        first
            .run(vec![record("a")], Phase::Phase1, Phase::Phase1, None)
            .await
            .unwrap();
        let (second, _) = pipeline(full_script(), dir.path());
        let result = second
            .run(vec![record("other")], Phase::Phase1, Phase::Phase1, None)
            .await;
        assert!(matches!(result, Err(PhaseError::InputMismatch { .. })));
    }

    #[tokio::test]
    async fn cancellation_stops_before_the_next_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, backend) = pipeline(full_script(), dir.path());
        pipeline.cancel_flag().cancel();
        let outcome = pipeline
            .run(vec![record("a")], Phase::Phase1, Phase::Phase4, None)
            .await
            .unwrap();
        assert!(matches!(outcome, RunOutcome::Interrupted { phase: Phase::Phase1 }));
        assert!(backend.recorded_calls().is_empty());
        assert!(progress_file_path(dir.path()).exists());
    }

    #[tokio::test]
    async fn duplicate_input_ids_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, _) = pipeline(full_script(), dir.path());
        let result = pipeline
            .run(
                vec![record("a"), record("a")],
                Phase::Phase1,
                Phase::Phase4,
                None,
            )
            .await;
        assert!(matches!(result, Err(PhaseError::DuplicateInputId { id }) if id == "a"));
    }

    #[tokio::test]
    async fn empty_input_completes_with_empty_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, backend) = pipeline(full_script(), dir.path());
        let records = run_all(&pipeline, Vec::new()).await;
        assert!(records.is_empty());
        assert!(backend.recorded_calls().is_empty());
        for phase in Phase::ALL {
            assert_eq!(
                fs::read_to_string(phase_file_path(dir.path(), phase)).unwrap(),
                ""
            );
        }
        let report = RunReport::load(&report_file_path(dir.path())).unwrap();
        assert_eq!(report.records, 0);
    }

    #[tokio::test]
    async fn transient_failures_are_retried_to_success() {
        let dir = tempfile::tempdir().unwrap();
        let mut script = full_script();
        script.rules.insert(
            0,
            ScriptRule {
                phase: Some(CallPhase::Phase1),
                fail: Some(crate::client::FailMode::Transient),
                fail_times: Some(2),
                respond: Some(ANNOTATED.to_string()),
                ..ScriptRule::default()
            },
        );
        let (pipeline, _) = pipeline(script, dir.path());
        let records = run_all(&pipeline, vec![record("a")]).await;
        assert!(records[0].is_done(Phase::Phase4));
    }
}
