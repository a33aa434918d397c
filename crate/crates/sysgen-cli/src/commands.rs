//! Subcommand implementations: run/phase, validate, stats, and judge.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use sysgen_core::client::{
    Backend, ChatClient, HttpBackend, MockBackend, MockScriptError,
};
use sysgen_core::grammar;
use sysgen_core::io::{
    phase_file_path, read_all, report_file_path, scan_dataset, DatasetIssue, IntakeSummary,
    IoError, ReadMode, RunReport,
};
use sysgen_core::metrics::{run_pairwise_judging, sample_for_judging, PairwiseItem};
use sysgen_core::phases::{PhaseError, Pipeline, RunOutcome};
use sysgen_core::prompts::{PromptError, PromptSet};
use sysgen_core::{
    AnnotatedSystemMessage, FunctionalityTag, Message, Phase, PipelineRecord, TaggedPhrase,
};

use crate::config::{parse_phase_range, BackendKind, FileConfig, Settings};
use crate::{CliError, RunFlags, EXIT_INTERRUPTED};

const SUCCESS: ExitCode = ExitCode::SUCCESS;

fn io_error(error: IoError) -> CliError {
    CliError::Io(error.to_string())
}

fn phase_error(error: PhaseError) -> CliError {
    match &error {
        PhaseError::DuplicateInputId { .. } | PhaseError::InputMismatch { .. } => {
            CliError::Usage(error.to_string())
        }
        _ => CliError::Io(error.to_string()),
    }
}

fn prompt_error(error: PromptError) -> CliError {
    CliError::Usage(format!("cannot render prompt: {error}"))
}

fn load_settings(flags: &RunFlags) -> Result<Settings, CliError> {
    let file = match &flags.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    Ok(Settings::resolve(file, flags))
}

fn build_client(settings: &Settings) -> Result<ChatClient, CliError> {
    let backend: Arc<dyn Backend> = match settings.backend {
        BackendKind::Mock => {
            let path = settings.mock_script.as_ref().ok_or_else(|| {
                CliError::Usage("--backend mock requires --mock-script <file>".to_string())
            })?;
            let backend = MockBackend::from_script_path(path).map_err(|error| match error {
                MockScriptError::Io { .. } => CliError::Io(error.to_string()),
                MockScriptError::Parse { .. } | MockScriptError::Regex { .. } => {
                    CliError::Usage(error.to_string())
                }
            })?;
            Arc::new(backend)
        }
        BackendKind::Http => {
            let backend = HttpBackend::new(&settings.client)
                .map_err(|error| CliError::Io(format!("backend init failed: {error}")))?;
            Arc::new(backend)
        }
    };
    ChatClient::new(backend, &settings.client)
        .map_err(|error| CliError::Usage(format!("client configuration: {error}")))
}

fn default_run_dir() -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|elapsed| elapsed.as_secs())
        .unwrap_or(0);
    PathBuf::from(format!("sysgen-run-{stamp}"))
}

// === run / phase ========================================================

pub async fn cmd_run(flags: RunFlags, phase_required: bool) -> Result<ExitCode, CliError> {
    let settings = load_settings(&flags)?;
    let (first, last) = match flags.phase.as_deref() {
        Some(text) => parse_phase_range(text)?,
        None if phase_required => {
            return Err(CliError::Usage(
                "`phase` needs --phase <range>, e.g. --phase 2..3".to_string(),
            ))
        }
        None => (Phase::Phase1, Phase::Phase4),
    };

    let out = match settings.out.clone() {
        Some(out) => out,
        None if first == Phase::Phase1 => default_run_dir(),
        None => {
            return Err(CliError::Usage(
                "a span past phase 1 resumes an existing run; pass --out <run-dir>".to_string(),
            ))
        }
    };

    // Assemble the input before touching the run directory, so a bad path
    // cannot leave an empty directory behind.
    let (records, intake) = if first == Phase::Phase1 {
        let input = settings.input.clone().ok_or_else(|| {
            CliError::Usage(
                "no input dataset; pass --input <file> or set it in the settings file".to_string(),
            )
        })?;
        let (records, issues) = read_all(&input, ReadMode::FreshDataset).map_err(io_error)?;
        if !issues.is_empty() {
            tracing::warn!(
                skipped = issues.len(),
                "input lines skipped; run `sysgen validate` for the listing"
            );
        }
        let intake = IntakeSummary::from_issues(records.len(), &issues);
        (records, Some(intake))
    } else {
        let previous = first.prev().expect("spans past phase 1 have a predecessor");
        let path = phase_file_path(&out, previous);
        if !path.exists() {
            return Err(CliError::Io(format!(
                "{} is missing; run the earlier phases first",
                path.display()
            )));
        }
        let (records, issues) = read_all(&path, ReadMode::RunArtifacts).map_err(io_error)?;
        if let Some(issue) = issues.first() {
            return Err(CliError::Io(format!(
                "{} line {}: corrupt intermediate ({})",
                path.display(),
                issue.line(),
                issue.kind()
            )));
        }
        (records, None)
    };

    if flags.dry_run {
        return dry_run(&records);
    }

    if settings.model.is_none() {
        return Err(CliError::Usage(
            "no model name; pass --model or set it in the settings file".to_string(),
        ));
    }
    let client = build_client(&settings)?;
    let pipeline = Pipeline::new(client, PromptSet::builtin(), settings.run, &out);

    let cancel = pipeline.cancel_flag();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            tracing::warn!("interrupt received; flushing the checkpoint");
            cancel.cancel();
        }
    });

    let record_count = records.len();
    println!(
        "processing {record_count} record(s), {first} through {last}, in {}",
        out.display()
    );
    match pipeline
        .run(records, first, last, intake)
        .await
        .map_err(phase_error)?
    {
        RunOutcome::Completed { records } => {
            let done = records.iter().filter(|r| r.is_done(last)).count();
            println!("finished: {done}/{record_count} record(s) completed {last}");
            let report = RunReport::load(&report_file_path(&out)).map_err(io_error)?;
            print_report(&report);
            Ok(SUCCESS)
        }
        RunOutcome::Interrupted { phase } => {
            eprintln!("interrupted during {phase}; progress saved, rerun the same command to resume");
            Ok(ExitCode::from(EXIT_INTERRUPTED))
        }
    }
}

/// Prints the prompts the pipeline would send for the first record. Later
/// phases need model output a dry run never has, so their previews use a
/// stand-in annotation; no backend is even constructed.
fn dry_run(records: &[PipelineRecord]) -> Result<ExitCode, CliError> {
    let first = records
        .first()
        .ok_or_else(|| CliError::Usage("dataset has no usable records".to_string()))?;
    let prompts = PromptSet::builtin();

    let phase1 = prompts.render_phase1(&first.source).map_err(prompt_error)?;
    print_prompt("phase1", &phase1);

    let annotated = AnnotatedSystemMessage::new(vec![
        TaggedPhrase {
            tag: FunctionalityTag::Role,
            phrase: "You are a helpful assistant.".to_string(),
        },
        TaggedPhrase {
            tag: FunctionalityTag::Style,
            phrase: "Keep answers brief.".to_string(),
        },
    ]);
    println!("(phase3 and phase4 previews below use a stand-in annotation)\n");
    let phase3 = prompts.render_phase3(&annotated).map_err(prompt_error)?;
    print_prompt("phase3", &phase3);
    let refined = grammar::render_plain(&annotated);
    let phase4 = prompts
        .render_phase4(&first.source, &refined)
        .map_err(prompt_error)?;
    print_prompt("phase4", &phase4);
    Ok(SUCCESS)
}

fn print_prompt(name: &str, messages: &[Message]) {
    println!("--- {name} prompt ---");
    for message in messages {
        println!("[{}]", message.role);
        println!("{}", message.content);
    }
    println!();
}

// === validate ===========================================================

pub fn cmd_validate(input: &Path) -> Result<ExitCode, CliError> {
    let dataset = scan_dataset(input, ReadMode::FreshDataset).map_err(io_error)?;
    for issue in &dataset.issues {
        println!("line {}: {}", issue.line(), describe_issue(issue));
    }
    println!(
        "{} record(s), {} issue(s)",
        dataset.records,
        dataset.issues.len()
    );
    if dataset.issues.is_empty() {
        Ok(SUCCESS)
    } else {
        Ok(ExitCode::from(3))
    }
}

fn describe_issue(issue: &DatasetIssue) -> String {
    match issue {
        DatasetIssue::MalformedJson { message, .. } => format!("malformed JSON: {message}"),
        DatasetIssue::DuplicateId { id, first_line, .. } => {
            format!("duplicate id {id:?} (first seen on line {first_line})")
        }
        DatasetIssue::InvalidRecord { id, problems, .. } => format!(
            "invalid record {id:?}: {}",
            problems
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ")
        ),
        DatasetIssue::UnexpectedArtifacts { id, .. } => {
            format!("record {id:?} already carries pipeline artifacts")
        }
        DatasetIssue::CorruptArtifacts { id, message, .. } => {
            format!("record {id:?} has corrupt artifacts: {message}")
        }
    }
}

// === stats ==============================================================

pub fn cmd_stats(run_dir: &Path) -> Result<ExitCode, CliError> {
    let report_path = report_file_path(run_dir);
    let report = if report_path.exists() {
        RunReport::load(&report_path).map_err(io_error)?
    } else {
        match RunReport::from_run_dir(run_dir) {
            Ok(report) => {
                eprintln!("warning: run not finished; statistics cover the latest completed phase");
                report
            }
            Err(IoError::NoPhaseFiles { .. }) => {
                return Err(CliError::Io(format!(
                    "{} holds no phase files",
                    run_dir.display()
                )))
            }
            Err(error) => return Err(io_error(error)),
        }
    };
    print_report(&report);
    Ok(SUCCESS)
}

fn print_report(report: &RunReport) {
    println!("records: {}", report.records);
    if let Some(intake) = &report.intake {
        if intake.lines != intake.accepted {
            println!(
                "intake: {} line(s) read, {} accepted",
                intake.lines, intake.accepted
            );
        }
    }

    println!();
    println!(
        "{:<8} {:>8} {:>8} {:>9} {:>10}",
        "phase", "entered", "done", "rejected", "retention"
    );
    for (phase, row) in &report.phases {
        let retention = row
            .retention()
            .map(|rate| format!("{:.1}%", rate * 100.0))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<8} {:>8} {:>8} {:>9} {:>10}",
            phase.to_string(),
            row.entered,
            row.done,
            row.rejected,
            retention
        );
    }

    let mut with_reasons = report
        .phases
        .iter()
        .filter(|(_, row)| !row.rejection_reasons.is_empty())
        .peekable();
    if with_reasons.peek().is_some() {
        println!();
        println!("rejection reasons:");
        for (phase, row) in with_reasons {
            for (reason, count) in &row.rejection_reasons {
                println!("  {phase}: {reason} ({count})");
            }
        }
    }

    if !report.tag_distribution.is_empty() {
        println!();
        println!("tag distribution:");
        for (tag, count) in &report.tag_distribution {
            println!("  {:<12} {count:>6}", tag.to_string());
        }
    }

    if !report.removed_labels.is_empty() {
        println!();
        println!(
            "{:<12} {:>9} {:>6} {:>6} {:>9}",
            "tag", "verified", "bad", "none", "removed"
        );
        for (tag, row) in &report.removed_labels {
            let removed = row
                .removal_rate()
                .map(|rate| format!("{:.1}%", rate * 100.0))
                .unwrap_or_else(|| "-".to_string());
            println!(
                "{:<12} {:>9} {:>6} {:>6} {:>9}",
                tag.to_string(),
                row.verified,
                row.bad,
                row.none,
                removed
            );
        }
    }

    let metrics = &report.metrics;
    if metrics.scored_records > 0 {
        println!();
        println!("response similarity ({} scored):", metrics.scored_records);
        for (n, value) in &metrics.ngram_precision_mean {
            println!("  {n}-gram precision mean: {value:.4}");
        }
        if let (Some(mean), Some(median)) = (metrics.lcs_f1_mean, metrics.lcs_f1_median) {
            println!("  lcs f1 mean: {mean:.4}  median: {median:.4}");
        }
        if let (Some(mean), Some(median)) = (metrics.length_ratio_mean, metrics.length_ratio_median)
        {
            println!("  length ratio mean: {mean:.4}  median: {median:.4}");
        }
    }
}

// === judge ==============================================================

pub async fn cmd_judge(run_dir: &Path, k: usize, flags: RunFlags) -> Result<ExitCode, CliError> {
    let settings = load_settings(&flags)?;
    let seed = settings.seed.ok_or_else(|| {
        CliError::Usage("judge needs --seed <n> so the sample is reproducible".to_string())
    })?;
    let model = settings
        .judge_model
        .clone()
        .or_else(|| settings.model.clone())
        .ok_or_else(|| {
            CliError::Usage("no judge model; pass --judge-model or --model".to_string())
        })?;

    let phase4 = phase_file_path(run_dir, Phase::Phase4);
    if !phase4.exists() {
        return Err(CliError::Io(format!(
            "{} is missing; judging needs a finished run",
            phase4.display()
        )));
    }
    let (records, issues) = read_all(&phase4, ReadMode::RunArtifacts).map_err(io_error)?;
    if let Some(issue) = issues.first() {
        return Err(CliError::Io(format!(
            "{} line {}: corrupt run artifact ({})",
            phase4.display(),
            issue.line(),
            issue.kind()
        )));
    }

    let items: Vec<PairwiseItem> = records
        .iter()
        .filter(|record| record.is_done(Phase::Phase4))
        .filter_map(|record| {
            let (question, original) = record.source.first_exchange()?;
            let new = record.new_response.clone()?;
            Some(PairwiseItem {
                id: record.source.id.clone(),
                question: question.content.clone(),
                original: record
                    .provenance
                    .original_response
                    .clone()
                    .unwrap_or_else(|| original.content.clone()),
                new,
            })
        })
        .collect();
    if k > items.len() {
        return Err(CliError::Usage(format!(
            "cannot sample {k} of {} finished record(s)",
            items.len()
        )));
    }
    let sampled: Vec<PairwiseItem> = sample_for_judging(&items, k, seed)
        .map_err(|error| CliError::Usage(error.to_string()))?
        .into_iter()
        .cloned()
        .collect();

    let client = build_client(&settings)?;
    let prompts = PromptSet::builtin();
    let (judged, table) = run_pairwise_judging(
        &client,
        &prompts,
        settings.judge_params(),
        &model,
        &sampled,
        seed,
    )
    .await;

    println!(
        "judged {} of {} finished record(s) with {model} (seed {seed})",
        table.judged,
        items.len()
    );
    print_rate("new response wins", table.new_wins, table.new_rate());
    print_rate("original wins", table.original_wins, table.original_rate());
    print_rate("ties", table.ties, table.tie_rate());
    if table.errors > 0 {
        println!("errors: {}", table.errors);
    }

    let artifact = serde_json::json!({
        "seed": seed,
        "k": k,
        "model": model,
        "table": table,
        "records": judged,
    });
    let path = run_dir.join("judge.json");
    std::fs::write(&path, format!("{artifact:#}\n"))
        .map_err(|error| CliError::Io(format!("cannot write {}: {error}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(SUCCESS)
}

fn print_rate(label: &str, count: usize, rate: Option<f64>) {
    match rate {
        Some(rate) => println!("{label}: {count} ({:.1}%)", rate * 100.0),
        None => println!("{label}: {count}"),
    }
}
