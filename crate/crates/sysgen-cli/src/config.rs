//! Settings resolution: a JSON settings file provides defaults, command-line
//! flags override them, and nothing overrides a flag.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Deserialize;
use sysgen_core::client::ClientConfig;
use sysgen_core::phases::PhaseRunConfig;
use sysgen_core::{CallPhase, GenerationParams, Phase};

use crate::{CliError, RunFlags};

/// Which backend implementation answers chat requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// An OpenAI-compatible HTTP server.
    Http,
    /// A scripted in-process backend; requires `--mock-script`.
    Mock,
}

/// On-disk settings. Every field is optional; the credential itself never
/// appears here, only the name of the environment variable holding it.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<String>,
    pub judge_model: Option<String>,
    pub endpoint: Option<String>,
    pub backend: Option<BackendKind>,
    pub mock_script: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub batch_size: Option<usize>,
    pub checkpoint_interval: Option<usize>,
    pub seed: Option<u64>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub request_timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
    pub phase1: Option<ParamOverride>,
    pub phase3: Option<ParamOverride>,
    pub phase4: Option<ParamOverride>,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamOverride {
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl ParamOverride {
    fn apply(self, params: &mut GenerationParams) {
        if let Some(temperature) = self.temperature {
            params.temperature = temperature;
        }
        if let Some(max_tokens) = self.max_tokens {
            params.max_tokens = max_tokens;
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read settings file {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid settings file {}: {e}", path.display())))
    }
}

/// Fully resolved settings: file values with flags folded in on top.
#[derive(Debug)]
pub struct Settings {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<String>,
    pub judge_model: Option<String>,
    pub backend: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub seed: Option<u64>,
    pub client: ClientConfig,
    pub run: PhaseRunConfig,
}

impl Settings {
    pub fn resolve(file: FileConfig, flags: &RunFlags) -> Self {
        let model = flags.model.clone().or(file.model);
        let judge_model = flags.judge_model.clone().or(file.judge_model);

        let mut client = ClientConfig::default();
        if let Some(endpoint) = flags.endpoint.clone().or(file.endpoint.clone()) {
            client.endpoint = endpoint;
        }
        if let Some(api_key_env) = file.api_key_env.clone() {
            client.api_key_env = api_key_env;
        }
        if let Some(timeout) = file.request_timeout_ms {
            client.request_timeout_ms = timeout;
        }
        if let Some(retries) = file.max_retries {
            client.max_retries = retries;
        }

        // The pipeline needs a model name even when we end up only rendering
        // prompts; a placeholder keeps construction total and the commands
        // that actually call a backend check `model` first.
        let mut run = PhaseRunConfig::new(model.clone().unwrap_or_default());
        run.judge_model = judge_model.clone();
        if let Some(concurrency) = flags.concurrency.or(file.concurrency) {
            run.concurrency = concurrency;
            client.max_concurrency = client.max_concurrency.max(concurrency);
        }
        if let Some(batch_size) = file.batch_size {
            run.batch_size = batch_size;
        }
        if let Some(interval) = file.checkpoint_interval {
            run.checkpoint_interval = interval;
        }
        if let Some(over) = file.phase1 {
            over.apply(&mut run.phase1_params);
        }
        if let Some(over) = file.phase3 {
            over.apply(&mut run.phase3_params);
        }
        if let Some(over) = file.phase4 {
            over.apply(&mut run.phase4_params);
        }

        Settings {
            input: flags.input.clone().or(file.input),
            out: flags.out.clone().or(file.out),
            model,
            judge_model,
            backend: flags.backend.or(file.backend).unwrap_or(BackendKind::Http),
            mock_script: flags.mock_script.clone().or(file.mock_script),
            seed: flags.seed.or(file.seed),
            client,
            run,
        }
    }

    pub fn judge_params(&self) -> GenerationParams {
        GenerationParams::for_phase(CallPhase::Judge)
    }
}

/// Parses `1..4`, `2..=3`, `phase2..phase3`, or a single phase like `3`
/// into an inclusive span.
pub fn parse_phase_range(text: &str) -> Result<(Phase, Phase), CliError> {
    fn one(piece: &str) -> Result<Phase, CliError> {
        match piece.trim().trim_start_matches("phase") {
            "1" => Ok(Phase::Phase1),
            "2" => Ok(Phase::Phase2),
            "3" => Ok(Phase::Phase3),
            "4" => Ok(Phase::Phase4),
            other => Err(CliError::Usage(format!(
                "unknown phase {other:?}; expected 1-4 or phase1-phase4"
            ))),
        }
    }
    let (first, last) = match text.split_once("..") {
        Some((first, last)) => (one(first)?, one(last.trim_start_matches('='))?),
        None => {
            let only = one(text)?;
            (only, only)
        }
    };
    if last < first {
        return Err(CliError::Usage(format!(
            "phase range {text:?} runs backwards"
        )));
    }
    Ok((first, last))
}
