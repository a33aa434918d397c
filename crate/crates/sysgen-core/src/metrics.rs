//! Response-quality statistics and the LLM-judge analyses.
//!
//! The lexical metrics are pure and deterministic. Text is tokenized one
//! fixed way everywhere: lowercased, split on whitespace and ASCII
//! punctuation, empties dropped. The judge helpers go through the chat
//! client and inherit its concurrency and retry contract.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ChatRequest, ClientError};
use crate::model::{GenerationParams, Message, SimilarityScores};
use crate::prompts::PromptSet;

/// Error code recorded for a judge reply that carries no readable verdict.
pub const ERROR_UNPARSEABLE_JUDGE_REPLY: &str = "unparseable_judge_reply";
/// Error code recorded when a judging input has an empty field.
pub const ERROR_EMPTY_JUDGE_INPUT: &str = "empty_judge_input";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("candidate has {tokens} token(s); n-gram precision with n={n} needs at least n")]
    TooShortCandidate { tokens: usize, n: usize },
    #[error("{side} text has no tokens")]
    EmptyTokens { side: &'static str },
    #[error("original response has no tokens; length ratio is undefined")]
    EmptyOriginal,
    #[error("n-gram order {n} is outside 1..=4")]
    UnsupportedN { n: usize },
    #[error("cannot sample {k} of {len} records")]
    SampleTooLarge { k: usize, len: usize },
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
}

/// Lowercases and splits on whitespace and ASCII punctuation, dropping
/// empty pieces. Every lexical metric in this module shares this view of
/// the text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|piece| !piece.is_empty())
        .map(|piece| piece.to_lowercase())
        .collect()
}

/// Token count under plain whitespace splitting; the verbosity measure.
pub fn whitespace_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Fraction of candidate n-grams that also occur in the reference, each
/// reference occurrence usable once (clipped counting).
pub fn ngram_precision(candidate: &str, reference: &str, n: usize) -> Result<f64, MetricError> {
    if !(1..=4).contains(&n) {
        return Err(MetricError::UnsupportedN { n });
    }
    let candidate_tokens = tokenize(candidate);
    if candidate_tokens.len() < n {
        return Err(MetricError::TooShortCandidate {
            tokens: candidate_tokens.len(),
            n,
        });
    }
    let reference_tokens = tokenize(reference);
    let mut budget: HashMap<&[String], usize> = HashMap::new();
    for gram in reference_tokens.windows(n) {
        *budget.entry(gram).or_insert(0) += 1;
    }
    let mut matched = 0usize;
    let mut total = 0usize;
    for gram in candidate_tokens.windows(n) {
        total += 1;
        if let Some(remaining) = budget.get_mut(gram) {
            if *remaining > 0 {
                *remaining -= 1;
                matched += 1;
            }
        }
    }
    Ok(matched as f64 / total as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut previous = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            current[j + 1] = if token_a == token_b {
                previous[j] + 1
            } else {
                previous[j + 1].max(current[j])
            };
        }
        std::mem::swap(&mut previous, &mut current);
    }
    previous[b.len()]
}

/// F1 of the longest common subsequence over token sequences: recall is
/// LCS/|reference|, precision LCS/|candidate|.
pub fn lcs_f1(candidate: &str, reference: &str) -> Result<f64, MetricError> {
    let candidate_tokens = tokenize(candidate);
    if candidate_tokens.is_empty() {
        return Err(MetricError::EmptyTokens { side: "candidate" });
    }
    let reference_tokens = tokenize(reference);
    if reference_tokens.is_empty() {
        return Err(MetricError::EmptyTokens { side: "reference" });
    }
    let lcs = lcs_len(&candidate_tokens, &reference_tokens);
    if lcs == 0 {
        return Ok(0.0);
    }
    let precision = lcs as f64 / candidate_tokens.len() as f64;
    let recall = lcs as f64 / reference_tokens.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Whitespace-token count of the new response over that of the original.
pub fn length_ratio(new_response: &str, original: &str) -> Result<f64, MetricError> {
    let original_count = whitespace_token_count(original);
    if original_count == 0 {
        return Err(MetricError::EmptyOriginal);
    }
    Ok(whitespace_token_count(new_response) as f64 / original_count as f64)
}

impl SimilarityScores {
    /// Scores a regenerated response against the original. The n-gram map
    /// carries an entry for each n in 1..=4 the candidate is long enough
    /// for; the other two measures error on empty inputs.
    pub fn compute(new_response: &str, original: &str) -> Result<Self, MetricError> {
        let length_ratio = length_ratio(new_response, original)?;
        let lcs_f1 = lcs_f1(new_response, original)?;
        let mut ngram = BTreeMap::new();
        for n in 1..=4usize {
            match ngram_precision(new_response, original, n) {
                Ok(value) => {
                    ngram.insert(n as u8, value);
                }
                Err(MetricError::TooShortCandidate { .. }) => {}
                Err(other) => return Err(other),
            }
        }
        Ok(Self {
            ngram_precision: ngram,
            lcs_f1,
            length_ratio,
        })
    }
}

/// Plain cosine similarity for the optional embedding-based measure.
pub fn cosine_similarity(left: &[f64], right: &[f64]) -> Result<f64, MetricError> {
    if left.len() != right.len() {
        return Err(MetricError::DimensionMismatch {
            left: left.len(),
            right: right.len(),
        });
    }
    let dot: f64 = left.iter().zip(right).map(|(a, b)| a * b).sum();
    let norm_left = left.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_right = right.iter().map(|b| b * b).sum::<f64>().sqrt();
    if norm_left == 0.0 || norm_right == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok(dot / (norm_left * norm_right))
}

/// Chooses `k` of `len` indices uniformly without replacement,
/// deterministically for a given seed. The result is sorted.
pub fn sample_indices(len: usize, k: usize, seed: u64) -> Result<Vec<usize>, MetricError> {
    if k > len {
        return Err(MetricError::SampleTooLarge { k, len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..len);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Uniform sample of records for judging, in input order.
pub fn sample_for_judging<T>(records: &[T], k: usize, seed: u64) -> Result<Vec<&T>, MetricError> {
    Ok(sample_indices(records.len(), k, seed)?
        .into_iter()
        .map(|i| &records[i])
        .collect())
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

/// Who a pairwise comparison favored, after undoing position shuffling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairWinner {
    Original,
    New,
    Tie,
}

/// Which slot the judge picked, before undoing position shuffling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairPosition {
    A,
    B,
    Tie,
}

/// One pairwise judgment: the de-randomized winner, the raw reply, and the
/// position assignment that was used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub winner: PairWinner,
    pub rationale: String,
    pub new_in_position_a: bool,
}

/// Words of a judge reply with case preserved; splits on anything
/// non-alphanumeric so "**A**" and "Verdict: B" read cleanly.
fn verdict_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|word| !word.is_empty())
}

/// Reads the judge's slot choice out of a reply: the whole trimmed reply
/// when it is exactly the verdict, otherwise the first verdict-shaped word
/// of the first non-empty line. "A" and "B" match case-sensitively (the
/// lowercase letters are ordinary words); "tie" matches any case.
pub fn parse_pair_reply(reply: &str) -> Option<PairPosition> {
    let classify = |word: &str| match word {
        "A" => Some(PairPosition::A),
        "B" => Some(PairPosition::B),
        _ if word.eq_ignore_ascii_case("tie") => Some(PairPosition::Tie),
        _ => None,
    };
    let trimmed = reply.trim();
    if let Some(position) = classify(trimmed) {
        return Some(position);
    }
    let first_line = trimmed.lines().find(|line| !line.trim().is_empty())?;
    verdict_words(first_line).find_map(classify)
}

/// An alignment judgment: a 1-5 score, or a binary outcome when the
/// template asks for one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentJudgment {
    Score(u8),
    Pass,
    Fail,
}

/// Reads an alignment judgment from a reply: the first word that is an
/// integer in 1..=5 or one of pass/fail/aligned/misaligned (any case).
pub fn parse_alignment_reply(reply: &str) -> Option<AlignmentJudgment> {
    verdict_words(reply).find_map(|word| {
        if let Ok(score) = word.parse::<u8>() {
            return (1..=5).contains(&score).then_some(AlignmentJudgment::Score(score));
        }
        if word.eq_ignore_ascii_case("pass") || word.eq_ignore_ascii_case("aligned") {
            return Some(AlignmentJudgment::Pass);
        }
        if word.eq_ignore_ascii_case("fail") || word.eq_ignore_ascii_case("misaligned") {
            return Some(AlignmentJudgment::Fail);
        }
        None
    })
}

fn resolve_winner(position: PairPosition, new_in_position_a: bool) -> PairWinner {
    match (position, new_in_position_a) {
        (PairPosition::Tie, _) => PairWinner::Tie,
        (PairPosition::A, true) | (PairPosition::B, false) => PairWinner::New,
        (PairPosition::A, false) | (PairPosition::B, true) => PairWinner::Original,
    }
}

/// Asks the judge model to compare the original and regenerated answers,
/// with the answers placed in the given A/B order. A reply with no
/// readable verdict counts as a tie; the raw reply always travels in the
/// rationale. Inputs are expected to be non-empty.
pub async fn judge_pairwise(
    client: &ChatClient,
    prompts: &PromptSet,
    params: GenerationParams,
    model_name: &str,
    question: &str,
    original: &str,
    new: &str,
    new_in_position_a: bool,
) -> Result<JudgeVerdict, ClientError> {
    let (answer_a, answer_b) = if new_in_position_a {
        (new, original)
    } else {
        (original, new)
    };
    let messages = prompts.render_judge_pairwise(question, answer_a, answer_b);
    let reply = client
        .complete(&judge_request(messages, params, model_name))
        .await?;
    let winner = match parse_pair_reply(&reply.text) {
        Some(position) => resolve_winner(position, new_in_position_a),
        None => {
            tracing::warn!(reply = %reply.text, "pairwise judge reply has no verdict; counting a tie");
            PairWinner::Tie
        }
    };
    Ok(JudgeVerdict {
        winner,
        rationale: reply.text,
        new_in_position_a,
    })
}

/// Whether a regenerated response honors the system message it was
/// conditioned on. `Ok(None)` means the call succeeded but the reply held
/// no judgment; the caller excludes and counts it.
pub async fn judge_alignment(
    client: &ChatClient,
    prompts: &PromptSet,
    params: GenerationParams,
    model_name: &str,
    system: &str,
    response: &str,
) -> Result<Option<AlignmentJudgment>, ClientError> {
    let messages = prompts.render_judge_alignment(system, response);
    let reply = client
        .complete(&judge_request(messages, params, model_name))
        .await?;
    let judgment = parse_alignment_reply(&reply.text);
    if judgment.is_none() {
        tracing::warn!(reply = %reply.text, "alignment judge reply has no judgment");
    }
    Ok(judgment)
}

fn judge_request(messages: Vec<Message>, params: GenerationParams, model_name: &str) -> ChatRequest {
    ChatRequest::new(messages, params, model_name)
        .expect("judge prompts are a single user message")
}

/// One comparison to run: a question with its original and regenerated
/// answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseItem {
    pub id: String,
    pub question: String,
    pub original: String,
    pub new: String,
}

/// Outcome of one comparison; either the verdict fields or `error` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub winner: Option<PairWinner>,
    pub new_in_position_a: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Counts over a batch of comparisons. `judged` covers every comparison
/// that produced a verdict (unreadable replies count as ties); the two
/// error counters are excluded from it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinRateTable {
    pub judged: usize,
    pub new_wins: usize,
    pub original_wins: usize,
    pub ties: usize,
    pub errors: usize,
}

impl WinRateTable {
    pub fn from_records(records: &[PairwiseRecord]) -> Self {
        let mut table = Self::default();
        for record in records {
            match record.winner {
                Some(PairWinner::New) => table.new_wins += 1,
                Some(PairWinner::Original) => table.original_wins += 1,
                Some(PairWinner::Tie) => table.ties += 1,
                None => table.errors += 1,
            }
        }
        table.judged = table.new_wins + table.original_wins + table.ties;
        table
    }

    pub fn new_rate(&self) -> Option<f64> {
        (self.judged > 0).then(|| self.new_wins as f64 / self.judged as f64)
    }

    pub fn original_rate(&self) -> Option<f64> {
        (self.judged > 0).then(|| self.original_wins as f64 / self.judged as f64)
    }

    pub fn tie_rate(&self) -> Option<f64> {
        (self.judged > 0).then(|| self.ties as f64 / self.judged as f64)
    }
}

/// Judges a batch of comparisons. Position assignments are drawn up front
/// from the seed in input order, so results do not depend on completion
/// order; calls run under the client's concurrency limit. Items with an
/// empty field are recorded as errors without a call.
pub async fn run_pairwise_judging(
    client: &ChatClient,
    prompts: &PromptSet,
    params: GenerationParams,
    model_name: &str,
    items: &[PairwiseItem],
    seed: u64,
) -> (Vec<PairwiseRecord>, WinRateTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placements: Vec<bool> = items.iter().map(|_| rng.gen()).collect();

    let mut records: Vec<PairwiseRecord> = items
        .iter()
        .zip(&placements)
        .map(|(item, &new_in_position_a)| PairwiseRecord {
            id: item.id.clone(),
            winner: None,
            new_in_position_a,
            rationale: None,
            error: Some(ERROR_EMPTY_JUDGE_INPUT.to_string()),
        })
        .collect();

    let mut callable: Vec<usize> = Vec::new();
    let mut requests: Vec<ChatRequest> = Vec::new();
    for (index, item) in items.iter().enumerate() {
        if item.question.trim().is_empty()
            || item.original.trim().is_empty()
            || item.new.trim().is_empty()
        {
            continue;
        }
        let (answer_a, answer_b) = if placements[index] {
            (item.new.as_str(), item.original.as_str())
        } else {
            (item.original.as_str(), item.new.as_str())
        };
        let messages = prompts.render_judge_pairwise(&item.question, answer_a, answer_b);
        callable.push(index);
        requests.push(judge_request(messages, params, model_name));
    }

    for (subset_index, result) in client.complete_batch(&requests).await {
        let record = &mut records[callable[subset_index]];
        match result {
            Ok(reply) => {
                let position = parse_pair_reply(&reply.text).unwrap_or_else(|| {
                    tracing::warn!(id = %record.id, "pairwise judge reply has no verdict; counting a tie");
                    PairPosition::Tie
                });
                record.winner = Some(resolve_winner(position, record.new_in_position_a));
                record.rationale = Some(reply.text);
                record.error = None;
            }
            Err(error) => {
                tracing::warn!(id = %record.id, %error, "pairwise judge call failed");
                record.error = Some(error.code().to_string());
            }
        }
    }

    let table = WinRateTable::from_records(&records);
    (records, table)
}

/// One alignment check to run: a system message with the response that was
/// generated under it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentItem {
    pub id: String,
    pub system: String,
    pub response: String,
}

/// Outcome of one alignment check; either `judgment` or `error` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judgment: Option<AlignmentJudgment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregates over a batch of alignment checks. Scores feed the histogram
/// and the mean/median; binary outcomes feed the pass/fail counters;
/// `excluded` counts checks that produced no judgment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub judged: usize,
    pub excluded: usize,
    pub scores: BTreeMap<u8, usize>,
    pub pass: usize,
    pub fail: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_score: Option<f64>,
}

impl AlignmentSummary {
    pub fn from_records(records: &[AlignmentRecord]) -> Self {
        let mut summary = Self::default();
        let mut score_values = Vec::new();
        for record in records {
            match record.judgment {
                Some(AlignmentJudgment::Score(score)) => {
                    summary.judged += 1;
                    *summary.scores.entry(score).or_insert(0) += 1;
                    score_values.push(f64::from(score));
                }
                Some(AlignmentJudgment::Pass) => {
                    summary.judged += 1;
                    summary.pass += 1;
                }
                Some(AlignmentJudgment::Fail) => {
                    summary.judged += 1;
                    summary.fail += 1;
                }
                None => summary.excluded += 1,
            }
        }
        summary.mean_score = mean(&score_values);
        summary.median_score = median(&score_values);
        summary
    }
}

/// Judges a batch of alignment checks under the client's concurrency
/// limit. Unreadable replies and failed calls are excluded and counted;
/// items with an empty field are recorded as errors without a call.
pub async fn run_alignment_judging(
    client: &ChatClient,
    prompts: &PromptSet,
    params: GenerationParams,
    model_name: &str,
    items: &[AlignmentItem],
) -> (Vec<AlignmentRecord>, AlignmentSummary) {
    let mut records: Vec<AlignmentRecord> = items
        .iter()
        .map(|item| AlignmentRecord {
            id: item.id.clone(),
            judgment: None,
            error: Some(ERROR_EMPTY_JUDGE_INPUT.to_string()),
        })
        .collect();

    let mut callable: Vec<usize> = Vec::new();
    let mut requests: Vec<ChatRequest> = Vec::new();
    for (index, item) in items.iter().enumerate() {
        if item.system.trim().is_empty() || item.response.trim().is_empty() {
            continue;
        }
        let messages = prompts.render_judge_alignment(&item.system, &item.response);
        callable.push(index);
        requests.push(judge_request(messages, params, model_name));
    }

    for (subset_index, result) in client.complete_batch(&requests).await {
        let record = &mut records[callable[subset_index]];
        match result {
            Ok(reply) => match parse_alignment_reply(&reply.text) {
                Some(judgment) => {
                    record.judgment = Some(judgment);
                    record.error = None;
                }
                None => {
                    tracing::warn!(id = %record.id, reply = %reply.text, "alignment judge reply has no judgment");
                    record.error = Some(ERROR_UNPARSEABLE_JUDGE_REPLY.to_string());
                }
            },
            Err(error) => {
                tracing::warn!(id = %record.id, %error, "alignment judge call failed");
                record.error = Some(error.code().to_string());
            }
        }
    }

    let summary = AlignmentSummary::from_records(&records);
    (records, summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{MockScript, ScriptRule};
    use crate::client::{Backend, ChatClient, ClientConfig, MockBackend};
    use crate::model::CallPhase;
    use std::sync::Arc;

    // Brute-force oracles, deliberately built on different mechanisms than
    // the implementations they check: the n-gram oracle consumes reference
    // occurrences greedily one at a time, and the LCS oracle enumerates
    // every subsequence of the shorter side.

    fn oracle_ngram_precision(candidate: &[&str], reference: &[&str], n: usize) -> Option<f64> {
        if candidate.len() < n {
            return None;
        }
        let mut used = vec![false; reference.len().saturating_sub(n - 1)];
        let mut matched = 0usize;
        let mut total = 0usize;
        for gram in candidate.windows(n) {
            total += 1;
            let slot = reference
                .windows(n)
                .enumerate()
                .find(|(i, other)| !used[*i] && other == &gram);
            if let Some((i, _)) = slot {
                used[i] = true;
                matched += 1;
            }
        }
        Some(matched as f64 / total as f64)
    }

    fn is_subsequence(needle: &[&str], haystack: &[&str]) -> bool {
        let mut rest = haystack.iter();
        needle.iter().all(|wanted| rest.any(|seen| seen == wanted))
    }

    fn oracle_lcs(a: &[&str], b: &[&str]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        assert!(short.len() <= 16, "oracle is exponential in the shorter side");
        let mut best = 0usize;
        for mask in 0u32..(1 << short.len()) {
            let subsequence: Vec<&str> = short
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, token)| *token)
                .collect();
            if subsequence.len() > best && is_subsequence(&subsequence, long) {
                best = subsequence.len();
            }
        }
        best
    }

    fn oracle_lcs_f1(candidate: &[&str], reference: &[&str]) -> Option<f64> {
        if candidate.is_empty() || reference.is_empty() {
            return None;
        }
        let lcs = oracle_lcs(candidate, reference) as f64;
        if lcs == 0.0 {
            return Some(0.0);
        }
        let precision = lcs / candidate.len() as f64;
        let recall = lcs / reference.len() as f64;
        Some(2.0 * precision * recall / (precision + recall))
    }

    /// Every string over {a, b} of length 0..=max, as token vectors.
    fn all_token_vectors(max: usize) -> Vec<Vec<&'static str>> {
        let mut level: Vec<Vec<&'static str>> = vec![Vec::new()];
        let mut out = level.clone();
        for _ in 0..max {
            level = level
                .iter()
                .flat_map(|tokens| {
                    ["a", "b"].iter().map(move |sym| {
                        let mut next = tokens.clone();
                        next.push(sym);
                        next
                    })
                })
                .collect();
            out.extend(level.iter().cloned());
        }
        out
    }

    #[test]
    fn bigram_precision_with_repeats_is_clipped() {
        let value = ngram_precision("the cat the cat", "the cat", 2).unwrap();
        assert!((value - 1.0 / 3.0).abs() < 1e-12);
        let oracle =
            oracle_ngram_precision(&["the", "cat", "the", "cat"], &["the", "cat"], 2).unwrap();
        assert_eq!(value, oracle);
    }

    #[test]
    fn identical_texts_score_one_for_every_n() {
        for n in 1..=3 {
            assert_eq!(ngram_precision("a b c", "a b c", n).unwrap(), 1.0);
        }
    }

    #[test]
    fn disjoint_vocabularies_score_zero() {
        assert_eq!(ngram_precision("x y", "p q", 1).unwrap(), 0.0);
        assert_eq!(lcs_f1("x y", "p q").unwrap(), 0.0);
    }

    #[test]
    fn short_candidates_are_rejected() {
        assert!(matches!(
            ngram_precision("one", "one two", 2),
            Err(MetricError::TooShortCandidate { tokens: 1, n: 2 })
        ));
        assert!(matches!(
            ngram_precision("", "one", 1),
            Err(MetricError::TooShortCandidate { tokens: 0, n: 1 })
        ));
    }

    #[test]
    fn ngram_order_outside_one_to_four_is_rejected() {
        assert!(matches!(
            ngram_precision("a b c d e", "a b c d e", 5),
            Err(MetricError::UnsupportedN { n: 5 })
        ));
        assert!(matches!(
            ngram_precision("a", "a", 0),
            Err(MetricError::UnsupportedN { n: 0 })
        ));
    }

    #[test]
    fn tokenization_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", "world"]);
        assert_eq!(tokenize("don't stop"), vec!["don", "t", "stop"]);
        assert_eq!(tokenize("  \t\n "), Vec::<String>::new());
        assert_eq!(tokenize("3.14"), vec!["3", "14"]);
    }

    #[test]
    fn casing_and_punctuation_do_not_affect_scores() {
        assert_eq!(ngram_precision("The CAT.", "the cat", 2).unwrap(), 1.0);
        assert_eq!(lcs_f1("The CAT.", "the cat").unwrap(), 1.0);
    }

    #[test]
    fn lcs_f1_worked_example() {
        let value = lcs_f1("a b c d", "a c d e").unwrap();
        assert!((value - 0.75).abs() < 1e-12);
        let oracle = oracle_lcs_f1(&["a", "b", "c", "d"], &["a", "c", "d", "e"]).unwrap();
        assert_eq!(value, oracle);
    }

    #[test]
    fn lcs_f1_is_one_exactly_for_identical_token_sequences() {
        assert_eq!(lcs_f1("a b c", "a b c").unwrap(), 1.0);
        assert!(lcs_f1("a b c", "a b").unwrap() < 1.0);
        assert!(lcs_f1("a b", "b a").unwrap() < 1.0);
    }

    #[test]
    fn lcs_f1_rejects_empty_sides() {
        assert!(matches!(
            lcs_f1("", "a"),
            Err(MetricError::EmptyTokens { side: "candidate" })
        ));
        assert!(matches!(
            lcs_f1("a", "..."),
            Err(MetricError::EmptyTokens { side: "reference" })
        ));
    }

    #[test]
    fn ngram_precision_matches_the_oracle_exhaustively() {
        let vectors = all_token_vectors(4);
        for candidate in &vectors {
            for reference in &vectors {
                for n in 1..=4usize {
                    let expected = oracle_ngram_precision(candidate, reference, n);
                    let actual = ngram_precision(&candidate.join(" "), &reference.join(" "), n);
                    match expected {
                        Some(value) => assert_eq!(
                            actual.unwrap(),
                            value,
                            "candidate={candidate:?} reference={reference:?} n={n}"
                        ),
                        None => assert!(actual.is_err()),
                    }
                }
            }
        }
    }

    #[test]
    fn lcs_f1_matches_the_oracle_exhaustively() {
        let vectors = all_token_vectors(4);
        for candidate in &vectors {
            for reference in &vectors {
                let expected = oracle_lcs_f1(candidate, reference);
                let actual = lcs_f1(&candidate.join(" "), &reference.join(" "));
                match expected {
                    Some(value) => assert_eq!(
                        actual.unwrap(),
                        value,
                        "candidate={candidate:?} reference={reference:?}"
                    ),
                    None => assert!(actual.is_err()),
                }
            }
        }
    }

    #[test]
    fn length_ratio_counts_whitespace_tokens() {
        assert_eq!(length_ratio("a b c", "a b").unwrap(), 1.5);
        assert_eq!(length_ratio("one", "one two, three!").unwrap(), 1.0 / 3.0);
        assert!(matches!(
            length_ratio("a", "   "),
            Err(MetricError::EmptyOriginal)
        ));
    }

    #[test]
    fn similarity_scores_cover_available_ngram_orders() {
        let scores = SimilarityScores::compute("a b", "a b c").unwrap();
        assert_eq!(
            scores.ngram_precision.keys().copied().collect::<Vec<_>>(),
            vec![1, 2]
        );
        assert_eq!(scores.ngram_precision[&1], 1.0);
        assert_eq!(scores.ngram_precision[&2], 1.0);
        assert!((scores.length_ratio - 2.0 / 3.0).abs() < 1e-12);

        let identical = SimilarityScores::compute("a b c d e", "a b c d e").unwrap();
        assert_eq!(identical.ngram_precision.len(), 4);
        assert!(identical.ngram_precision.values().all(|v| *v == 1.0));
        assert_eq!(identical.lcs_f1, 1.0);
        assert_eq!(identical.length_ratio, 1.0);
    }

    #[test]
    fn cosine_similarity_basics() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(MetricError::DimensionMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(MetricError::ZeroVector)
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_without_replacement() {
        let records: Vec<usize> = (0..10_000).collect();
        let first = sample_for_judging(&records, 1_000, 42).unwrap();
        let second = sample_for_judging(&records, 1_000, 42).unwrap();
        assert_eq!(first, second);
        let distinct: std::collections::BTreeSet<_> = first.iter().collect();
        assert_eq!(distinct.len(), 1_000);
        let other = sample_for_judging(&records, 1_000, 43).unwrap();
        assert_ne!(first, other);
    }

    #[test]
    fn sampling_edge_cases() {
        let records = vec!["a", "b", "c"];
        assert_eq!(
            sample_for_judging(&records, 3, 0).unwrap(),
            vec![&"a", &"b", &"c"]
        );
        assert!(matches!(
            sample_for_judging(&records, 4, 0),
            Err(MetricError::SampleTooLarge { k: 4, len: 3 })
        ));
        assert!(sample_for_judging(&records, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn mean_and_median_aggregates() {
        assert_eq!(mean(&[]), None);
        assert_eq!(median(&[]), None);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), Some(2.0));
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn pair_replies_parse_conservatively() {
        assert_eq!(parse_pair_reply("A"), Some(PairPosition::A));
        assert_eq!(parse_pair_reply(" B \n"), Some(PairPosition::B));
        assert_eq!(parse_pair_reply("tie"), Some(PairPosition::Tie));
        assert_eq!(parse_pair_reply("TIE"), Some(PairPosition::Tie));
        assert_eq!(parse_pair_reply("**A**"), Some(PairPosition::A));
        assert_eq!(parse_pair_reply("Verdict: B"), Some(PairPosition::B));
        assert_eq!(parse_pair_reply("a"), None);
        assert_eq!(parse_pair_reply("both answers are fine"), None);
        assert_eq!(parse_pair_reply(""), None);
    }

    #[test]
    fn alignment_replies_parse_scores_and_binary_outcomes() {
        assert_eq!(parse_alignment_reply("5"), Some(AlignmentJudgment::Score(5)));
        assert_eq!(parse_alignment_reply("4/5"), Some(AlignmentJudgment::Score(4)));
        assert_eq!(
            parse_alignment_reply("Score: 3"),
            Some(AlignmentJudgment::Score(3))
        );
        assert_eq!(parse_alignment_reply("aligned"), Some(AlignmentJudgment::Pass));
        assert_eq!(parse_alignment_reply("PASS"), Some(AlignmentJudgment::Pass));
        assert_eq!(
            parse_alignment_reply("MISALIGNED"),
            Some(AlignmentJudgment::Fail)
        );
        assert_eq!(parse_alignment_reply("fail"), Some(AlignmentJudgment::Fail));
        assert_eq!(parse_alignment_reply("0"), None);
        assert_eq!(parse_alignment_reply("6 out of 10"), None);
        assert_eq!(parse_alignment_reply(""), None);
        assert_eq!(parse_alignment_reply("no idea"), None);
    }

    fn judge_client(script: MockScript) -> ChatClient {
        let backend = Arc::new(MockBackend::from_script(script).unwrap());
        ChatClient::new(backend, &ClientConfig::default()).unwrap()
    }

    fn judge_params() -> GenerationParams {
        GenerationParams::for_phase(CallPhase::Judge)
    }

    #[tokio::test]
    async fn pairwise_winner_is_derandomized() {
        let client = judge_client(MockScript::respond_always("A"));
        let prompts = PromptSet::builtin();
        for (new_in_a, expected) in [(true, PairWinner::New), (false, PairWinner::Original)] {
            let verdict = judge_pairwise(
                &client,
                &prompts,
                judge_params(),
                "m",
                "q?",
                "old answer",
                "new answer",
                new_in_a,
            )
            .await
            .unwrap();
            assert_eq!(verdict.winner, expected);
            assert_eq!(verdict.new_in_position_a, new_in_a);
            assert_eq!(verdict.rationale, "A");
        }
    }

    #[tokio::test]
    async fn pairwise_b_with_new_at_a_means_original() {
        let client = judge_client(MockScript::respond_always("B"));
        let prompts = PromptSet::builtin();
        let verdict = judge_pairwise(
            &client,
            &prompts,
            judge_params(),
            "m",
            "q?",
            "old",
            "new",
            true,
        )
        .await
        .unwrap();
        assert_eq!(verdict.winner, PairWinner::Original);
    }

    #[tokio::test]
    async fn pairwise_garbage_reply_is_a_tie() {
        let client = judge_client(MockScript::respond_always("I cannot decide between them."));
        let prompts = PromptSet::builtin();
        let verdict = judge_pairwise(
            &client,
            &prompts,
            judge_params(),
            "m",
            "q?",
            "old",
            "new",
            false,
        )
        .await
        .unwrap();
        assert_eq!(verdict.winner, PairWinner::Tie);
        assert_eq!(verdict.rationale, "I cannot decide between them.");
    }

    #[tokio::test]
    async fn pairwise_prompt_places_answers_as_assigned() {
        let script = MockScript::respond_always("tie");
        let backend = Arc::new(MockBackend::from_script(script).unwrap());
        let client = ChatClient::new(backend.clone() as Arc<dyn Backend>, &ClientConfig::default()).unwrap();
        let prompts = PromptSet::builtin();
        judge_pairwise(
            &client,
            &prompts,
            judge_params(),
            "m",
            "q?",
            "OLD_TEXT",
            "NEW_TEXT",
            true,
        )
        .await
        .unwrap();
        let calls = backend.recorded_calls();
        assert_eq!(calls.len(), 1);
        let payload = calls[0].payload.clone();
        let new_at = payload.find("NEW_TEXT").unwrap();
        let old_at = payload.find("OLD_TEXT").unwrap();
        assert!(new_at < old_at, "new answer should occupy position A");
    }

    #[tokio::test]
    async fn biased_judge_splits_roughly_evenly_under_randomization() {
        let client = judge_client(MockScript::respond_always("A"));
        let prompts = PromptSet::builtin();
        let items: Vec<PairwiseItem> = (0..200)
            .map(|i| PairwiseItem {
                id: format!("item-{i}"),
                question: "q?".to_string(),
                original: "old".to_string(),
                new: "new".to_string(),
            })
            .collect();
        let (records, table) =
            run_pairwise_judging(&client, &prompts, judge_params(), "m", &items, 7).await;
        assert_eq!(records.len(), 200);
        assert_eq!(table.judged, 200);
        assert_eq!(table.errors, 0);
        assert_eq!(table.ties, 0);
        assert_eq!(table.new_wins + table.original_wins, 200);
        // An always-A judge must win exactly when the new answer sat at A.
        for record in &records {
            let expected = if record.new_in_position_a {
                PairWinner::New
            } else {
                PairWinner::Original
            };
            assert_eq!(record.winner, Some(expected));
        }
        // The placement coin must actually vary.
        assert!(table.new_wins > 50 && table.original_wins > 50);
    }

    #[tokio::test]
    async fn pairwise_batches_are_deterministic_given_a_seed() {
        let prompts = PromptSet::builtin();
        let items: Vec<PairwiseItem> = (0..40)
            .map(|i| PairwiseItem {
                id: format!("item-{i}"),
                question: format!("question {i}"),
                original: "old".to_string(),
                new: "new".to_string(),
            })
            .collect();
        let run = |seed| {
            let client = judge_client(MockScript::respond_always("B"));
            let prompts = &prompts;
            let items = &items;
            async move {
                run_pairwise_judging(&client, prompts, judge_params(), "m", items, seed).await
            }
        };
        let (first, _) = run(11).await;
        let (second, _) = run(11).await;
        assert_eq!(first, second);
        let (other, _) = run(12).await;
        assert_ne!(first, other);
    }

    #[tokio::test]
    async fn pairwise_empty_inputs_are_recorded_without_calls() {
        let script = MockScript::respond_always("A");
        let backend = Arc::new(MockBackend::from_script(script).unwrap());
        let client = ChatClient::new(backend.clone() as Arc<dyn Backend>, &ClientConfig::default()).unwrap();
        let prompts = PromptSet::builtin();
        let items = vec![
            PairwiseItem {
                id: "good".to_string(),
                question: "q?".to_string(),
                original: "old".to_string(),
                new: "new".to_string(),
            },
            PairwiseItem {
                id: "hollow".to_string(),
                question: "q?".to_string(),
                original: "  ".to_string(),
                new: "new".to_string(),
            },
        ];
        let (records, table) =
            run_pairwise_judging(&client, &prompts, judge_params(), "m", &items, 1).await;
        assert_eq!(backend.recorded_calls().len(), 1);
        assert_eq!(records[1].error.as_deref(), Some(ERROR_EMPTY_JUDGE_INPUT));
        assert_eq!(records[1].winner, None);
        assert_eq!(table.judged, 1);
        assert_eq!(table.errors, 1);
    }

    #[tokio::test]
    async fn alignment_run_aggregates_and_excludes() {
        let script = MockScript {
            rules: vec![
                ScriptRule::respond_contains("sys-five", "5"),
                ScriptRule::respond_contains("sys-three", "3"),
                ScriptRule::respond_contains("sys-pass", "aligned"),
                ScriptRule::respond_contains("sys-mumble", "hard to say"),
            ],
            default: Some("1".to_string()),
        };
        let client = judge_client(script);
        let prompts = PromptSet::builtin();
        let items: Vec<AlignmentItem> = [
            ("a", "sys-five"),
            ("b", "sys-three"),
            ("c", "sys-pass"),
            ("d", "sys-mumble"),
        ]
        .into_iter()
        .map(|(id, system)| AlignmentItem {
            id: id.to_string(),
            system: system.to_string(),
            response: "the response".to_string(),
        })
        .collect();
        let (records, summary) =
            run_alignment_judging(&client, &prompts, judge_params(), "m", &items).await;
        assert_eq!(records[0].judgment, Some(AlignmentJudgment::Score(5)));
        assert_eq!(records[1].judgment, Some(AlignmentJudgment::Score(3)));
        assert_eq!(records[2].judgment, Some(AlignmentJudgment::Pass));
        assert_eq!(
            records[3].error.as_deref(),
            Some(ERROR_UNPARSEABLE_JUDGE_REPLY)
        );
        assert_eq!(summary.judged, 3);
        assert_eq!(summary.excluded, 1);
        assert_eq!(summary.pass, 1);
        assert_eq!(summary.fail, 0);
        assert_eq!(summary.scores, BTreeMap::from([(3, 1), (5, 1)]));
        assert_eq!(summary.mean_score, Some(4.0));
        assert_eq!(summary.median_score, Some(4.0));
    }

    #[tokio::test]
    async fn judge_calls_carry_judge_decoding_parameters() {
        let script = MockScript::respond_always("tie");
        let backend = Arc::new(MockBackend::from_script(script).unwrap());
        let client = ChatClient::new(backend.clone() as Arc<dyn Backend>, &ClientConfig::default()).unwrap();
        let prompts = PromptSet::builtin();
        judge_pairwise(
            &client,
            &prompts,
            judge_params(),
            "judge-model",
            "q?",
            "old",
            "new",
            true,
        )
        .await
        .unwrap();
        let calls = backend.recorded_calls();
        assert_eq!(calls[0].phase, CallPhase::Judge);
        assert_eq!(calls[0].model, "judge-model");
        assert_eq!(calls[0].temperature, 0.7);
        assert_eq!(calls[0].max_tokens, 256);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn token_vector() -> impl Strategy<Value = Vec<&'static str>> {
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 0..10)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn ngram_precision_agrees_with_the_oracle(
                candidate in token_vector(),
                reference in token_vector(),
                n in 1..=4usize,
            ) {
                let expected = oracle_ngram_precision(&candidate, &reference, n);
                let actual = ngram_precision(&candidate.join(" "), &reference.join(" "), n);
                match expected {
                    Some(value) => prop_assert_eq!(actual.unwrap(), value),
                    None => prop_assert!(actual.is_err()),
                }
            }

            #[test]
            fn lcs_f1_agrees_with_the_oracle(
                candidate in token_vector(),
                reference in token_vector(),
            ) {
                let expected = oracle_lcs_f1(&candidate, &reference);
                let actual = lcs_f1(&candidate.join(" "), &reference.join(" "));
                match expected {
                    Some(value) => prop_assert_eq!(actual.unwrap(), value),
                    None => prop_assert!(actual.is_err()),
                }
            }

            #[test]
            fn lcs_f1_is_symmetric(a in token_vector(), b in token_vector()) {
                prop_assume!(!a.is_empty() && !b.is_empty());
                let forward = lcs_f1(&a.join(" "), &b.join(" ")).unwrap();
                let backward = lcs_f1(&b.join(" "), &a.join(" ")).unwrap();
                prop_assert_eq!(forward, backward);
            }

            #[test]
            fn unit_scores_mean_identical_token_sequences(
                a in token_vector(),
                b in token_vector(),
            ) {
                prop_assume!(!a.is_empty() && !b.is_empty());
                let f1 = lcs_f1(&a.join(" "), &b.join(" ")).unwrap();
                prop_assert_eq!(f1 == 1.0, a == b);
                let unigram = ngram_precision(&a.join(" "), &b.join(" "), 1).unwrap();
                if a == b {
                    prop_assert_eq!(unigram, 1.0);
                }
            }

            #[test]
            fn scores_stay_in_range(a in token_vector(), b in token_vector(), n in 1..=4usize) {
                if let Ok(p) = ngram_precision(&a.join(" "), &b.join(" "), n) {
                    prop_assert!((0.0..=1.0).contains(&p));
                }
                if !a.is_empty() && !b.is_empty() {
                    let f1 = lcs_f1(&a.join(" "), &b.join(" ")).unwrap();
                    prop_assert!((0.0..=1.0).contains(&f1));
                }
            }

            #[test]
            fn sampling_without_replacement_is_uniform_in_support(
                len in 1..200usize,
                seed in any::<u64>(),
            ) {
                let k = len / 2;
                let indices = sample_indices(len, k, seed).unwrap();
                prop_assert_eq!(indices.len(), k);
                let distinct: std::collections::BTreeSet<_> = indices.iter().collect();
                prop_assert_eq!(distinct.len(), k);
                prop_assert!(indices.iter().all(|i| *i < len));
                let sorted = {
                    let mut copy = indices.clone();
                    copy.sort_unstable();
                    copy
                };
                prop_assert_eq!(indices, sorted);
            }
        }
    }
}
