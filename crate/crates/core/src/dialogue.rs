//! Stage-1 description/abnormality dialogues, stage-2 multi-image reasoning
//! dialogues, and interleaved multi-turn dialogues, plus mechanical
//! validation.
//!
//! Chat replies for multi-turn dialogues use `Q:` / `A:` line pairs. In
//! interleaved dialogues each assistant turn embeds exactly one
//! square-bracketed image prompt, which stays in the text until assembly
//! replaces it with the image placeholder.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::mock::markers;
use crate::backend::{parse_numbered_list, BackendError, ChatBackend, ChatRequest, Gateway};
use crate::prompt::{parse_sd_prompt, repetition_rate, FilterConfig, PromptCorpus};
use crate::schema::{Dialogue, DialogueKind, SdPrompt, Speaker, Turn};
use crate::template::{render_template, AbilitySpec, InContextPool, TemplateError, TemplateKind, TemplateSet};

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("assistant answer over {limit} characters after regeneration")]
    TooLong { limit: usize },
    #[error("question pool is empty for ability `{0}`")]
    EmptyQuestionPool(String),
    #[error("only {got} distinct phases after retries, wanted {want}")]
    InsufficientPhases { got: usize, want: usize },
    #[error("unparseable dialogue content: {0}")]
    Unparseable(String),
    #[error("malformed reply: {0}")]
    BadReply(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// The multi-image reasoning relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Similarity,
    Difference,
    LogicalRelation,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] =
        [RelationKind::Similarity, RelationKind::Difference, RelationKind::LogicalRelation];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Similarity => "similarity",
            RelationKind::Difference => "difference",
            RelationKind::LogicalRelation => "logical_relation",
        }
    }
}

/// Two prompts generated concurrently under one relation, plus their captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPrompt {
    pub pair_id: String,
    pub first: SdPrompt,
    pub second: SdPrompt,
    pub captions: (String, String),
    pub relation: RelationKind,
}

/// A sequence of pairwise-distinct phases driving interleaved dialogues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseList {
    pub phases: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionForm {
    YesNo,
    Wh,
    EitherOr,
}

/// Length and diversity limits applied to generated dialogues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DialogueLimits {
    pub max_answer_chars: usize,
    pub allowed_question_forms: BTreeSet<QuestionForm>,
}

impl Default for DialogueLimits {
    fn default() -> Self {
        DialogueLimits {
            max_answer_chars: 500,
            allowed_question_forms: [QuestionForm::YesNo, QuestionForm::Wh, QuestionForm::EitherOr]
                .into_iter()
                .collect(),
        }
    }
}

impl DialogueLimits {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_answer_chars == 0 {
            return Err("max_answer_chars must be positive".into());
        }
        Ok(())
    }
}

/// Heuristic question-form tagging, used for diversity reporting.
pub fn classify_question(text: &str) -> Option<QuestionForm> {
    let lower = text.trim().to_lowercase();
    let first = lower.split_whitespace().next()?;
    const WH: &[&str] = &["what", "which", "who", "where", "when", "why", "how", "describe"];
    const YES_NO: &[&str] =
        &["is", "are", "do", "does", "did", "can", "could", "will", "would", "has", "have"];
    if WH.contains(&first) {
        Some(QuestionForm::Wh)
    } else if YES_NO.contains(&first) {
        if lower.contains(" or ") {
            Some(QuestionForm::EitherOr)
        } else {
            Some(QuestionForm::YesNo)
        }
    } else {
        None
    }
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Calls the chat backend for up to `n` unique description questions.
pub fn generate_question_pool(
    ability: &AbilitySpec,
    n: usize,
    templates: &TemplateSet,
    pool: &InContextPool,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<Vec<String>, DialogueError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut slots = BTreeMap::new();
    slots.insert("n_questions".to_string(), n.to_string());
    let body = render_template(templates, TemplateKind::QuestionPoolGen, ability, pool, &slots)?;
    let req = ChatRequest::new("You are a data generation assistant.", body).with_seed(seed);
    let reply = chat.chat_complete(&req)?;
    let items = parse_numbered_list(&reply)?;
    let mut seen = BTreeSet::new();
    let mut questions = Vec::new();
    for item in items {
        if seen.insert(item.to_lowercase()) {
            questions.push(item);
            if questions.len() == n {
                break;
            }
        }
    }
    Ok(questions)
}

fn complete_with_length_retry(
    chat: &Gateway<dyn ChatBackend>,
    req: &ChatRequest,
    limit: usize,
    check: impl Fn(&str) -> bool,
) -> Result<String, DialogueError> {
    let reply = chat.chat_complete(req)?;
    if check(&reply) {
        return Ok(reply.trim().to_string());
    }
    // One regeneration attempt with an explicit length reminder.
    let mut retry = req.clone();
    retry
        .messages
        .push(crate::backend::ChatMessage {
            role: "user".into(),
            content: format!("Keep every answer under {limit} characters. Regenerate."),
        });
    let reply = chat.chat_complete(&retry)?;
    if check(&reply) {
        Ok(reply.trim().to_string())
    } else {
        Err(DialogueError::TooLong { limit })
    }
}

/// Generates a single question/answer description dialogue for one prompt.
/// The question is drawn deterministically from the ability's question pool;
/// only the answer comes from the backend.
pub fn generate_stage1_dialogue(
    prompt: &SdPrompt,
    ability: &AbilitySpec,
    limits: &DialogueLimits,
    templates: &TemplateSet,
    pool: &InContextPool,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<Dialogue, DialogueError> {
    if ability.question_pool.is_empty() {
        return Err(DialogueError::EmptyQuestionPool(ability.ability_id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let question = ability.question_pool[rng.gen_range(0..ability.question_pool.len())].clone();
    let mut slots = BTreeMap::new();
    slots.insert("question".to_string(), question.clone());
    slots.insert("prompt".to_string(), prompt.raw_text.clone());
    let body = render_template(templates, TemplateKind::Stage1Dialogue, ability, pool, &slots)?;
    let req = ChatRequest::new("You are a data generation assistant.", body).with_seed(seed);
    let limit = limits.max_answer_chars;
    let answer = complete_with_length_retry(chat, &req, limit, |r| char_len(r.trim()) <= limit)?;
    if answer.is_empty() {
        return Err(DialogueError::BadReply("empty answer".into()));
    }
    let kind = if ability.ability_id.contains("abnormal") {
        DialogueKind::Abnormality
    } else {
        DialogueKind::Stage1Description
    };
    Ok(Dialogue { turns: vec![Turn::human(question), Turn::assistant(answer)], kind })
}

fn passes_filter(prompt: &SdPrompt, cfg: &FilterConfig, corpus: &PromptCorpus) -> bool {
    prompt.keywords.len() <= cfg.max_keywords
        && repetition_rate(prompt, corpus) < cfg.duplicate_threshold
}

/// Generates up to `n` paired prompts for one relation, with captions from a
/// second chat call. Pairs with either member rejected by filtering are
/// dropped; the dropped raw texts are returned for the audit log.
#[allow(clippy::too_many_arguments)]
pub fn generate_pair_prompts(
    relation: RelationKind,
    n: usize,
    ability: &AbilitySpec,
    templates: &TemplateSet,
    pool: &InContextPool,
    cfg: &FilterConfig,
    corpus: &mut PromptCorpus,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<(Vec<PairedPrompt>, Vec<String>), DialogueError> {
    let mut slots = BTreeMap::new();
    slots.insert("relation".to_string(), relation.as_str().to_string());
    slots.insert("n_pairs".to_string(), n.to_string());
    let body = render_template(templates, TemplateKind::PairedPromptGen, ability, pool, &slots)?;
    let req = ChatRequest::new("You are a data generation assistant.", body).with_seed(seed);
    let reply = chat.chat_complete(&req)?;
    let lines = parse_numbered_list(&reply)?;
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if pairs.len() == n {
            break;
        }
        let Some((first_raw, second_raw)) = line.split_once('|') else {
            dropped.push(line.clone());
            continue;
        };
        let parsed = (
            parse_sd_prompt(first_raw.trim(), &ability.ability_id),
            parse_sd_prompt(second_raw.trim(), &ability.ability_id),
        );
        let (Ok(mut first), Ok(mut second)) = parsed else {
            dropped.push(line.clone());
            continue;
        };
        if !passes_filter(&first, cfg, corpus) || !passes_filter(&second, cfg, corpus) {
            dropped.push(line.clone());
            continue;
        }
        corpus.insert(&first);
        corpus.insert(&second);
        let pair_id = format!("{}-pair-{:04}", ability.ability_id, i);
        first.pair_id = Some(pair_id.clone());
        second.pair_id = Some(pair_id.clone());
        let captions = generate_captions(relation, &first, &second, chat, seed.wrapping_add(i as u64))?;
        pairs.push(PairedPrompt { pair_id, first, second, captions, relation });
    }
    Ok((pairs, dropped))
}

fn generate_captions(
    relation: RelationKind,
    first: &SdPrompt,
    second: &SdPrompt,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<(String, String), DialogueError> {
    let body = format!(
        "{}\nRelation: {}\nFirst: {}\nSecond: {}\n\
         Write one short caption for each image as a numbered list of two items.",
        markers::CAPTION_PAIR,
        relation.as_str(),
        first.raw_text,
        second.raw_text,
    );
    let req = ChatRequest::new("You are a data generation assistant.", body).with_seed(seed);
    let reply = chat.chat_complete(&req)?;
    let items = parse_numbered_list(&reply)?;
    if items.len() < 2 {
        return Err(DialogueError::BadReply("expected two captions".into()));
    }
    Ok((items[0].clone(), items[1].clone()))
}

/// Parses a `Q:` / `A:` reply into alternating turns. Continuation lines are
/// appended to the current turn.
fn parse_qa_reply(reply: &str) -> Result<Vec<Turn>, DialogueError> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in reply.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(q) = trimmed.strip_prefix("Q:") {
            turns.push(Turn::human(q.trim()));
        } else if let Some(a) = trimmed.strip_prefix("A:") {
            if !matches!(turns.last(), Some(t) if t.speaker == Speaker::Human) {
                return Err(DialogueError::BadReply("answer without a preceding question".into()));
            }
            turns.push(Turn::assistant(a.trim()));
        } else if let Some(last) = turns.last_mut() {
            last.text.push('\n');
            last.text.push_str(trimmed);
        }
    }
    if turns.is_empty() {
        return Err(DialogueError::BadReply("no Q:/A: lines in reply".into()));
    }
    Ok(turns)
}

/// Generates a multi-image dialogue over a pair's relation. The dialogue
/// always references exactly the pair's two images.
pub fn generate_multi_image_dialogue(
    pair: &PairedPrompt,
    limits: &DialogueLimits,
    ability: &AbilitySpec,
    templates: &TemplateSet,
    pool: &InContextPool,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<Dialogue, DialogueError> {
    let mut slots = BTreeMap::new();
    slots.insert("relation".to_string(), pair.relation.as_str().to_string());
    slots.insert("first_prompt".to_string(), pair.first.raw_text.clone());
    slots.insert("second_prompt".to_string(), pair.second.raw_text.clone());
    slots.insert("first_caption".to_string(), pair.captions.0.clone());
    slots.insert("second_caption".to_string(), pair.captions.1.clone());
    let body = render_template(templates, TemplateKind::MultiImageDialogue, ability, pool, &slots)?;
    let req = ChatRequest::new("You are a data generation assistant.", body).with_seed(seed);
    let limit = limits.max_answer_chars;
    let reply = complete_with_length_retry(chat, &req, limit, |r| {
        parse_qa_reply(r)
            .map(|turns| {
                turns
                    .iter()
                    .filter(|t| t.speaker == Speaker::Assistant)
                    .all(|t| char_len(&t.text) <= limit)
            })
            .unwrap_or(true) // structural problems surface below, not as TooLong
    })?;
    let turns = parse_qa_reply(&reply)?;
    let dialogue = Dialogue { turns, kind: DialogueKind::MultiImage };
    dialogue.check_structure().map_err(|e| DialogueError::BadReply(e.to_string()))?;
    Ok(dialogue)
}

/// Generates `k` pairwise-distinct phases (case-insensitive), retrying a few
/// times if the backend repeats itself.
pub fn generate_phase_list(
    topic_domain: &str,
    k: usize,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<PhaseList, DialogueError> {
    let mut phases: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for attempt in 0..4u64 {
        let body = format!(
            "{}\nDomain: {}\nCount: {}\n\
             Produce a numbered list of short, non-repeating phases.",
            markers::PHASE_LIST,
            topic_domain,
            k - phases.len(),
        );
        let req = ChatRequest::new("You are a data generation assistant.", body)
            .with_seed(seed.wrapping_add(attempt));
        let reply = chat.chat_complete(&req)?;
        if let Ok(items) = parse_numbered_list(&reply) {
            for item in items {
                if seen.insert(item.to_lowercase()) {
                    phases.push(item);
                }
            }
        }
        if phases.len() >= k {
            phases.truncate(k);
            return Ok(PhaseList { phases });
        }
    }
    Err(DialogueError::InsufficientPhases { got: phases.len(), want: k })
}

/// Finds `[...]` segments in a turn. Errors on unbalanced brackets.
pub fn extract_bracketed(text: &str) -> Result<Vec<String>, DialogueError> {
    let mut segments = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match c {
            '[' => {
                if start.is_some() {
                    return Err(DialogueError::Unparseable(format!("nested `[` in `{text}`")));
                }
                start = Some(i);
            }
            ']' => match start.take() {
                Some(s) => segments.push(text[s + 1..i].to_string()),
                None => return Err(DialogueError::Unparseable(format!("stray `]` in `{text}`"))),
            },
            _ => {}
        }
    }
    if start.is_some() {
        return Err(DialogueError::Unparseable(format!("unclosed `[` in `{text}`")));
    }
    Ok(segments)
}

/// Generates an interleaved multi-turn dialogue: one assistant turn per phase,
/// each embedding exactly one bracketed image prompt. Bracketed segments are
/// parsed into `image_prompts`; the bracket text stays in place until
/// assembly substitutes the placeholder.
#[allow(clippy::too_many_arguments)]
pub fn generate_interleaved_dialogue(
    phases: &PhaseList,
    limits: &DialogueLimits,
    ability: &AbilitySpec,
    templates: &TemplateSet,
    pool: &InContextPool,
    cfg: &FilterConfig,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<Dialogue, DialogueError> {
    let phase_block = phases
        .phases
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {p}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let mut slots = BTreeMap::new();
    slots.insert("phases".to_string(), phase_block);
    slots.insert("n_phases".to_string(), phases.phases.len().to_string());
    let body = render_template(templates, TemplateKind::InterleavedDialogue, ability, pool, &slots)?;
    let req = ChatRequest::new("You are a data generation assistant.", body).with_seed(seed);
    let limit = limits.max_answer_chars;
    let reply = complete_with_length_retry(chat, &req, limit, |r| {
        parse_qa_reply(r)
            .map(|turns| {
                turns.iter().filter(|t| t.speaker == Speaker::Assistant).all(|t| {
                    substituted_len(&t.text).map_or(true, |len| len <= limit)
                })
            })
            .unwrap_or(true)
    })?;
    let mut turns = parse_qa_reply(&reply)?;
    let assistant_count = turns.iter().filter(|t| t.speaker == Speaker::Assistant).count();
    if assistant_count != phases.phases.len() {
        return Err(DialogueError::BadReply(format!(
            "expected {} assistant turns, got {assistant_count}",
            phases.phases.len()
        )));
    }
    for turn in turns.iter_mut().filter(|t| t.speaker == Speaker::Assistant) {
        let segments = extract_bracketed(&turn.text)?;
        if segments.len() != 1 {
            return Err(DialogueError::Unparseable(format!(
                "assistant turn must embed exactly one bracketed prompt, found {}",
                segments.len()
            )));
        }
        let prompt = parse_sd_prompt(&segments[0], &ability.ability_id)
            .map_err(|e| DialogueError::Unparseable(e.to_string()))?;
        if prompt.keywords.len() > cfg.max_keywords {
            return Err(DialogueError::Unparseable(format!(
                "bracketed prompt has {} keywords (limit {})",
                prompt.keywords.len(),
                cfg.max_keywords
            )));
        }
        turn.image_prompts = vec![prompt];
    }
    let dialogue = Dialogue { turns, kind: DialogueKind::Interleaved };
    dialogue.check_structure().map_err(|e| DialogueError::BadReply(e.to_string()))?;
    Ok(dialogue)
}

/// Length of an assistant turn once its bracketed prompts are replaced by the
/// image placeholder. None if brackets are unbalanced.
fn substituted_len(text: &str) -> Option<usize> {
    let segments = extract_bracketed(text).ok()?;
    let mut len = char_len(text);
    for seg in segments {
        len = len - char_len(&seg) - 2 + char_len(crate::schema::IMAGE_PLACEHOLDER);
    }
    Some(len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DialogueViolationKind {
    Alternation,
    EmptyAssistant,
    TooLong { chars: usize, limit: usize },
    UnexpectedImagePrompts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueViolation {
    pub turn: usize,
    #[serde(flatten)]
    pub kind: DialogueViolationKind,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DialogueReport {
    pub violations: Vec<DialogueViolation>,
    /// Question-form tags per human turn, for diversity reporting.
    pub question_forms: Vec<Option<QuestionForm>>,
}

impl DialogueReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Mechanical dialogue checks: alternation starting with human, non-empty
/// assistant turns, per-turn length limit, and image prompts only on
/// interleaved dialogues. Interleaved turn lengths are measured with brackets
/// substituted by the placeholder, matching the assembled form.
pub fn validate_dialogue(d: &Dialogue, limits: &DialogueLimits) -> DialogueReport {
    let mut report = DialogueReport::default();
    for (i, turn) in d.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Assistant };
        if turn.speaker != expected {
            report
                .violations
                .push(DialogueViolation { turn: i, kind: DialogueViolationKind::Alternation });
        }
        match turn.speaker {
            Speaker::Human => report.question_forms.push(classify_question(&turn.text)),
            Speaker::Assistant => {
                if turn.text.trim().is_empty() {
                    report
                        .violations
                        .push(DialogueViolation { turn: i, kind: DialogueViolationKind::EmptyAssistant });
                }
                let chars = if d.kind == DialogueKind::Interleaved {
                    substituted_len(&turn.text).unwrap_or_else(|| char_len(&turn.text))
                } else {
                    char_len(&turn.text)
                };
                if chars > limits.max_answer_chars {
                    report.violations.push(DialogueViolation {
                        turn: i,
                        kind: DialogueViolationKind::TooLong { chars, limit: limits.max_answer_chars },
                    });
                }
            }
        }
        if !turn.image_prompts.is_empty() && d.kind != DialogueKind::Interleaved {
            report
                .violations
                .push(DialogueViolation { turn: i, kind: DialogueViolationKind::UnexpectedImagePrompts });
        }
    }
    report
}
