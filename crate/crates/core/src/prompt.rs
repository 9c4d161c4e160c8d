//! Generation, parsing, validation, deduplication, and attribute augmentation
//! of StableDiffusion prompts, per ability.
//!
//! Grammar: a prompt is a comma-separated keyword list. Emphasis is the
//! nesting depth of surrounding paired parentheses (`((cat))` has depth 2);
//! an optional `:w` suffix attaches an explicit weight. Deduplication uses
//! the maximum Jaccard similarity between normalized keyword sets against the
//! per-ability accepted corpus.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{parse_numbered_list, BackendError, ChatBackend, ChatRequest, Gateway};
use crate::schema::{render_keywords, Keyword, SdPrompt};
use crate::template::{
    render_template, AbilitySpec, AttributeRule, InContextPool, TemplateError, TemplateKind,
    TemplateSet,
};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("empty prompt")]
    Empty,
    #[error("unparseable prompt: {0}")]
    Unparseable(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Why a candidate prompt was rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    TooManyKeywords,
    TooLong,
    Duplicate { similarity: f64 },
    Empty,
    Unparseable,
    NonVisual { term: String },
}

/// Filtering thresholds; defaults follow the shipped configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub max_keywords: usize,
    pub duplicate_threshold: f64,
    pub non_visual_blocklist: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_keywords: 10,
            duplicate_threshold: 0.7,
            non_visual_blocklist: vec![
                "growing".into(),
                "thinking".into(),
                "silence".into(),
                "yesterday".into(),
                "freedom".into(),
            ],
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_keywords < 1 {
            return Err("max_keywords must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.duplicate_threshold) {
            return Err("duplicate_threshold must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Raw prompt texts may not exceed this many characters; longer candidates
/// are rejected as `TooLong`.
pub const MAX_PROMPT_CHARS: usize = 500;

/// Result of filtering one batch of candidate prompts.
#[derive(Debug, Clone, Default)]
pub struct PromptBatch {
    pub ability_id: String,
    pub accepted: Vec<SdPrompt>,
    pub rejected: Vec<(String, RejectReason)>,
}

/// Accepted-prompt index for one ability, holding normalized keyword sets.
#[derive(Debug, Clone, Default)]
pub struct PromptCorpus {
    sets: Vec<BTreeSet<String>>,
}

impl PromptCorpus {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn insert(&mut self, prompt: &SdPrompt) {
        self.sets.push(prompt.normalized_set());
    }
}

/// Jaccard similarity of two sets; 0 when both are empty.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let intersection = a.intersection(b).count();
    let union = a.len() + b.len() - intersection;
    intersection as f64 / union as f64
}

/// Maximum Jaccard similarity between the prompt's normalized keyword set and
/// any accepted prompt in the corpus. 0 when the corpus is empty.
pub fn repetition_rate(prompt: &SdPrompt, corpus: &PromptCorpus) -> f64 {
    let set = prompt.normalized_set();
    corpus.sets.iter().map(|s| jaccard(&set, s)).fold(0.0, f64::max)
}

fn parse_keyword(token: &str) -> Result<Keyword, PromptError> {
    let token = token.trim();
    let mut inner = token;
    let mut emphasis = 0u32;
    while inner.len() >= 2 && inner.starts_with('(') && inner.ends_with(')') {
        inner = &inner[1..inner.len() - 1];
        emphasis += 1;
    }
    let inner = inner.trim();
    let (text, weight) = match inner.rsplit_once(':') {
        Some((head, tail)) => match tail.trim().parse::<f64>() {
            Ok(w) if w > 0.0 && w.is_finite() => (head.trim(), Some(w)),
            _ => return Err(PromptError::Unparseable(format!("bad weight in `{token}`"))),
        },
        None => (inner, None),
    };
    if text.is_empty() {
        return Err(PromptError::Unparseable(format!("empty keyword in `{token}`")));
    }
    if text.contains(['(', ')', '[', ']']) {
        return Err(PromptError::Unparseable(format!("unbalanced brackets in `{token}`")));
    }
    Ok(Keyword { text: text.to_string(), emphasis, weight })
}

/// Parses a raw prompt string into an [`SdPrompt`]. Keyword order is
/// preserved, brackets become emphasis depth, and `raw_text` is set to the
/// canonical serialization so parse -> serialize -> parse is the identity.
pub fn parse_sd_prompt(raw: &str, ability_id: &str) -> Result<SdPrompt, PromptError> {
    if raw.trim().is_empty() {
        return Err(PromptError::Empty);
    }
    let mut keywords = Vec::new();
    for token in raw.split(',') {
        keywords.push(parse_keyword(token)?);
    }
    Ok(SdPrompt::from_keywords(keywords, ability_id))
}

/// Appends rule-injected keywords for every rule whose trigger appears in the
/// prompt (case-insensitive). Existing keywords are untouched; already-present
/// injections are skipped, so the operation is idempotent.
pub fn inject_attributes(prompt: &SdPrompt, rules: &[AttributeRule]) -> SdPrompt {
    let haystack = prompt
        .keywords
        .iter()
        .map(|k| k.text.to_lowercase())
        .collect::<Vec<_>>()
        .join(", ");
    let mut keywords = prompt.keywords.clone();
    for rule in rules {
        if !haystack.contains(&rule.trigger_keyword.to_lowercase()) {
            continue;
        }
        for inject in &rule.injected_keywords {
            let present = keywords.iter().any(|k| k.text.eq_ignore_ascii_case(inject));
            if !present {
                keywords.push(Keyword::plain(inject.clone()));
            }
        }
    }
    let raw_text = render_keywords(&keywords);
    SdPrompt { keywords, raw_text, ability_id: prompt.ability_id.clone(), pair_id: prompt.pair_id.clone() }
}

fn blocklist_hit(prompt: &SdPrompt, blocklist: &[String]) -> Option<String> {
    for keyword in &prompt.keywords {
        let lower = keyword.text.to_lowercase();
        for term in blocklist {
            let term_lower = term.to_lowercase();
            if lower.split_whitespace().any(|w| w == term_lower) {
                return Some(term.clone());
            }
        }
    }
    None
}

/// Filters raw candidate prompts against the config and the per-ability
/// corpus. Accepted prompts are added to the corpus index immediately, so
/// later candidates in the same batch dedup against earlier ones.
pub fn filter_prompts(
    raws: &[String],
    ability_id: &str,
    cfg: &FilterConfig,
    corpus: &mut PromptCorpus,
) -> PromptBatch {
    let mut batch = PromptBatch { ability_id: ability_id.to_string(), ..Default::default() };
    for raw in raws {
        if raw.chars().count() > MAX_PROMPT_CHARS {
            batch.rejected.push((raw.clone(), RejectReason::TooLong));
            continue;
        }
        let prompt = match parse_sd_prompt(raw, ability_id) {
            Ok(p) => p,
            Err(PromptError::Empty) => {
                batch.rejected.push((raw.clone(), RejectReason::Empty));
                continue;
            }
            Err(_) => {
                batch.rejected.push((raw.clone(), RejectReason::Unparseable));
                continue;
            }
        };
        if prompt.keywords.len() > cfg.max_keywords {
            batch.rejected.push((raw.clone(), RejectReason::TooManyKeywords));
            continue;
        }
        if let Some(term) = blocklist_hit(&prompt, &cfg.non_visual_blocklist) {
            batch.rejected.push((raw.clone(), RejectReason::NonVisual { term }));
            continue;
        }
        let similarity = repetition_rate(&prompt, corpus);
        if similarity >= cfg.duplicate_threshold {
            batch.rejected.push((raw.clone(), RejectReason::Duplicate { similarity }));
            continue;
        }
        corpus.insert(&prompt);
        batch.accepted.push(prompt);
    }
    batch
}

/// Calls the chat backend for up to `n` unique ability keywords
/// (case-insensitive dedup). `n = 0` skips the call entirely.
pub fn generate_keyword_pool(
    ability: &AbilitySpec,
    n: usize,
    templates: &TemplateSet,
    pool: &InContextPool,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<Vec<String>, PromptError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut slots = BTreeMap::new();
    slots.insert("n_keywords".to_string(), n.to_string());
    let body = render_template(templates, TemplateKind::KeywordPoolGen, ability, pool, &slots)?;
    let req = ChatRequest::new("You are a data generation assistant.", body).with_seed(seed);
    let reply = chat.chat_complete(&req)?;
    let items = parse_numbered_list(&reply)?;
    let mut seen = BTreeSet::new();
    let mut keywords = Vec::new();
    for item in items {
        let key = item.to_lowercase();
        if seen.insert(key) {
            keywords.push(item);
            if keywords.len() == n {
                break;
            }
        }
    }
    Ok(keywords)
}

/// Renders the prompt-generation template, calls chat, parses the numbered
/// list, applies attribute injection, and filters. At most `n` accepted
/// prompts are returned.
#[allow(clippy::too_many_arguments)]
pub fn generate_prompt_batch(
    ability: &AbilitySpec,
    n: usize,
    templates: &TemplateSet,
    pool: &InContextPool,
    cfg: &FilterConfig,
    corpus: &mut PromptCorpus,
    chat: &Gateway<dyn ChatBackend>,
    seed: u64,
) -> Result<PromptBatch, PromptError> {
    let mut slots = BTreeMap::new();
    slots.insert("n_prompts".to_string(), n.to_string());
    let body = render_template(templates, TemplateKind::PromptGen, ability, pool, &slots)?;
    let req = ChatRequest::new("You are a data generation assistant.", body).with_seed(seed);
    let reply = chat.chat_complete(&req)?;
    let raws = parse_numbered_list(&reply)?;
    let injected: Vec<String> = raws
        .iter()
        .map(|raw| match parse_sd_prompt(raw, &ability.ability_id) {
            Ok(p) => inject_attributes(&p, &ability.attribute_rules).raw_text,
            // Unparseable raws pass through so filtering records the reason.
            Err(_) => raw.clone(),
        })
        .collect();
    let mut batch = filter_prompts(&injected, &ability.ability_id, cfg, corpus);
    batch.accepted.truncate(n);
    Ok(batch)
}
