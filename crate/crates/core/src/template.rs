//! Ability specifications, instruction-template rendering, and rotating
//! in-context example pools.
//!
//! Templates are plain-text files with `{slot}` markers plus an `{examples}`
//! block marker, so they can be edited without rebuilds. Ability specs are
//! JSON files, one per ability, carrying the per-ability instructions,
//! cautions, pools, and attribute rules.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("spec error in {file}: {detail}")]
    Spec { file: String, detail: String },
    #[error("unresolved template slot `{0}`")]
    MissingSlot(String),
    #[error("template file not found: {0}")]
    MissingTemplate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A rule injecting extra keywords when a trigger keyword appears in a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRule {
    pub trigger_keyword: String,
    pub injected_keywords: Vec<String>,
}

/// One capability's generation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbilitySpec {
    pub ability_id: String,
    pub display_name: String,
    pub capability_instructions: String,
    #[serde(default)]
    pub cautions: Vec<String>,
    #[serde(default)]
    pub keyword_pool: Vec<String>,
    #[serde(default)]
    pub question_pool: Vec<String>,
    #[serde(default)]
    pub attribute_rules: Vec<AttributeRule>,
    #[serde(default)]
    pub target_count: u64,
}

impl AbilitySpec {
    fn validate(&self, file: &str) -> Result<(), TemplateError> {
        let err = |detail: String| TemplateError::Spec { file: file.to_string(), detail };
        if self.ability_id.is_empty() {
            return Err(err("ability_id must be non-empty".into()));
        }
        for (i, rule) in self.attribute_rules.iter().enumerate() {
            if rule.injected_keywords.is_empty() {
                return Err(err(format!("attribute_rules[{i}].injected_keywords must be non-empty")));
            }
        }
        Ok(())
    }
}

/// Loads every `*.json` ability spec in a directory, in filename order.
/// Duplicate ability ids are an error.
pub fn load_ability_specs(dir: &Path) -> Result<Vec<AbilitySpec>, TemplateError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut specs: Vec<AbilitySpec> = Vec::new();
    for path in paths {
        let file = path.display().to_string();
        let content = std::fs::read_to_string(&path)?;
        let spec: AbilitySpec = serde_json::from_str(&content)
            .map_err(|e| TemplateError::Spec { file: file.clone(), detail: e.to_string() })?;
        spec.validate(&file)?;
        if specs.iter().any(|s| s.ability_id == spec.ability_id) {
            return Err(TemplateError::Spec {
                file,
                detail: format!("duplicate ability_id `{}`", spec.ability_id),
            });
        }
        specs.push(spec);
    }
    Ok(specs)
}

/// The template kinds, each mapping to exactly one template file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    PromptGen,
    Stage1Dialogue,
    PairedPromptGen,
    MultiImageDialogue,
    InterleavedDialogue,
    KeywordPoolGen,
    QuestionPoolGen,
    Judge,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 8] = [
        TemplateKind::PromptGen,
        TemplateKind::Stage1Dialogue,
        TemplateKind::PairedPromptGen,
        TemplateKind::MultiImageDialogue,
        TemplateKind::InterleavedDialogue,
        TemplateKind::KeywordPoolGen,
        TemplateKind::QuestionPoolGen,
        TemplateKind::Judge,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::PromptGen => "prompt_gen.txt",
            TemplateKind::Stage1Dialogue => "stage1_dialogue.txt",
            TemplateKind::PairedPromptGen => "paired_prompt_gen.txt",
            TemplateKind::MultiImageDialogue => "multi_image_dialogue.txt",
            TemplateKind::InterleavedDialogue => "interleaved_dialogue.txt",
            TemplateKind::KeywordPoolGen => "keyword_pool_gen.txt",
            TemplateKind::QuestionPoolGen => "question_pool_gen.txt",
            TemplateKind::Judge => "judge.txt",
        }
    }
}

/// All template texts, loaded once and read-only afterwards.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    texts: BTreeMap<TemplateKind, String>,
}

impl TemplateSet {
    pub fn load(dir: &Path) -> Result<Self, TemplateError> {
        let mut texts = BTreeMap::new();
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            let text = std::fs::read_to_string(&path)
                .map_err(|_| TemplateError::MissingTemplate(path.display().to_string()))?;
            texts.insert(kind, text);
        }
        Ok(TemplateSet { texts })
    }

    pub fn text(&self, kind: TemplateKind) -> &str {
        &self.texts[&kind]
    }
}

impl PartialOrd for TemplateKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TemplateKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

/// A rotating few-shot example set. Examples are ordered oldest first; a
/// triggered rotation replaces the oldest fraction with fresh material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InContextPool {
    pub examples: Vec<String>,
    pub capacity: usize,
    pub rotation_interval: u32,
    pub rotation_fraction: f64,
    pub batches_since_rotation: u32,
}

impl InContextPool {
    pub fn new(capacity: usize, rotation_interval: u32, rotation_fraction: f64) -> Self {
        InContextPool {
            examples: Vec::new(),
            capacity,
            rotation_interval: rotation_interval.max(1),
            rotation_fraction,
            batches_since_rotation: 0,
        }
    }

    /// Fills the pool up to capacity while it is still warming up. Rotation
    /// policy only applies once the pool is full.
    pub fn fill(&mut self, fresh: &[String]) {
        for ex in fresh {
            if self.examples.len() >= self.capacity {
                break;
            }
            if !self.examples.contains(ex) {
                self.examples.push(ex.clone());
            }
        }
    }

    pub fn is_full(&self) -> bool {
        self.examples.len() >= self.capacity
    }
}

/// Advances the pool by one batch. If the rotation interval has not elapsed,
/// only the counter changes; otherwise exactly
/// `min(ceil(fraction * |examples|), |fresh|)` oldest examples are replaced
/// by fresh ones and the counter resets. Pool size never changes.
pub fn rotate_pool(pool: &InContextPool, fresh: &[String]) -> InContextPool {
    let mut next = pool.clone();
    if next.batches_since_rotation + 1 < next.rotation_interval {
        next.batches_since_rotation += 1;
        return next;
    }
    let want = (next.rotation_fraction * next.examples.len() as f64).ceil() as usize;
    let k = want.min(fresh.len()).min(next.examples.len());
    next.examples.drain(..k);
    next.examples.extend(fresh.iter().take(k).cloned());
    next.batches_since_rotation = 0;
    next
}

/// Draws `min(n, |examples|)` distinct examples, deterministically for a given
/// seed, preserving pool order in the result.
pub fn sample_pool(pool: &InContextPool, n: usize, rng_seed: u64) -> Vec<String> {
    let take = n.min(pool.examples.len());
    if take == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut indices: Vec<usize> = (0..pool.examples.len()).collect();
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(take).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool.examples[i].clone()).collect()
}

/// Renders a template: `{slot}` markers are substituted from the ability,
/// the explicit slot map, and the example pool. Any marker left unresolved
/// is an error.
pub fn render_template(
    templates: &TemplateSet,
    kind: TemplateKind,
    ability: &AbilitySpec,
    pool: &InContextPool,
    slots: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
    bindings.insert("ability_id", ability.ability_id.clone());
    bindings.insert("display_name", ability.display_name.clone());
    bindings.insert("capability_instructions", ability.capability_instructions.clone());
    bindings.insert(
        "cautions",
        ability.cautions.iter().map(|c| format!("- {c}")).collect::<Vec<_>>().join("\n"),
    );
    bindings.insert("keyword_pool", ability.keyword_pool.join(", "));
    bindings.insert("question_pool", ability.question_pool.join("\n"));
    let examples = if pool.examples.is_empty() {
        "(none yet)".to_string()
    } else {
        pool.examples
            .iter()
            .enumerate()
            .map(|(i, e)| format!("{}. {e}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    };
    bindings.insert("examples", examples);
    for (k, v) in slots {
        bindings.insert(k.as_str(), v.clone());
    }

    let template = templates.text(kind);
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) => {
                let name = &after[..end];
                match bindings.get(name) {
                    Some(value) => out.push_str(value),
                    None => return Err(TemplateError::MissingSlot(name.to_string())),
                }
                rest = &after[end + 1..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
pub mod test_support {
    use std::path::Path;

    /// Copies the repository's template files into `dir`.
    pub fn write_default_templates(dir: &Path) {
        let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../templates");
        for kind in super::TemplateKind::ALL {
            let name = kind.file_name();
            std::fs::copy(src.join(name), dir.join(name)).unwrap();
        }
    }
}
