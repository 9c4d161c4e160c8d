//! Domain value types and the dataset / manifest file formats shared by every
//! other module.
//!
//! The dataset format follows the LLaVA convention: a JSON array of samples,
//! each with `id`, `image` (or `images`), and `conversations` entries of
//! `{from, value}`. We additionally carry `stage` and `provenance` so files
//! round-trip losslessly. Manifests are line-oriented JSON so checkpoints can
//! be appended without rewriting the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The token standing in for an image position inside conversation text.
pub const IMAGE_PLACEHOLDER: &str = "<image>";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("format error at `{path}`: {detail}")]
    Format { path: String, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One weighted keyword of a StableDiffusion prompt. Emphasis is the bracket
/// nesting depth (`((cat))` has emphasis 2); an optional `:w` suffix carries
/// an explicit weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub text: String,
    pub emphasis: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weight: Option<f64>,
}

impl Keyword {
    pub fn plain(text: impl Into<String>) -> Self {
        Keyword { text: text.into(), emphasis: 0, weight: None }
    }

    pub fn emphasized(text: impl Into<String>, emphasis: u32) -> Self {
        Keyword { text: text.into(), emphasis, weight: None }
    }

    /// Renders the keyword back into prompt syntax.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for _ in 0..self.emphasis {
            s.push('(');
        }
        s.push_str(&self.text);
        if let Some(w) = self.weight {
            s.push(':');
            s.push_str(&w.to_string());
        }
        for _ in 0..self.emphasis {
            s.push(')');
        }
        s
    }
}

/// An ordered sequence of weighted keywords; the unit that drives both image
/// and dialogue generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdPrompt {
    pub keywords: Vec<Keyword>,
    /// Canonical comma-joined form of `keywords`.
    pub raw_text: String,
    pub ability_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair_id: Option<String>,
}

impl SdPrompt {
    /// Builds a prompt from keywords, computing the canonical raw text.
    pub fn from_keywords(keywords: Vec<Keyword>, ability_id: impl Into<String>) -> Self {
        let raw_text = render_keywords(&keywords);
        SdPrompt { keywords, raw_text, ability_id: ability_id.into(), pair_id: None }
    }

    /// Normalized keyword texts (lowercased, emphasis and weights stripped),
    /// used for similarity comparison.
    pub fn normalized_set(&self) -> BTreeSet<String> {
        self.keywords.iter().map(|k| k.text.trim().to_lowercase()).collect()
    }
}

impl fmt::Display for SdPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw_text)
    }
}

/// Comma-joins rendered keywords.
pub fn render_keywords(keywords: &[Keyword]) -> String {
    keywords.iter().map(Keyword::render).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Human,
    Assistant,
}

impl Speaker {
    /// Dataset-file spelling ("human" / "gpt").
    pub fn wire_name(self) -> &'static str {
        match self {
            Speaker::Human => "human",
            Speaker::Assistant => "gpt",
        }
    }

    pub fn from_wire(s: &str) -> Option<Self> {
        match s {
            "human" => Some(Speaker::Human),
            "gpt" => Some(Speaker::Assistant),
            _ => None,
        }
    }
}

/// One conversation turn. `image_prompts` holds bracketed prompt segments
/// extracted from interleaved dialogues; it is consumed (emptied) when
/// placeholders are substituted during assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub image_prompts: Vec<SdPrompt>,
}

impl Turn {
    pub fn human(text: impl Into<String>) -> Self {
        Turn { speaker: Speaker::Human, text: text.into(), image_prompts: Vec::new() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn { speaker: Speaker::Assistant, text: text.into(), image_prompts: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueKind {
    Stage1Description,
    Abnormality,
    MultiImage,
    Interleaved,
}

/// A conversation bound to a dialogue kind. Turns alternate human/assistant
/// starting with human.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub turns: Vec<Turn>,
    pub kind: DialogueKind,
}

impl Dialogue {
    /// Checks the structural invariants: alternation starting with human and
    /// non-empty assistant turns.
    pub fn check_structure(&self) -> Result<(), SchemaError> {
        if self.turns.is_empty() {
            return Err(SchemaError::InvariantViolation("dialogue has no turns".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Assistant };
            if turn.speaker != expected {
                return Err(SchemaError::InvariantViolation(format!(
                    "turn {i}: expected {expected:?}, got {:?}",
                    turn.speaker
                )));
            }
            if turn.speaker == Speaker::Assistant && turn.text.trim().is_empty() {
                return Err(SchemaError::InvariantViolation(format!("turn {i}: empty assistant turn")));
            }
            if !turn.image_prompts.is_empty() && self.kind != DialogueKind::Interleaved {
                return Err(SchemaError::InvariantViolation(format!(
                    "turn {i}: image prompts on a non-interleaved dialogue"
                )));
            }
        }
        Ok(())
    }
}

/// Generation provenance carried with every training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub ability_id: String,
    pub prompts: Vec<String>,
    pub seed: u64,
}

/// A placeholder-substituted conversation bound to image files, ready for
/// serialization into a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub stage: u8,
    pub image_refs: Vec<String>,
    pub conversations: Vec<Turn>,
    pub provenance: Provenance,
}

impl TrainingSample {
    pub fn placeholder_count(&self) -> usize {
        self.conversations.iter().map(|t| t.text.matches(IMAGE_PLACEHOLDER).count()).sum()
    }

    pub fn check_invariants(&self) -> Result<(), SchemaError> {
        if self.id.is_empty() {
            return Err(SchemaError::InvariantViolation("empty sample id".into()));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(SchemaError::InvariantViolation(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        let placeholders = self.placeholder_count();
        if placeholders != self.image_refs.len() {
            return Err(SchemaError::InvariantViolation(format!(
                "sample {}: {placeholders} placeholder tokens but {} image refs",
                self.id,
                self.image_refs.len()
            )));
        }
        Ok(())
    }
}

/// Serializes a sample into the dataset JSON layout. Single-image samples use
/// an `image` field, everything else `images`. Key order is stable.
pub fn encode_sample(sample: &TrainingSample) -> Result<serde_json::Value, SchemaError> {
    sample.check_invariants()?;
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), sample.id.clone().into());
    obj.insert("stage".into(), sample.stage.into());
    if sample.image_refs.len() == 1 {
        obj.insert("image".into(), sample.image_refs[0].clone().into());
    } else {
        obj.insert("images".into(), sample.image_refs.clone().into());
    }
    let conversations: Vec<serde_json::Value> = sample
        .conversations
        .iter()
        .map(|t| {
            let mut c = serde_json::Map::new();
            c.insert("from".into(), t.speaker.wire_name().into());
            c.insert("value".into(), t.text.clone().into());
            serde_json::Value::Object(c)
        })
        .collect();
    obj.insert("conversations".into(), conversations.into());
    obj.insert("provenance".into(), serde_json::to_value(&sample.provenance)?);
    Ok(serde_json::Value::Object(obj))
}

fn field_err(path: &str, detail: &str) -> SchemaError {
    SchemaError::Format { path: path.to_string(), detail: detail.to_string() }
}

fn get_str(obj: &serde_json::Map<String, serde_json::Value>, key: &str) -> Result<String, SchemaError> {
    obj.get(key)
        .ok_or_else(|| field_err(key, "missing field"))?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| field_err(key, "expected a string"))
}

/// Parses a dataset JSON value back into a [`TrainingSample`].
/// `decode_sample(encode_sample(s)) == s` for every valid sample.
pub fn decode_sample(json: &serde_json::Value) -> Result<TrainingSample, SchemaError> {
    let obj = json.as_object().ok_or_else(|| field_err("", "sample must be a JSON object"))?;
    let id = get_str(obj, "id")?;
    let stage = obj
        .get("stage")
        .ok_or_else(|| field_err("stage", "missing field"))?
        .as_u64()
        .ok_or_else(|| field_err("stage", "expected an integer"))? as u8;
    let image_refs: Vec<String> = if let Some(v) = obj.get("image") {
        vec![v.as_str().ok_or_else(|| field_err("image", "expected a string"))?.to_string()]
    } else if let Some(v) = obj.get("images") {
        let arr = v.as_array().ok_or_else(|| field_err("images", "expected an array"))?;
        arr.iter()
            .enumerate()
            .map(|(i, x)| {
                x.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| field_err(&format!("images[{i}]"), "expected a string"))
            })
            .collect::<Result<_, _>>()?
    } else {
        return Err(field_err("image", "missing field (neither `image` nor `images`)"));
    };
    let conv = obj
        .get("conversations")
        .ok_or_else(|| field_err("conversations", "missing field"))?
        .as_array()
        .ok_or_else(|| field_err("conversations", "expected an array"))?;
    let mut conversations = Vec::with_capacity(conv.len());
    for (i, entry) in conv.iter().enumerate() {
        let path = format!("conversations[{i}]");
        let e = entry.as_object().ok_or_else(|| field_err(&path, "expected an object"))?;
        let from = get_str(e, "from").map_err(|_| field_err(&format!("{path}.from"), "missing or mistyped"))?;
        let speaker = Speaker::from_wire(&from)
            .ok_or_else(|| field_err(&format!("{path}.from"), "expected \"human\" or \"gpt\""))?;
        let value = get_str(e, "value").map_err(|_| field_err(&format!("{path}.value"), "missing or mistyped"))?;
        conversations.push(Turn { speaker, text: value, image_prompts: Vec::new() });
    }
    let provenance: Provenance = serde_json::from_value(
        obj.get("provenance").ok_or_else(|| field_err("provenance", "missing field"))?.clone(),
    )
    .map_err(|e| field_err("provenance", &e.to_string()))?;
    let sample = TrainingSample { id, stage, image_refs, conversations, provenance };
    sample.check_invariants()?;
    Ok(sample)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetViolation {
    pub index: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub count: usize,
    pub violations: Vec<DatasetViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Validates a dataset file: every sample decodes, satisfies its invariants,
/// and ids are unique. An empty file counts as zero samples.
pub fn validate_dataset_file(path: &Path) -> Result<ValidationReport, SchemaError> {
    let content = std::fs::read_to_string(path)?;
    if content.trim().is_empty() {
        return Ok(ValidationReport::default());
    }
    let values: Vec<serde_json::Value> = serde_json::from_str(&content)?;
    let mut report = ValidationReport { count: values.len(), violations: Vec::new() };
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, value) in values.iter().enumerate() {
        match decode_sample(value) {
            Ok(sample) => {
                if let Some(&first) = seen.get(&sample.id) {
                    report.violations.push(DatasetViolation {
                        index: i,
                        detail: format!("duplicate id `{}` (first at index {first})", sample.id),
                    });
                } else {
                    seen.insert(sample.id.clone(), i);
                }
            }
            Err(e) => report.violations.push(DatasetViolation { index: i, detail: e.to_string() }),
        }
    }
    Ok(report)
}

/// Checkpoint state of a generation job: which sample ids are durably written
/// and the per-ability counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub job_id: String,
    pub completed_ids: BTreeSet<String>,
    pub counters: BTreeMap<String, u64>,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ManifestLine {
    Header { job_id: String, config_hash: String },
    Sample { id: String, ability_id: String },
}

impl Manifest {
    pub fn new(job_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Manifest {
            job_id: job_id.into(),
            completed_ids: BTreeSet::new(),
            counters: BTreeMap::new(),
            config_hash: config_hash.into(),
        }
    }

    /// Records a completed sample. Returns false if the id was already present.
    pub fn record(&mut self, id: &str, ability_id: &str) -> bool {
        if !self.completed_ids.insert(id.to_string()) {
            return false;
        }
        *self.counters.entry(ability_id.to_string()).or_insert(0) += 1;
        true
    }

    pub fn contains(&self, id: &str) -> bool {
        self.completed_ids.contains(id)
    }

    /// Merges another manifest's completions into this one.
    pub fn merge(&mut self, other: &Manifest) {
        for id in &other.completed_ids {
            if self.completed_ids.insert(id.clone()) {
                // Counter attribution is recovered from the id prefix.
                let ability = id.rsplit_once('-').map(|(a, _)| a).unwrap_or(id);
                *self.counters.entry(ability.to_string()).or_insert(0) += 1;
            }
        }
    }

    pub fn check_consistency(&self) -> Result<(), SchemaError> {
        let total: u64 = self.counters.values().sum();
        if total != self.completed_ids.len() as u64 {
            return Err(SchemaError::InvariantViolation(format!(
                "manifest counters sum {total} != {} completed ids",
                self.completed_ids.len()
            )));
        }
        Ok(())
    }

    /// Loads a manifest from its line-oriented JSON file.
    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let content = std::fs::read_to_string(path)?;
        let mut manifest: Option<Manifest> = None;
        for (lineno, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| SchemaError::Format {
                path: format!("{}:{}", path.display(), lineno + 1),
                detail: e.to_string(),
            })?;
            match parsed {
                ManifestLine::Header { job_id, config_hash } => {
                    manifest = Some(Manifest::new(job_id, config_hash));
                }
                ManifestLine::Sample { id, ability_id } => {
                    let m = manifest.as_mut().ok_or_else(|| SchemaError::Format {
                        path: path.display().to_string(),
                        detail: "sample line before header".to_string(),
                    })?;
                    m.record(&id, &ability_id);
                }
            }
        }
        manifest.ok_or_else(|| SchemaError::Format {
            path: path.display().to_string(),
            detail: "manifest has no header line".to_string(),
        })
    }
}

/// Append-only manifest writer; each line is flushed so a crash loses at most
/// the in-flight sample.
pub struct ManifestWriter {
    file: std::fs::File,
}

impl ManifestWriter {
    pub fn create(path: &Path, manifest: &Manifest) -> Result<Self, SchemaError> {
        use std::io::Write;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        let header = ManifestLine::Header {
            job_id: manifest.job_id.clone(),
            config_hash: manifest.config_hash.clone(),
        };
        writeln!(file, "{}", serde_json::to_string(&header)?)?;
        for id in &manifest.completed_ids {
            let ability = id.rsplit_once('-').map(|(a, _)| a).unwrap_or(id);
            let line = ManifestLine::Sample { id: id.clone(), ability_id: ability.to_string() };
            writeln!(file, "{}", serde_json::to_string(&line)?)?;
        }
        file.sync_data()?;
        Ok(ManifestWriter { file })
    }

    pub fn append(&mut self, id: &str, ability_id: &str) -> Result<(), SchemaError> {
        use std::io::Write;
        let line = ManifestLine::Sample { id: id.to_string(), ability_id: ability_id.to_string() };
        writeln!(self.file, "{}", serde_json::to_string(&line)?)?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Builds the canonical sample id for an ability and counter value.
pub fn sample_id(ability_id: &str, counter: u64) -> String {
    format!("{ability_id}-{counter:06}")
}
