//! Materializes images for accepted prompts, substitutes placeholders, binds
//! dialogues to image files, and writes dataset files and manifests with
//! resume support.
//!
//! Images live in a content-addressed directory (`images/{ability}/{hh}/...`)
//! and dataset files store relative paths. Durable progress goes through two
//! append-only files: a `.partial.jsonl` sample log and the manifest; the
//! final JSON array is written only when the plan is complete, so a crash at
//! any point leaves a resumable state.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, Gateway, ImageBackend, T2iRequest};
use crate::schema::{
    decode_sample, encode_sample, validate_dataset_file, Dialogue, DialogueKind, Manifest,
    ManifestWriter, Provenance, SchemaError, Speaker, TrainingSample, ValidationReport,
    IMAGE_PLACEHOLDER,
};

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("arity mismatch: dialogue needs {expected} images, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("manifest config hash `{manifest}` does not match current config `{current}`")]
    ConfigMismatch { manifest: String, current: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One stored image with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStoreEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub prompt_raw: String,
    pub seed: u64,
    pub bytes_hash: String,
}

/// Image render settings forwarded to the text-to-image backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageSettings {
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub negative_prompt: Option<String>,
}

impl Default for ImageSettings {
    fn default() -> Self {
        ImageSettings { width: 512, height: 512, steps: 20, negative_prompt: None }
    }
}

/// Content-addressed image store rooted at the output directory.
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ImageStore { root: root.into() }
    }

    fn relative_path(ability_id: &str, prompt_raw: &str, seed: u64) -> String {
        let mut hasher = Sha256::new();
        hasher.update(prompt_raw.as_bytes());
        hasher.update(seed.to_le_bytes());
        let hash = hex::encode(hasher.finalize());
        format!("images/{ability_id}/{}/{}.png", &hash[..2], &hash[..16])
    }

    /// Renders one image, reusing an existing file for the same
    /// (prompt, seed) key. Writes are atomic (write-then-rename).
    pub fn materialize(
        &self,
        ability_id: &str,
        prompt_raw: &str,
        seed: u64,
        settings: &ImageSettings,
        t2i: &Gateway<dyn ImageBackend>,
    ) -> Result<ImageStoreEntry, AssembleError> {
        let rel = Self::relative_path(ability_id, prompt_raw, seed);
        let abs = self.root.join(&rel);
        if abs.exists() {
            let bytes = std::fs::read(&abs)?;
            return Ok(ImageStoreEntry {
                path: rel,
                prompt_raw: prompt_raw.to_string(),
                seed,
                bytes_hash: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let artifact = t2i.txt2img(&T2iRequest {
            prompt: prompt_raw.to_string(),
            negative_prompt: settings.negative_prompt.clone(),
            width: settings.width,
            height: settings.height,
            seed,
            steps: settings.steps,
        })?;
        if let Some(parent) = abs.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = abs.with_extension("tmp");
        std::fs::write(&tmp, &artifact.bytes)?;
        std::fs::rename(&tmp, &abs)?;
        Ok(ImageStoreEntry {
            path: rel,
            prompt_raw: prompt_raw.to_string(),
            seed,
            bytes_hash: hex::encode(Sha256::digest(&artifact.bytes)),
        })
    }
}

/// Renders one image per prompt with `seed = seed_base + index`. Failures are
/// collected per prompt; failed prompts are simply absent from the result.
pub fn materialize_images(
    store: &ImageStore,
    ability_id: &str,
    prompts: &[String],
    seed_base: u64,
    settings: &ImageSettings,
    t2i: &Gateway<dyn ImageBackend>,
) -> (BTreeMap<usize, ImageStoreEntry>, Vec<(usize, AssembleError)>) {
    let mut entries = BTreeMap::new();
    let mut failures = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        match store.materialize(ability_id, prompt, seed_base + i as u64, settings, t2i) {
            Ok(entry) => {
                entries.insert(i, entry);
            }
            Err(e) => failures.push((i, e)),
        }
    }
    (entries, failures)
}

fn prepend_placeholders(dialogue: &Dialogue, count: usize) -> Vec<crate::schema::Turn> {
    let mut turns: Vec<crate::schema::Turn> = dialogue
        .turns
        .iter()
        .map(|t| crate::schema::Turn { speaker: t.speaker, text: t.text.clone(), image_prompts: Vec::new() })
        .collect();
    let prefix: String = std::iter::repeat(format!("{IMAGE_PLACEHOLDER}\n")).take(count).collect();
    if let Some(first) = turns.first_mut() {
        first.text = format!("{prefix}{}", first.text);
    }
    turns
}

/// Replaces bracketed prompt segments (interleaved) or prepends placeholder
/// tokens (single- and multi-image) and binds the image references, producing
/// a [`TrainingSample`] whose invariants hold.
pub fn substitute_placeholders(
    dialogue: &Dialogue,
    images: &[ImageStoreEntry],
    id: &str,
    provenance: Provenance,
) -> Result<TrainingSample, AssembleError> {
    let (turns, stage) = match dialogue.kind {
        DialogueKind::Stage1Description | DialogueKind::Abnormality => {
            if images.len() != 1 {
                return Err(AssembleError::ArityMismatch { expected: 1, got: images.len() });
            }
            (prepend_placeholders(dialogue, 1), 1)
        }
        DialogueKind::MultiImage => {
            if images.len() != 2 {
                return Err(AssembleError::ArityMismatch { expected: 2, got: images.len() });
            }
            (prepend_placeholders(dialogue, 2), 2)
        }
        DialogueKind::Interleaved => {
            let brackets: usize = dialogue
                .turns
                .iter()
                .filter(|t| t.speaker == Speaker::Assistant)
                .map(|t| t.text.matches('[').count())
                .sum();
            if brackets != images.len() {
                return Err(AssembleError::ArityMismatch { expected: brackets, got: images.len() });
            }
            let turns = dialogue
                .turns
                .iter()
                .map(|t| {
                    let mut text = String::with_capacity(t.text.len());
                    let mut rest = t.text.as_str();
                    while let Some(open) = rest.find('[') {
                        text.push_str(&rest[..open]);
                        match rest[open..].find(']') {
                            Some(close) => {
                                text.push_str(IMAGE_PLACEHOLDER);
                                rest = &rest[open + close + 1..];
                            }
                            None => {
                                text.push_str(&rest[open..]);
                                rest = "";
                            }
                        }
                    }
                    text.push_str(rest);
                    crate::schema::Turn { speaker: t.speaker, text, image_prompts: Vec::new() }
                })
                .collect();
            (turns, 2)
        }
    };
    let sample = TrainingSample {
        id: id.to_string(),
        stage,
        image_refs: images.iter().map(|e| e.path.clone()).collect(),
        conversations: turns,
        provenance,
    };
    sample.check_invariants()?;
    Ok(sample)
}

/// Which samples a stage run must produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyPlan {
    pub stage: u8,
    pub target_counts: BTreeMap<String, u64>,
    pub output_path: PathBuf,
}

impl AssemblyPlan {
    pub fn total_target(&self) -> u64 {
        self.target_counts.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyOutcome {
    Complete,
    Incomplete,
}

/// Single-writer dataset sink. Samples are appended to a partial JSONL log
/// and recorded in the manifest after each durable write; the final JSON
/// array is only produced once targets are met.
pub struct DatasetSink {
    plan: AssemblyPlan,
    manifest: Manifest,
    writer: ManifestWriter,
    partial_path: PathBuf,
    partial: std::fs::File,
    records: Vec<serde_json::Value>,
    pub skipped_duplicates: u64,
}

impl DatasetSink {
    /// Opens (or resumes) a sink. Existing partial records are kept when the
    /// manifest confirms them; anything else will be regenerated.
    pub fn open(
        plan: AssemblyPlan,
        manifest: Manifest,
        manifest_path: &Path,
    ) -> Result<Self, AssembleError> {
        let partial_path = plan.output_path.with_extension("partial.jsonl");
        let mut records = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        // A previously finalized output seeds the record set, so resuming a
        // job whose earlier stages completed does not regenerate them.
        if plan.output_path.exists() {
            let text = std::fs::read_to_string(&plan.output_path)?;
            if let Ok(values) = serde_json::from_str::<Vec<serde_json::Value>>(&text) {
                for value in values {
                    let id =
                        value.get("id").and_then(|v| v.as_str()).unwrap_or_default().to_string();
                    if manifest.contains(&id) && seen.insert(id) {
                        records.push(value);
                    }
                }
            }
        }
        if partial_path.exists() {
            for line in std::fs::read_to_string(&partial_path)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value = match serde_json::from_str(line) {
                    Ok(v) => v,
                    // A torn trailing line from a crash is regenerated.
                    Err(_) => continue,
                };
                let id = value.get("id").and_then(|v| v.as_str()).unwrap_or_default().to_string();
                if manifest.contains(&id) && seen.insert(id) {
                    records.push(value);
                }
            }
        }
        // Rewrite the partial log to exactly the confirmed records.
        if let Some(parent) = partial_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut partial = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&partial_path)?;
        for record in &records {
            writeln!(partial, "{record}")?;
        }
        partial.sync_data()?;
        let writer = ManifestWriter::create(manifest_path, &manifest)?;
        Ok(DatasetSink {
            plan,
            manifest,
            writer,
            partial_path,
            partial,
            records,
            skipped_duplicates: 0,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Remaining samples per ability, floored at zero.
    pub fn remaining(&self) -> BTreeMap<String, u64> {
        self.plan
            .target_counts
            .iter()
            .map(|(ability, &target)| {
                let done = self.manifest.counters.get(ability).copied().unwrap_or(0);
                (ability.clone(), target.saturating_sub(done))
            })
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.remaining().values().all(|&r| r == 0)
    }

    /// Accepts a sample unless it is a duplicate or its ability target is
    /// already met. Returns whether the sample was written.
    pub fn offer(&mut self, sample: &TrainingSample) -> Result<bool, AssembleError> {
        let ability = &sample.provenance.ability_id;
        if self.manifest.contains(&sample.id) {
            self.skipped_duplicates += 1;
            return Ok(false);
        }
        let target = self.plan.target_counts.get(ability).copied().unwrap_or(0);
        let done = self.manifest.counters.get(ability).copied().unwrap_or(0);
        if done >= target {
            return Ok(false);
        }
        let value = encode_sample(sample)?;
        writeln!(self.partial, "{value}")?;
        self.partial.sync_data()?;
        self.manifest.record(&sample.id, ability);
        self.writer.append(&sample.id, ability)?;
        self.records.push(value);
        Ok(true)
    }

    /// Writes the final dataset file if targets are met and validates it.
    pub fn finalize(self) -> Result<(AssemblyOutcome, ValidationReport), AssembleError> {
        let outcome =
            if self.is_complete() { AssemblyOutcome::Complete } else { AssemblyOutcome::Incomplete };
        if outcome == AssemblyOutcome::Complete {
            if let Some(parent) = self.plan.output_path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let tmp = self.plan.output_path.with_extension("json.tmp");
            let body = serde_json::to_string_pretty(&self.records)?;
            std::fs::write(&tmp, body)?;
            std::fs::rename(&tmp, &self.plan.output_path)?;
            let report = validate_dataset_file(&self.plan.output_path)?;
            let _ = std::fs::remove_file(&self.partial_path);
            Ok((outcome, report))
        } else {
            let report = ValidationReport { count: self.records.len(), violations: Vec::new() };
            Ok((outcome, report))
        }
    }
}

/// Loads a manifest and computes the remaining targets per ability, erroring
/// if the manifest was written under a different configuration.
pub fn resume_job(
    manifest_path: &Path,
    plan: &AssemblyPlan,
    current_config_hash: &str,
) -> Result<BTreeMap<String, u64>, AssembleError> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.config_hash != current_config_hash {
        return Err(AssembleError::ConfigMismatch {
            manifest: manifest.config_hash,
            current: current_config_hash.to_string(),
        });
    }
    Ok(plan
        .target_counts
        .iter()
        .map(|(ability, &target)| {
            let done = manifest.counters.get(ability).copied().unwrap_or(0);
            (ability.clone(), target.saturating_sub(done))
        })
        .collect())
}

/// Re-decodes every sample in a dataset file (round-trip check helper).
pub fn decode_dataset_file(path: &Path) -> Result<Vec<TrainingSample>, SchemaError> {
    let content = std::fs::read_to_string(path)?;
    if content.trim().is_empty() {
        return Ok(Vec::new());
    }
    let values: Vec<serde_json::Value> = serde_json::from_str(&content)?;
    values.iter().map(decode_sample).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockImageBackend;
    use crate::backend::BackendPolicy;
    use crate::schema::{sample_id, Turn};

    fn t2i_gateway() -> Gateway<dyn ImageBackend> {
        Gateway::new(Box::new(MockImageBackend), BackendPolicy::default())
    }

    fn small_settings() -> ImageSettings {
        ImageSettings { width: 16, height: 16, steps: 4, negative_prompt: None }
    }

    #[test]
    fn materialize_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::new(dir.path());
        let t2i = t2i_gateway();
        let prompts: Vec<String> = (0..10).map(|i| format!("((subject-{i})), scene")).collect();
        let (entries, failures) =
            materialize_images(&store, "color", &prompts, 100, &small_settings(), &t2i);
        assert_eq!(entries.len(), 10);
        assert!(failures.is_empty());
        let paths: std::collections::BTreeSet<_> = entries.values().map(|e| e.path.clone()).collect();
        assert_eq!(paths.len(), 10);
        let calls_before = t2i.call_count();
        let (again, _) = materialize_images(&store, "color", &prompts, 100, &small_settings(), &t2i);
        assert_eq!(t2i.call_count(), calls_before);
        assert_eq!(entries, again);
    }

    fn entry(i: usize) -> ImageStoreEntry {
        ImageStoreEntry {
            path: format!("images/a/xx/{i}.png"),
            prompt_raw: format!("p{i}"),
            seed: i as u64,
            bytes_hash: "00".into(),
        }
    }

    fn provenance() -> Provenance {
        Provenance { ability_id: "color".into(), prompts: vec!["p".into()], seed: 1 }
    }

    #[test]
    fn stage1_substitution_prepends_placeholder() {
        let dialogue = Dialogue {
            turns: vec![Turn::human("What is shown?"), Turn::assistant("An owl.")],
            kind: DialogueKind::Stage1Description,
        };
        let sample = substitute_placeholders(&dialogue, &[entry(0)], "color-000000", provenance()).unwrap();
        assert!(sample.conversations[0].text.starts_with("<image>\n"));
        assert_eq!(sample.stage, 1);
        assert_eq!(sample.image_refs.len(), 1);
    }

    #[test]
    fn interleaved_substitution_counts_match() {
        let dialogue = Dialogue {
            turns: vec![
                Turn::human("Step one?"),
                Turn::assistant("Chop. [((knife)), board]"),
                Turn::human("Step two?"),
                Turn::assistant("Stir. [((pot)), stove]"),
                Turn::human("Step three?"),
                Turn::assistant("Serve. [((bowl)), table]"),
            ],
            kind: DialogueKind::Interleaved,
        };
        let images = [entry(0), entry(1), entry(2)];
        let mut prov = provenance();
        prov.ability_id = "interleaved".into();
        let sample = substitute_placeholders(&dialogue, &images, "interleaved-000000", prov).unwrap();
        assert_eq!(sample.placeholder_count(), 3);
        assert_eq!(sample.image_refs.len(), 3);
        for turn in &sample.conversations {
            assert!(!turn.text.contains('['));
            assert!(!turn.text.contains(']'));
        }
    }

    #[test]
    fn arity_mismatch_detected() {
        let dialogue = Dialogue {
            turns: vec![
                Turn::human("Steps?"),
                Turn::assistant("One. [a, b]"),
                Turn::human("Next?"),
                Turn::assistant("Two. [c, d]"),
                Turn::human("Last?"),
                Turn::assistant("Three. [e, f]"),
            ],
            kind: DialogueKind::Interleaved,
        };
        let err = substitute_placeholders(&dialogue, &[entry(0), entry(1)], "x-000000", provenance())
            .unwrap_err();
        assert!(matches!(err, AssembleError::ArityMismatch { expected: 3, got: 2 }));
    }

    fn mk_sample(ability: &str, i: u64) -> TrainingSample {
        TrainingSample {
            id: sample_id(ability, i),
            stage: 1,
            image_refs: vec![format!("images/{ability}/{i}.png")],
            conversations: vec![
                Turn::human(format!("<image>\nWhat is in image {i}?")),
                Turn::assistant(format!("Sample content {i}.")),
            ],
            provenance: Provenance { ability_id: ability.into(), prompts: vec![], seed: i },
        }
    }

    fn plan(dir: &Path, targets: &[(&str, u64)]) -> AssemblyPlan {
        AssemblyPlan {
            stage: 1,
            target_counts: targets.iter().map(|(a, n)| (a.to_string(), *n)).collect(),
            output_path: dir.join("stage1.json"),
        }
    }

    #[test]
    fn sink_reaches_targets_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan(dir.path(), &[("a", 10), ("b", 10), ("c", 10)]);
        let manifest = Manifest::new("job", "hash");
        let mpath = dir.path().join("manifest.jsonl");
        let mut sink = DatasetSink::open(plan, manifest, &mpath).unwrap();
        for ability in ["a", "b", "c"] {
            for i in 0..10 {
                assert!(sink.offer(&mk_sample(ability, i)).unwrap());
            }
        }
        assert!(sink.is_complete());
        let manifest = sink.manifest().clone();
        assert_eq!(manifest.counters["a"], 10);
        let (outcome, report) = sink.finalize().unwrap();
        assert_eq!(outcome, AssemblyOutcome::Complete);
        assert_eq!(report.count, 30);
        assert!(report.is_valid());
    }

    #[test]
    fn sink_skips_duplicates_and_reports_shortfall() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan(dir.path(), &[("a", 30)]);
        let mpath = dir.path().join("manifest.jsonl");
        let mut sink = DatasetSink::open(plan, Manifest::new("job", "hash"), &mpath).unwrap();
        for i in 0..25 {
            sink.offer(&mk_sample("a", i)).unwrap();
        }
        assert!(!sink.offer(&mk_sample("a", 3)).unwrap());
        assert_eq!(sink.skipped_duplicates, 1);
        let (outcome, report) = sink.finalize().unwrap();
        assert_eq!(outcome, AssemblyOutcome::Incomplete);
        assert_eq!(report.count, 25);
    }

    #[test]
    fn resume_computes_remaining_and_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan(dir.path(), &[("a", 10), ("b", 10)]);
        let mpath = dir.path().join("manifest.jsonl");
        let mut manifest = Manifest::new("job", "hash");
        for i in 0..10 {
            manifest.record(&sample_id("a", i), "a");
        }
        for i in 0..4 {
            manifest.record(&sample_id("b", i), "b");
        }
        ManifestWriter::create(&mpath, &manifest).unwrap();
        let remaining = resume_job(&mpath, &plan, "hash").unwrap();
        assert_eq!(remaining["a"], 0);
        assert_eq!(remaining["b"], 6);
        assert!(matches!(
            resume_job(&mpath, &plan, "other"),
            Err(AssembleError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn crash_and_resume_converges_without_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.jsonl");
        // Crash after k samples for every k, then resume to completion.
        for crash_after in 1..=9 {
            let plan = plan(dir.path(), &[("a", 10)]);
            let manifest = if mpath.exists() {
                Manifest::load(&mpath).unwrap()
            } else {
                Manifest::new("job", "hash")
            };
            let mut sink = DatasetSink::open(plan, manifest, &mpath).unwrap();
            let mut written = 0;
            for i in 0..10 {
                if sink.is_complete() || written == crash_after {
                    break;
                }
                if sink.offer(&mk_sample("a", i)).unwrap() {
                    written += 1;
                }
            }
            // Sink dropped here without finalize = crash.
        }
        let plan = plan(dir.path(), &[("a", 10)]);
        let manifest = Manifest::load(&mpath).unwrap();
        let mut sink = DatasetSink::open(plan, manifest, &mpath).unwrap();
        for i in 0..10 {
            sink.offer(&mk_sample("a", i)).unwrap();
        }
        assert!(sink.is_complete());
        let (outcome, report) = sink.finalize().unwrap();
        assert_eq!(outcome, AssemblyOutcome::Complete);
        assert_eq!(report.count, 10);
        assert!(report.is_valid());
    }
}
