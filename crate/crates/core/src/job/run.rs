//! End-to-end job driver: pools, prompts, images, dialogues, assembly.
//!
//! Generation is sequential and fully deterministic given (config, seed):
//! every chat/image call seeds from a hash of the job seed and the item's
//! identity, so a crashed run re-derives the identical stream on resume and
//! the dataset sink skips whatever the manifest already confirms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assemble::{
    substitute_placeholders, AssemblyOutcome, AssemblyPlan, DatasetSink, ImageStore,
    ImageStoreEntry,
};
use crate::backend::http::{HttpChatBackend, HttpImageBackend};
use crate::backend::mock::{MockChatBackend, MockImageBackend};
use crate::backend::{ChatBackend, Gateway, ImageBackend};
use crate::dialogue::{
    generate_interleaved_dialogue, generate_multi_image_dialogue, generate_pair_prompts,
    generate_phase_list, generate_question_pool, generate_stage1_dialogue, DialogueError,
    RelationKind,
};
use crate::prompt::{generate_keyword_pool, generate_prompt_batch, PromptCorpus};
use crate::schema::{sample_id, Manifest, Provenance, Speaker, TrainingSample};
use crate::template::{
    load_ability_specs, rotate_pool, AbilitySpec, InContextPool, TemplateSet,
};

use super::config::{BackendConfig, BackendKind, JobConfig, Stage2Config};
use super::JobError;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Force mock backends regardless of the configured kinds.
    pub mock: bool,
    pub seed_override: Option<u64>,
    pub resume: bool,
    /// Validate and plan only; nothing is generated or written.
    pub dry_run: bool,
    /// Stop after this many accepted samples (crash injection for tests).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Complete,
    Incomplete,
    Planned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub job_id: String,
    pub status: JobStatus,
    pub seed: u64,
    pub config_hash: String,
    pub stage1_counts: BTreeMap<String, u64>,
    pub stage2_counts: BTreeMap<String, u64>,
    pub rejected_prompts: u64,
    pub dropped_pairs: u64,
    pub outputs: Vec<String>,
}

/// Derives a child seed from the job seed and a textual identity, so each
/// call site gets an independent but reproducible stream.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn api_key(cfg: &BackendConfig, default_env: &str) -> Option<String> {
    let var = cfg.api_key_env.as_deref().unwrap_or(default_env);
    std::env::var(var).ok()
}

pub fn chat_gateway(
    cfg: &BackendConfig,
    mock: bool,
    seed: u64,
    default_env: &str,
) -> Result<Gateway<dyn ChatBackend>, JobError> {
    let backend: Box<dyn ChatBackend> = if mock || cfg.kind == BackendKind::Mock {
        Box::new(MockChatBackend::new(seed))
    } else {
        let endpoint =
            cfg.endpoint.clone().ok_or_else(|| JobError::Config("missing endpoint".into()))?;
        let model = cfg.model.clone().unwrap_or_else(|| "default".to_string());
        Box::new(HttpChatBackend::new(endpoint, model, api_key(cfg, default_env)))
    };
    Ok(Gateway::new(backend, cfg.policy.clone()))
}

pub fn image_gateway(
    cfg: &BackendConfig,
    mock: bool,
    default_env: &str,
) -> Result<Gateway<dyn ImageBackend>, JobError> {
    let backend: Box<dyn ImageBackend> = if mock || cfg.kind == BackendKind::Mock {
        Box::new(MockImageBackend)
    } else {
        let endpoint =
            cfg.endpoint.clone().ok_or_else(|| JobError::Config("missing endpoint".into()))?;
        Box::new(HttpImageBackend::new(endpoint, api_key(cfg, default_env)))
    };
    Ok(Gateway::new(backend, cfg.policy.clone()))
}

struct RunState<'a> {
    config: &'a JobConfig,
    seed: u64,
    templates: TemplateSet,
    abilities: Vec<AbilitySpec>,
    chat: Gateway<dyn ChatBackend>,
    t2i: Gateway<dyn ImageBackend>,
    store: ImageStore,
    budget: Option<u64>,
    rejected_prompts: u64,
    dropped_pairs: u64,
}

impl<'a> RunState<'a> {
    fn ability(&self, id: &str) -> Result<&AbilitySpec, JobError> {
        self.abilities
            .iter()
            .find(|a| a.ability_id == id)
            .ok_or_else(|| JobError::Config(format!("unknown ability `{id}`")))
    }

    fn new_pool(&self) -> InContextPool {
        InContextPool::new(
            self.config.pool.capacity,
            self.config.pool.rotation_interval,
            self.config.pool.rotation_fraction,
        )
    }

    /// Offers a sample; returns false when the crash-injection budget ran out.
    fn offer(&mut self, sink: &mut DatasetSink, sample: &TrainingSample) -> Result<bool, JobError> {
        if self.budget == Some(0) {
            return Ok(false);
        }
        if sink.offer(sample)? {
            if let Some(budget) = &mut self.budget {
                *budget -= 1;
            }
        }
        Ok(true)
    }

    fn image(
        &self,
        ability_id: &str,
        prompt_raw: &str,
        seed_tag: &str,
    ) -> Result<ImageStoreEntry, JobError> {
        let seed = derive_seed(self.seed, &["image", ability_id, prompt_raw, seed_tag]);
        Ok(self.store.materialize(ability_id, prompt_raw, seed, &self.config.image, &self.t2i)?)
    }

    fn run_stage1_ability(
        &mut self,
        ability_id: &str,
        target: u64,
        sink: &mut DatasetSink,
    ) -> Result<(), JobError> {
        let mut ability = self.ability(ability_id)?.clone();
        let mut pool = self.new_pool();
        if ability.keyword_pool.is_empty() {
            ability.keyword_pool = generate_keyword_pool(
                &ability,
                self.config.generation.keyword_pool_size,
                &self.templates,
                &pool,
                &self.chat,
                derive_seed(self.seed, &["keyword_pool", ability_id]),
            )?;
        }
        if ability.question_pool.is_empty() {
            ability.question_pool = generate_question_pool(
                &ability,
                self.config.generation.question_pool_size,
                &self.templates,
                &pool,
                &self.chat,
                derive_seed(self.seed, &["question_pool", ability_id]),
            )?;
        }
        let mut corpus = PromptCorpus::default();
        let mut counter = 0u64;
        let mut batch_idx = 0u64;
        // Filter rejections make yields uneven; cap the batch loop so a
        // pathological configuration cannot spin forever.
        let max_batches = 4 * target / self.config.generation.prompts_per_call.max(1) as u64 + 16;
        while counter < target && batch_idx < max_batches {
            let batch = generate_prompt_batch(
                &ability,
                self.config.generation.prompts_per_call,
                &self.templates,
                &pool,
                &self.config.filter,
                &mut corpus,
                &self.chat,
                derive_seed(self.seed, &["prompts", ability_id, &batch_idx.to_string()]),
            )?;
            self.rejected_prompts += batch.rejected.len() as u64;
            let accepted_texts: Vec<String> =
                batch.accepted.iter().map(|p| p.raw_text.clone()).collect();
            if pool.is_full() {
                pool = rotate_pool(&pool, &accepted_texts);
            } else {
                pool.fill(&accepted_texts);
            }
            for prompt in &batch.accepted {
                if counter >= target {
                    break;
                }
                let id = sample_id(ability_id, counter);
                counter += 1;
                let dialogue = match generate_stage1_dialogue(
                    prompt,
                    &ability,
                    &self.config.limits,
                    &self.templates,
                    &pool,
                    &self.chat,
                    derive_seed(self.seed, &["stage1", &id]),
                ) {
                    Ok(d) => d,
                    // Length violations after a retry drop the sample; the id
                    // slot stays consumed so the stream remains aligned.
                    Err(DialogueError::TooLong { .. }) => continue,
                    Err(e) => return Err(e.into()),
                };
                let entry = self.image(ability_id, &prompt.raw_text, &id)?;
                let sample = substitute_placeholders(
                    &dialogue,
                    &[entry],
                    &id,
                    Provenance {
                        ability_id: ability_id.to_string(),
                        prompts: vec![prompt.raw_text.clone()],
                        seed: self.seed,
                    },
                )?;
                if !self.offer(sink, &sample)? {
                    return Ok(());
                }
            }
            batch_idx += 1;
        }
        Ok(())
    }

    fn run_pairs(
        &mut self,
        stage2: &Stage2Config,
        relation: RelationKind,
        target: u64,
        sink: &mut DatasetSink,
    ) -> Result<(), JobError> {
        let ability = self.ability(&stage2.source_ability)?.clone();
        let label = format!("pair_{}", relation.as_str());
        let pool = self.new_pool();
        let mut corpus = PromptCorpus::default();
        let mut done = 0u64;
        for attempt in 0..8u64 {
            if done >= target {
                break;
            }
            let want = (target - done) as usize;
            let (pairs, dropped) = generate_pair_prompts(
                relation,
                want,
                &ability,
                &self.templates,
                &pool,
                &self.config.filter,
                &mut corpus,
                &self.chat,
                derive_seed(self.seed, &["pairs", &label, &attempt.to_string()]),
            )?;
            self.dropped_pairs += dropped.len() as u64;
            for pair in &pairs {
                let id = sample_id(&label, done);
                done += 1;
                let dialogue = match generate_multi_image_dialogue(
                    pair,
                    &self.config.limits,
                    &ability,
                    &self.templates,
                    &pool,
                    &self.chat,
                    derive_seed(self.seed, &["pair_dialogue", &id]),
                ) {
                    Ok(d) => d,
                    Err(DialogueError::TooLong { .. }) => continue,
                    Err(e) => return Err(e.into()),
                };
                let first = self.image(&label, &pair.first.raw_text, &format!("{id}-a"))?;
                let second = self.image(&label, &pair.second.raw_text, &format!("{id}-b"))?;
                let sample = substitute_placeholders(
                    &dialogue,
                    &[first, second],
                    &id,
                    Provenance {
                        ability_id: label.clone(),
                        prompts: vec![pair.first.raw_text.clone(), pair.second.raw_text.clone()],
                        seed: self.seed,
                    },
                )?;
                if !self.offer(sink, &sample)? {
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    fn run_interleaved(
        &mut self,
        stage2: &Stage2Config,
        target: u64,
        sink: &mut DatasetSink,
    ) -> Result<(), JobError> {
        let ability = self.ability(&stage2.source_ability)?.clone();
        let label = "interleaved";
        let pool = self.new_pool();
        for i in 0..target {
            let id = sample_id(label, i);
            let phases = generate_phase_list(
                &stage2.interleaved_domain,
                stage2.interleaved_phases,
                &self.chat,
                derive_seed(self.seed, &["phases", &id]),
            )?;
            let dialogue = match generate_interleaved_dialogue(
                &phases,
                &self.config.limits,
                &ability,
                &self.templates,
                &pool,
                &self.config.filter,
                &self.chat,
                derive_seed(self.seed, &["interleaved", &id]),
            ) {
                Ok(d) => d,
                Err(DialogueError::TooLong { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let prompt_texts: Vec<String> = dialogue
                .turns
                .iter()
                .filter(|t| t.speaker == Speaker::Assistant)
                .flat_map(|t| t.image_prompts.iter().map(|p| p.raw_text.clone()))
                .collect();
            let mut entries = Vec::with_capacity(prompt_texts.len());
            for (j, raw) in prompt_texts.iter().enumerate() {
                entries.push(self.image(label, raw, &format!("{id}-{j}"))?);
            }
            let sample = substitute_placeholders(
                &dialogue,
                &entries,
                &id,
                Provenance { ability_id: label.to_string(), prompts: prompt_texts, seed: self.seed },
            )?;
            if !self.offer(sink, &sample)? {
                return Ok(());
            }
        }
        Ok(())
    }
}

fn stage1_plan(config: &JobConfig) -> AssemblyPlan {
    AssemblyPlan {
        stage: 1,
        target_counts: config.stage1.iter().map(|t| (t.ability.clone(), t.count)).collect(),
        output_path: config.output_dir.join("stage1.json"),
    }
}

fn stage2_plan(config: &JobConfig) -> Option<AssemblyPlan> {
    let stage2 = config.stage2.as_ref()?;
    let mut targets = BTreeMap::new();
    for (relation, count) in [
        (RelationKind::Similarity, stage2.pairs.similarity),
        (RelationKind::Difference, stage2.pairs.difference),
        (RelationKind::LogicalRelation, stage2.pairs.logical_relation),
    ] {
        if count > 0 {
            targets.insert(format!("pair_{}", relation.as_str()), count);
        }
    }
    if stage2.interleaved > 0 {
        targets.insert("interleaved".to_string(), stage2.interleaved);
    }
    if targets.is_empty() {
        return None;
    }
    Some(AssemblyPlan {
        stage: 2,
        target_counts: targets,
        output_path: config.output_dir.join("stage2.json"),
    })
}

/// The assembly plan for stage 1 or 2, or None when the stage has no targets.
pub fn plan_for_stage(config: &JobConfig, stage: u8) -> Option<AssemblyPlan> {
    match stage {
        1 => {
            let plan = stage1_plan(config);
            if plan.target_counts.is_empty() {
                None
            } else {
                Some(plan)
            }
        }
        2 => stage2_plan(config),
        _ => None,
    }
}

fn open_sink(
    config: &JobConfig,
    plan: AssemblyPlan,
    manifest_name: &str,
    hash: &str,
    resume: bool,
) -> Result<DatasetSink, JobError> {
    let manifest_path = config.output_dir.join(manifest_name);
    let manifest = if resume && manifest_path.exists() {
        let manifest = Manifest::load(&manifest_path)?;
        if manifest.config_hash != hash {
            return Err(JobError::Config(format!(
                "manifest {manifest_name} was written under config hash {}, current is {hash}; \
                 refusing to resume",
                manifest.config_hash
            )));
        }
        manifest
    } else {
        Manifest::new(&config.job_id, hash)
    };
    Ok(DatasetSink::open(plan, manifest, &manifest_path)?)
}

/// Runs a job to completion (or until the stop budget is spent), writing
/// dataset files, manifests, and `report.json` under the output directory.
pub fn run_job(config: &JobConfig, opts: &RunOptions) -> Result<JobReport, JobError> {
    config.validate()?;
    let seed = opts.seed_override.unwrap_or(config.seed);
    let hash = {
        // The effective seed participates in the hash so `--seed` overrides
        // cannot silently mix with an older manifest.
        let mut c = config.clone();
        c.seed = seed;
        c.config_hash()
    };
    let templates = TemplateSet::load(&config.templates_dir)?;
    let abilities = load_ability_specs(&config.abilities_dir)?;
    let plan1 = stage1_plan(config);
    let plan2 = stage2_plan(config);
    for ability_id in plan1.target_counts.keys() {
        if !abilities.iter().any(|a| a.ability_id == *ability_id) {
            return Err(JobError::Config(format!("stage1 references unknown ability `{ability_id}`")));
        }
    }

    let mut report = JobReport {
        job_id: config.job_id.clone(),
        status: JobStatus::Planned,
        seed,
        config_hash: hash.clone(),
        stage1_counts: plan1.target_counts.clone(),
        stage2_counts: plan2.as_ref().map(|p| p.target_counts.clone()).unwrap_or_default(),
        rejected_prompts: 0,
        dropped_pairs: 0,
        outputs: Vec::new(),
    };
    if opts.dry_run {
        return Ok(report);
    }

    std::fs::create_dir_all(&config.output_dir)?;
    let mut state = RunState {
        config,
        seed,
        templates,
        abilities,
        chat: chat_gateway(&config.backends.chat, opts.mock, seed, "CHAT_API_KEY")?,
        t2i: image_gateway(&config.backends.t2i, opts.mock, "T2I_API_KEY")?,
        store: ImageStore::new(&config.output_dir),
        budget: opts.stop_after,
        rejected_prompts: 0,
        dropped_pairs: 0,
    };

    let mut complete = true;
    let mut sink1 = open_sink(config, plan1, "manifest_stage1.jsonl", &hash, opts.resume)?;
    // Config order, not alphabetical: the file states intent.
    for target in &config.stage1 {
        if sink1.remaining().get(&target.ability).copied().unwrap_or(0) > 0 {
            state.run_stage1_ability(&target.ability, target.count, &mut sink1)?;
        }
    }
    report.stage1_counts = sink1.manifest().counters.clone();
    let (outcome, _) = sink1.finalize()?;
    if outcome == AssemblyOutcome::Complete {
        report.outputs.push("stage1.json".to_string());
    } else {
        complete = false;
    }

    if let Some(plan2) = plan2 {
        let stage2 = config.stage2.as_ref().expect("plan implies config");
        let mut sink2 = open_sink(config, plan2, "manifest_stage2.jsonl", &hash, opts.resume)?;
        for (relation, count) in [
            (RelationKind::Similarity, stage2.pairs.similarity),
            (RelationKind::Difference, stage2.pairs.difference),
            (RelationKind::LogicalRelation, stage2.pairs.logical_relation),
        ] {
            let label = format!("pair_{}", relation.as_str());
            if sink2.remaining().get(&label).copied().unwrap_or(0) > 0 {
                state.run_pairs(stage2, relation, count, &mut sink2)?;
            }
        }
        if sink2.remaining().get("interleaved").copied().unwrap_or(0) > 0 {
            state.run_interleaved(stage2, stage2.interleaved, &mut sink2)?;
        }
        report.stage2_counts = sink2.manifest().counters.clone();
        let (outcome, _) = sink2.finalize()?;
        if outcome == AssemblyOutcome::Complete {
            report.outputs.push("stage2.json".to_string());
        } else {
            complete = false;
        }
    }

    report.rejected_prompts = state.rejected_prompts;
    report.dropped_pairs = state.dropped_pairs;
    report.status = if complete { JobStatus::Complete } else { JobStatus::Incomplete };
    let report_path = config.output_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
