//! Command-line front end for the data generation pipeline.
//!
//! Exit codes: 0 on success, 2 when a run finished incomplete but resumable,
//! 1 on any error. Secrets are only ever read from environment variables
//! (`CHAT_API_KEY`, `T2I_API_KEY`, `JUDGE_API_KEY` by default).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vistune::assemble::{AssemblyOutcome, DatasetSink, ImageStore};
use vistune::dialogue::{generate_question_pool, generate_stage1_dialogue};
use vistune::eval::{aggregate_scores, load_benchmark, score_case, ScoreRubric};
use vistune::job::run::{chat_gateway, derive_seed, image_gateway, JobStatus, RunOptions};
use vistune::job::{run_job, JobConfig, JobError};
use vistune::prompt::{generate_keyword_pool, generate_prompt_batch, PromptCorpus};
use vistune::schema::Manifest;
use vistune::template::{load_ability_specs, AbilitySpec, InContextPool, TemplateSet};

#[derive(Parser)]
#[command(name = "vistune", about = "Synthesizes visual instruction tuning data", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Job configuration file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Force deterministic mock backends.
    #[arg(long)]
    mock: bool,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Ability spec and template operations.
    Specs {
        #[command(subcommand)]
        cmd: SpecsCmd,
    },
    /// Keyword and question pool operations.
    Pools {
        #[command(subcommand)]
        cmd: PoolsCmd,
    },
    /// Prompt generation operations.
    Prompts {
        #[command(subcommand)]
        cmd: PromptsCmd,
    },
    /// Image generation operations.
    Images {
        #[command(subcommand)]
        cmd: ImagesCmd,
    },
    /// Dialogue generation operations.
    Dialogues {
        #[command(subcommand)]
        cmd: DialoguesCmd,
    },
    /// Run the full pipeline described by the config.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue a previous run from its manifests.
        #[arg(long)]
        resume: bool,
        /// Validate and print the plan without generating anything.
        #[arg(long)]
        dry_run: bool,
        /// Stop after this many accepted samples (testing aid).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Finalize dataset files from existing manifests and partial logs.
    Assemble {
        #[command(flatten)]
        common: Common,
    },
    /// Score a benchmark file with the judge backend.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Benchmark cases (JSONL).
        #[arg(long)]
        benchmark: PathBuf,
        /// Scoring rubric (JSON).
        #[arg(long)]
        rubric: PathBuf,
        /// Where to write per-case results (JSON). Defaults to stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the report of the last run.
    Report {
        /// Job configuration file (TOML).
        #[arg(short, long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum SpecsCmd {
    /// Load all ability specs and templates, reporting any issue.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum PoolsCmd {
    /// Generate a keyword or question pool for one ability.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ability: String,
        /// "keywords" or "questions".
        #[arg(long, default_value = "keywords")]
        kind: String,
        #[arg(short = 'n', long, default_value_t = 30)]
        count: usize,
    },
}

#[derive(Subcommand)]
enum PromptsCmd {
    /// Generate and filter one batch of prompts for an ability.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ability: String,
        #[arg(short = 'n', long)]
        count: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ImagesCmd {
    /// Render one prompt into the image store.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "adhoc")]
        ability: String,
        #[arg(long)]
        prompt: String,
    },
}

#[derive(Subcommand)]
enum DialoguesCmd {
    /// Generate one single-image dialogue for a prompt.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ability: String,
        #[arg(long)]
        prompt: String,
    },
}

struct Loaded {
    config: JobConfig,
    templates: TemplateSet,
    abilities: Vec<AbilitySpec>,
    seed: u64,
}

fn load(common: &Common) -> Result<Loaded, JobError> {
    let config = JobConfig::load(&common.config)?;
    let templates = TemplateSet::load(&config.templates_dir)?;
    let abilities = load_ability_specs(&config.abilities_dir)?;
    let seed = common.seed.unwrap_or(config.seed);
    Ok(Loaded { config, templates, abilities, seed })
}

fn find_ability<'a>(loaded: &'a Loaded, id: &str) -> Result<&'a AbilitySpec, JobError> {
    loaded
        .abilities
        .iter()
        .find(|a| a.ability_id == id)
        .ok_or_else(|| JobError::Config(format!("unknown ability `{id}`")))
}

fn empty_pool(config: &JobConfig) -> InContextPool {
    InContextPool::new(
        config.pool.capacity,
        config.pool.rotation_interval,
        config.pool.rotation_fraction,
    )
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), JobError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode, JobError> {
    match cli.command {
        Command::Specs { cmd: SpecsCmd::Validate { common } } => {
            let loaded = load(&common)?;
            println!(
                "ok: {} abilities, {} templates",
                loaded.abilities.len(),
                vistune::template::TemplateKind::ALL.len()
            );
            for ability in &loaded.abilities {
                println!(
                    "  {} ({} keywords, {} questions)",
                    ability.ability_id,
                    ability.keyword_pool.len(),
                    ability.question_pool.len()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Pools { cmd: PoolsCmd::Gen { common, ability, kind, count } } => {
            let loaded = load(&common)?;
            let spec = find_ability(&loaded, &ability)?;
            let chat =
                chat_gateway(&loaded.config.backends.chat, common.mock, loaded.seed, "CHAT_API_KEY")?;
            let pool = empty_pool(&loaded.config);
            let items = match kind.as_str() {
                "keywords" => generate_keyword_pool(
                    spec,
                    count,
                    &loaded.templates,
                    &pool,
                    &chat,
                    derive_seed(loaded.seed, &["keyword_pool", &ability]),
                )?,
                "questions" => generate_question_pool(
                    spec,
                    count,
                    &loaded.templates,
                    &pool,
                    &chat,
                    derive_seed(loaded.seed, &["question_pool", &ability]),
                )?,
                other => return Err(JobError::Config(format!("unknown pool kind `{other}`"))),
            };
            print_json(&items)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Prompts { cmd: PromptsCmd::Gen { common, ability, count } } => {
            let loaded = load(&common)?;
            let spec = find_ability(&loaded, &ability)?;
            let chat =
                chat_gateway(&loaded.config.backends.chat, common.mock, loaded.seed, "CHAT_API_KEY")?;
            let pool = empty_pool(&loaded.config);
            let mut corpus = PromptCorpus::default();
            let batch = generate_prompt_batch(
                spec,
                count.unwrap_or(loaded.config.generation.prompts_per_call),
                &loaded.templates,
                &pool,
                &loaded.config.filter,
                &mut corpus,
                &chat,
                derive_seed(loaded.seed, &["prompts", &ability, "0"]),
            )?;
            let accepted: Vec<&str> = batch.accepted.iter().map(|p| p.raw_text.as_str()).collect();
            let rejected: Vec<(&str, &vistune::prompt::RejectReason)> =
                batch.rejected.iter().map(|(raw, why)| (raw.as_str(), why)).collect();
            print_json(&serde_json::json!({ "accepted": accepted, "rejected": rejected }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Images { cmd: ImagesCmd::Gen { common, ability, prompt } } => {
            let loaded = load(&common)?;
            let t2i = image_gateway(&loaded.config.backends.t2i, common.mock, "T2I_API_KEY")?;
            let store = ImageStore::new(&loaded.config.output_dir);
            std::fs::create_dir_all(&loaded.config.output_dir)?;
            let entry = store.materialize(
                &ability,
                &prompt,
                derive_seed(loaded.seed, &["image", &ability, &prompt, "cli"]),
                &loaded.config.image,
                &t2i,
            )?;
            print_json(&entry)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Dialogues { cmd: DialoguesCmd::Gen { common, ability, prompt } } => {
            let loaded = load(&common)?;
            let spec = find_ability(&loaded, &ability)?;
            let chat =
                chat_gateway(&loaded.config.backends.chat, common.mock, loaded.seed, "CHAT_API_KEY")?;
            let parsed = vistune::prompt::parse_sd_prompt(&prompt, &ability)
                .map_err(|e| JobError::Config(format!("bad prompt: {e}")))?;
            let dialogue = generate_stage1_dialogue(
                &parsed,
                spec,
                &loaded.config.limits,
                &loaded.templates,
                &empty_pool(&loaded.config),
                &chat,
                derive_seed(loaded.seed, &["stage1", "cli"]),
            )?;
            print_json(&dialogue)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { common, resume, dry_run, stop_after } => {
            let config = JobConfig::load(&common.config)?;
            let report = run_job(
                &config,
                &RunOptions {
                    mock: common.mock,
                    seed_override: common.seed,
                    resume,
                    dry_run,
                    stop_after,
                },
            )?;
            print_json(&report)?;
            Ok(match report.status {
                JobStatus::Incomplete => ExitCode::from(2),
                _ => ExitCode::SUCCESS,
            })
        }
        Command::Assemble { common } => {
            let config = JobConfig::load(&common.config)?;
            let mut all_complete = true;
            for (stage, manifest_name, plan) in [
                (1u8, "manifest_stage1.jsonl", vistune::job::run::plan_for_stage(&config, 1)),
                (2u8, "manifest_stage2.jsonl", vistune::job::run::plan_for_stage(&config, 2)),
            ] {
                let Some(plan) = plan else { continue };
                let manifest_path = config.output_dir.join(manifest_name);
                if !manifest_path.exists() {
                    println!("stage {stage}: no manifest yet");
                    all_complete = false;
                    continue;
                }
                let manifest = Manifest::load(&manifest_path)?;
                let sink = DatasetSink::open(plan, manifest, &manifest_path)?;
                let remaining: BTreeMap<String, u64> = sink.remaining();
                let (outcome, report) = sink.finalize()?;
                match outcome {
                    AssemblyOutcome::Complete => {
                        println!("stage {stage}: complete, {} samples, valid: {}", report.count, report.is_valid());
                    }
                    AssemblyOutcome::Incomplete => {
                        println!("stage {stage}: incomplete, remaining {remaining:?}");
                        all_complete = false;
                    }
                }
            }
            Ok(if all_complete { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Eval { common, benchmark, rubric, out } => {
            let loaded = load(&common)?;
            let rubric = ScoreRubric::load(&rubric)?;
            let cases = load_benchmark(&benchmark)?;
            let judge = chat_gateway(
                &loaded.config.backends.judge,
                common.mock,
                loaded.seed,
                "JUDGE_API_KEY",
            )?;
            let mut results = Vec::with_capacity(cases.len());
            for case in &cases {
                results.push(score_case(
                    &judge,
                    &loaded.templates,
                    &rubric,
                    case,
                    derive_seed(loaded.seed, &["judge", &case.case_id]),
                )?);
            }
            let summary = aggregate_scores(&results);
            if let Some(out) = out {
                std::fs::write(
                    &out,
                    serde_json::to_string_pretty(&serde_json::json!({
                        "results": results,
                        "summary": summary,
                    }))?,
                )?;
            }
            print_json(&summary)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { config } => {
            let config = JobConfig::load(&config)?;
            let path = config.output_dir.join("report.json");
            let text = std::fs::read_to_string(&path)?;
            println!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
