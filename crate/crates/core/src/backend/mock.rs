//! Deterministic mock backends for offline runs and tests.
//!
//! The mock chat backend is scriptable: each template carries a `Task:` marker
//! line, and a scenario maps markers either to canned replies or to the
//! built-in reply generators. Replies are a pure function of (request, seed),
//! so full pipeline runs are byte-identical across runs and platforms.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatRequest, ImageArtifact, ImageBackend, T2iRequest};

/// Task marker lines embedded in templates and inline prompts. The mock
/// dispatches on these; real backends just see them as part of the prompt.
pub mod markers {
    pub const PROMPT_GEN: &str = "Task: generate-sd-prompts";
    pub const PAIRED_PROMPT_GEN: &str = "Task: generate-paired-sd-prompts";
    pub const CAPTION_PAIR: &str = "Task: caption-pair";
    pub const STAGE1_ANSWER: &str = "Task: answer-image-question";
    pub const MULTI_IMAGE_DIALOGUE: &str = "Task: generate-pair-dialogue";
    pub const INTERLEAVED_DIALOGUE: &str = "Task: generate-interleaved-dialogue";
    pub const KEYWORD_POOL: &str = "Task: generate-keywords";
    pub const QUESTION_POOL: &str = "Task: generate-questions";
    pub const PHASE_LIST: &str = "Task: generate-phases";
    pub const JUDGE: &str = "Task: judge-answer";
}

const SUBJECTS: &[&str] = &[
    "giraffe", "owl", "lighthouse", "violin", "submarine", "cactus", "locomotive", "penguin",
    "windmill", "chandelier", "fox", "sailboat", "typewriter", "falcon", "greenhouse", "tram",
    "otter", "observatory", "carousel", "heron", "drawbridge", "accordion", "beehive", "kayak",
    "waterwheel", "telescope", "tortoise", "zeppelin", "fountain", "harpsichord", "iceberg",
    "lantern", "mosaic", "nutcracker", "orchard", "pagoda",
];

const SCENES: &[&str] = &[
    "narrow corridor", "misty harbor", "sunlit meadow", "crowded market", "abandoned factory",
    "mountain pass", "city rooftop", "quiet library", "desert highway", "frozen lake",
    "botanical garden", "subway platform", "coastal cliff", "village square", "rain-soaked street",
    "autumn forest", "hotel lobby", "river delta", "open-air theater", "snowy courtyard",
    "terraced vineyard", "neon alley", "canal bridge", "hilltop ruin",
];

const DETAILS: &[&str] = &[
    "golden hour light", "soft shadows", "vivid colors", "shallow depth of field", "morning fog",
    "dramatic clouds", "long exposure", "warm backlight", "reflective puddles", "dusty air",
    "gentle rain", "low angle view", "wide panorama", "close-up framing", "high contrast",
    "muted palette",
];

const STYLES: &[&str] = &[
    "photorealistic", "cinematic lighting", "watercolor painting", "studio photograph",
    "isometric illustration", "vintage film still", "oil on canvas", "macro photography",
];

const ADJECTIVES: &[&str] = &[
    "crimson", "turquoise", "weathered", "gleaming", "colossal", "miniature", "ornate", "rustic",
    "translucent", "spiraled", "angular", "mossy", "gilded", "frosted", "striped", "speckled",
    "amber", "cobalt", "ivory", "scarlet", "emerald", "charcoal", "lavender", "bronze",
];

const NOUN_POOL: &[&str] = &[
    "texture", "pattern", "engine", "sail", "feather", "petal", "gearwheel", "archway", "ribbon",
    "lattice", "prism", "dome", "spire", "hull", "canopy", "pillar",
];

const QUESTIONS: &[&str] = &[
    "What is shown in the image?",
    "Can you describe the main subject of this picture?",
    "What details stand out in this image?",
    "What is the setting of this photograph?",
    "Describe the scene depicted in the image.",
    "What objects are visible in the picture?",
    "What is happening in this image?",
    "How would you summarize the contents of this image?",
    "What is the atmosphere of the scene?",
    "What colors dominate this image?",
    "Where does this scene appear to take place?",
    "What is the most prominent element in the image?",
];

const PHASE_VERBS: &[&str] = &[
    "Prepare", "Rinse", "Chop", "Arrange", "Combine", "Heat", "Fold", "Measure", "Assemble",
    "Polish", "Attach", "Inspect", "Season", "Simmer", "Garnish", "Seal",
];

/// Canned replies keyed by task marker; anything absent falls through to the
/// built-in generators.
#[derive(Debug, Clone, Default)]
pub struct MockScenario {
    pub canned: BTreeMap<String, String>,
}

impl MockScenario {
    /// Loads a scenario file: a JSON object mapping task markers to replies.
    pub fn load(path: &std::path::Path) -> Result<Self, BackendError> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| BackendError::BadResponse(format!("scenario file: {e}")))?;
        let canned: BTreeMap<String, String> = serde_json::from_str(&content)
            .map_err(|e| BackendError::BadResponse(format!("scenario file: {e}")))?;
        Ok(MockScenario { canned })
    }
}

/// Deterministic chat mock. Replies depend only on (request, seed).
pub struct MockChatBackend {
    seed: u64,
    scenario: MockScenario,
}

impl MockChatBackend {
    pub fn new(seed: u64) -> Self {
        MockChatBackend { seed, scenario: MockScenario::default() }
    }

    pub fn with_scenario(seed: u64, scenario: MockScenario) -> Self {
        MockChatBackend { seed, scenario }
    }

    fn rng_for(&self, req: &ChatRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(req.seed.unwrap_or(0).to_le_bytes());
        hasher.update(req.full_text().as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

/// Reads the value of a `Name: value` line from the request text.
fn field<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let prefix = format!("{name}:");
    text.lines().find_map(|l| l.trim().strip_prefix(prefix.as_str())).map(str::trim)
}

fn field_usize(text: &str, name: &str, default: usize) -> usize {
    field(text, name).and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// Comma-separated values of a `Name: a, b, c` line.
fn field_list(text: &str, name: &str) -> Vec<String> {
    field(text, name)
        .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default()
}

/// Numbered items appearing after a `Name:` line.
fn numbered_after(text: &str, name: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut in_section = false;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with(&format!("{name}:")) {
            in_section = true;
            continue;
        }
        if in_section {
            let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits > 0 {
                let rest = trimmed[digits..].trim_start_matches(['.', ')']).trim();
                if !rest.is_empty() {
                    items.push(rest.to_string());
                }
            } else if !trimmed.is_empty() {
                break;
            }
        }
    }
    items
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn pick_owned(rng: &mut ChaCha8Rng, items: &[String]) -> Option<String> {
    if items.is_empty() {
        None
    } else {
        Some(items[rng.gen_range(0..items.len())].clone())
    }
}

/// Keywords of a serialized prompt, emphasis brackets stripped.
fn plain_keywords(prompt: &str) -> Vec<String> {
    prompt
        .split(',')
        .map(|k| k.trim().trim_matches(|c| c == '(' || c == ')').to_string())
        .filter(|k| !k.is_empty())
        .collect()
}

fn gen_prompt_line(rng: &mut ChaCha8Rng, reference: &[String]) -> String {
    let subject = pick_owned(rng, reference).unwrap_or_else(|| pick(rng, SUBJECTS).to_string());
    let scene = pick(rng, SCENES);
    let detail = pick(rng, DETAILS);
    let style = pick(rng, STYLES);
    if rng.gen_bool(0.3) {
        let adj = pick(rng, ADJECTIVES);
        format!("(({subject})), {scene}, {adj} {}, {detail}, {style}", pick(rng, NOUN_POOL))
    } else {
        format!("(({subject})), {scene}, {detail}, {style}")
    }
}

fn gen_prompts(rng: &mut ChaCha8Rng, text: &str) -> String {
    let n = field_usize(text, "Count", 20);
    let reference = field_list(text, "Reference keywords");
    (0..n)
        .map(|i| format!("{}. {}", i + 1, gen_prompt_line(rng, &reference)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn gen_keywords(rng: &mut ChaCha8Rng, text: &str) -> String {
    let n = field_usize(text, "Count", 30);
    let mut seen = Vec::new();
    let mut lines = Vec::new();
    let mut guard = 0;
    while lines.len() < n && guard < n * 20 {
        guard += 1;
        let kw = format!("{} {}", pick(rng, ADJECTIVES), pick(rng, NOUN_POOL));
        if !seen.contains(&kw) {
            seen.push(kw.clone());
            lines.push(format!("{}. {kw}", lines.len() + 1));
        }
    }
    lines.join("\n")
}

fn gen_questions(rng: &mut ChaCha8Rng, text: &str) -> String {
    let n = field_usize(text, "Count", 10).min(QUESTIONS.len());
    let mut indices: Vec<usize> = (0..QUESTIONS.len()).collect();
    indices.shuffle(rng);
    indices[..n]
        .iter()
        .enumerate()
        .map(|(i, &q)| format!("{}. {}", i + 1, QUESTIONS[q]))
        .collect::<Vec<_>>()
        .join("\n")
}

fn gen_stage1_answer(rng: &mut ChaCha8Rng, text: &str) -> String {
    let prompt = field(text, "Prompt").unwrap_or("");
    let question = field(text, "Question").unwrap_or("");
    let keywords = plain_keywords(prompt);
    let subject = keywords.first().cloned().unwrap_or_else(|| "scene".to_string());
    let rest = if keywords.len() > 1 { keywords[1..].join(", ") } else { "an open scene".to_string() };
    let q = question.to_lowercase();
    if q.contains("unusual") || q.contains("abnormal") || q.contains("funny") {
        format!(
            "In reality, a {subject} would not normally be found in {rest}; \
             the mismatch between subject and setting is what makes the image abnormal."
        )
    } else {
        let flourish = pick(rng, DETAILS);
        format!("The image shows a {subject} set against {rest}, rendered with {flourish}.")
    }
}

fn gen_pairs(rng: &mut ChaCha8Rng, text: &str) -> String {
    let n = field_usize(text, "Count", 5);
    let relation = field(text, "Relation").unwrap_or("difference");
    let mut lines = Vec::new();
    for i in 0..n {
        let (first, second) = match relation {
            "similarity" => {
                let subject = pick(rng, SUBJECTS);
                let (s1, s2) = (pick(rng, SCENES), pick(rng, SCENES));
                (
                    format!("(({subject})), {s1}, {}", pick(rng, STYLES)),
                    format!("(({subject})), {s2}, {}", pick(rng, STYLES)),
                )
            }
            "logical_relation" => {
                let subject = pick(rng, SUBJECTS);
                let scene = pick(rng, SCENES);
                (
                    format!("(({subject})), {scene}, intact, {}", pick(rng, STYLES)),
                    format!("(({subject})), {scene}, after the event, {}", pick(rng, STYLES)),
                )
            }
            _ => {
                let (a, b) = (pick(rng, SUBJECTS), pick(rng, SUBJECTS));
                let scene = pick(rng, SCENES);
                (
                    format!("(({a})), {scene}, {}", pick(rng, STYLES)),
                    format!("(({b})), {scene}, {}", pick(rng, STYLES)),
                )
            }
        };
        lines.push(format!("{}. {first} | {second}", i + 1));
    }
    lines.join("\n")
}

fn gen_captions(text: &str) -> String {
    let first = field(text, "First").unwrap_or("");
    let second = field(text, "Second").unwrap_or("");
    let describe = |p: &str| {
        let kws = plain_keywords(p);
        match kws.split_first() {
            Some((head, tail)) if !tail.is_empty() => format!("A {head} in {}", tail.join(", ")),
            Some((head, _)) => format!("A {head}"),
            None => "An empty scene".to_string(),
        }
    };
    format!("1. {}\n2. {}", describe(first), describe(second))
}

fn gen_pair_dialogue(rng: &mut ChaCha8Rng, text: &str) -> String {
    let relation = field(text, "Relation").unwrap_or("difference");
    let c1 = field(text, "First caption").unwrap_or("the first scene").to_string();
    let c2 = field(text, "Second caption").unwrap_or("the second scene").to_string();
    match relation {
        "similarity" => format!(
            "Q: What do the two images have in common?\n\
             A: Both images center on the same subject: {c1} and {c2} share their focus.\n\
             Q: Are the two images identical or merely similar?\n\
             A: They are similar but not identical; the settings differ while the subject stays the same."
        ),
        "logical_relation" => format!(
            "Q: Which image shows the earlier moment?\n\
             A: The first image does: {c1} precedes the state shown in the second.\n\
             Q: Does the second image follow logically from the first?\n\
             A: Yes, the second image ({c2}) depicts the outcome of what the first image set up."
        ),
        _ => {
            let either = pick(rng, &["subject", "setting"]);
            format!(
                "Q: What is different between the two images?\n\
                 A: The first image shows {c1}, while the second shows {c2}.\n\
                 Q: Is the main change in the {either} or in the style?\n\
                 A: The main change is in the {either}; the overall composition stays comparable."
            )
        }
    }
}

fn gen_phases(rng: &mut ChaCha8Rng, text: &str) -> String {
    let k = field_usize(text, "Count", 3);
    let domain = field(text, "Domain").unwrap_or("everyday objects");
    let mut lines = Vec::new();
    let mut used = Vec::new();
    let mut guard = 0;
    while lines.len() < k && guard < k * 20 {
        guard += 1;
        let phrase = format!("{} the {} for the {domain}", pick(rng, PHASE_VERBS), pick(rng, NOUN_POOL));
        if !used.contains(&phrase) {
            used.push(phrase.clone());
            lines.push(format!("{}. {phrase}", lines.len() + 1));
        }
    }
    lines.join("\n")
}

fn gen_interleaved(rng: &mut ChaCha8Rng, text: &str) -> String {
    let phases = numbered_after(text, "Phases");
    let mut blocks = Vec::new();
    for (i, phase) in phases.iter().enumerate() {
        let question = if i == 0 {
            "Can you walk me through the first step?".to_string()
        } else {
            format!("What comes after step {i}?")
        };
        let subject = pick(rng, SUBJECTS);
        let scene = pick(rng, SCENES);
        let style = pick(rng, STYLES);
        blocks.push(format!(
            "Q: {question}\nA: {phase}. [(({subject})), {scene}, {style}]"
        ));
    }
    blocks.join("\n")
}

fn gen_judge(rng: &mut ChaCha8Rng) -> String {
    let score = rng.gen_range(0..=5);
    format!("Score: {score} - the prediction was compared against the reference answer.")
}

impl ChatBackend for MockChatBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let text = req.full_text();
        for (marker, reply) in &self.scenario.canned {
            if text.contains(marker.as_str()) {
                return Ok(reply.clone());
            }
        }
        let mut rng = self.rng_for(req);
        let reply = if text.contains(markers::PROMPT_GEN) {
            gen_prompts(&mut rng, &text)
        } else if text.contains(markers::PAIRED_PROMPT_GEN) {
            gen_pairs(&mut rng, &text)
        } else if text.contains(markers::CAPTION_PAIR) {
            gen_captions(&text)
        } else if text.contains(markers::STAGE1_ANSWER) {
            gen_stage1_answer(&mut rng, &text)
        } else if text.contains(markers::MULTI_IMAGE_DIALOGUE) {
            gen_pair_dialogue(&mut rng, &text)
        } else if text.contains(markers::INTERLEAVED_DIALOGUE) {
            gen_interleaved(&mut rng, &text)
        } else if text.contains(markers::KEYWORD_POOL) {
            gen_keywords(&mut rng, &text)
        } else if text.contains(markers::QUESTION_POOL) {
            gen_questions(&mut rng, &text)
        } else if text.contains(markers::PHASE_LIST) {
            gen_phases(&mut rng, &text)
        } else if text.contains(markers::JUDGE) {
            gen_judge(&mut rng)
        } else {
            return Err(BackendError::BadResponse("mock: no task marker in request".into()));
        };
        Ok(reply)
    }
}

/// Deterministic image mock: PNG bytes are a pure function of
/// (prompt, seed, width, height).
pub struct MockImageBackend;

impl ImageBackend for MockImageBackend {
    fn generate(&self, req: &T2iRequest) -> Result<ImageArtifact, BackendError> {
        if req.width == 0 || req.height == 0 {
            return Err(BackendError::BadResponse("zero image dimension".into()));
        }
        let mut hasher = Sha256::new();
        hasher.update(req.prompt.as_bytes());
        hasher.update(req.seed.to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let base: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let tint: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let img = image::RgbImage::from_fn(req.width, req.height, |x, y| {
            let fx = x as f32 / req.width as f32;
            let fy = y as f32 / req.height as f32;
            let mix = |a: u8, b: u8, t: f32| (a as f32 * (1.0 - t) + b as f32 * t) as u8;
            let t = (fx + fy) / 2.0;
            image::Rgb([mix(base[0], tint[0], t), mix(base[1], tint[1], t), mix(base[2], tint[2], t)])
        });
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| BackendError::BadResponse(format!("png encode: {e}")))?;
        Ok(ImageArtifact {
            bytes,
            prompt: req.prompt.clone(),
            seed: req.seed,
            width: req.width,
            height: req.height,
        })
    }
}
