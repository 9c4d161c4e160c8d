//! Benchmark loading, judge prompting, score parsing, and aggregation.
//!
//! Scoring uses a fixed 0-5 rubric. Judge replies are free text; parsing
//! prefers an explicit `Score: <k>` marker and falls back to the first
//! standalone in-range integer, and never panics on arbitrary input.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatRequest, Gateway};
use crate::template::{TemplateKind, TemplateSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}:{line}: {detail}")]
    Format { path: String, line: usize, detail: String },
    #[error("rubric must have exactly 6 levels covering scores 0..=5")]
    BadRubric,
    #[error("judge reply has no parseable score")]
    Unparseable,
    #[error("judge score {0} is outside 0..=5")]
    OutOfRange(i64),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One rubric level: the score, what it means, and a worked exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricLevel {
    pub score: u8,
    pub criteria: String,
    pub exemplar: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRubric {
    pub levels: Vec<RubricLevel>,
}

impl ScoreRubric {
    /// Loads a rubric and checks it has exactly the six levels 0 through 5.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        let rubric: ScoreRubric = serde_json::from_str(&text).map_err(|e| EvalError::Format {
            path: path.display().to_string(),
            line: e.line(),
            detail: e.to_string(),
        })?;
        rubric.validate()?;
        Ok(rubric)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let scores: Vec<u8> = self.levels.iter().map(|l| l.score).collect();
        if scores != [0, 1, 2, 3, 4, 5] {
            return Err(EvalError::BadRubric);
        }
        Ok(())
    }
}

/// One benchmark item: a question about an image plus a reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCase {
    pub case_id: String,
    pub category: String,
    pub question: String,
    pub reference_answer: String,
    pub candidate_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub case_id: String,
    pub category: String,
    pub score: u8,
}

/// Reads a JSONL benchmark file. Errors carry the 1-based line number.
pub fn load_benchmark(path: &Path) -> Result<Vec<EvalCase>, EvalError> {
    let content = std::fs::read_to_string(path)?;
    let mut cases = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case: EvalCase = serde_json::from_str(line).map_err(|e| EvalError::Format {
            path: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        if !seen.insert(case.case_id.clone()) {
            return Err(EvalError::Format {
                path: path.display().to_string(),
                line: i + 1,
                detail: format!("duplicate case_id `{}`", case.case_id),
            });
        }
        cases.push(case);
    }
    Ok(cases)
}

fn render_slots(text: &str, slots: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        match rest[open..].find('}') {
            Some(close) => {
                let name = &rest[open + 1..open + close];
                match slots.get(name) {
                    Some(value) => out.push_str(value),
                    None => out.push_str(&rest[open..open + close + 1]),
                }
                rest = &rest[open + close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Builds the judge prompt: rubric levels with exemplars, the case under
/// review, and the `Score: <k>` reply instruction.
pub fn build_judge_prompt(templates: &TemplateSet, rubric: &ScoreRubric, case: &EvalCase) -> String {
    let rubric_block = rubric
        .levels
        .iter()
        .map(|l| format!("{}: {}\n   Example: {}", l.score, l.criteria, l.exemplar))
        .collect::<Vec<_>>()
        .join("\n");
    let mut slots = BTreeMap::new();
    slots.insert("rubric", rubric_block);
    slots.insert("question", case.question.clone());
    slots.insert("reference", case.reference_answer.clone());
    slots.insert("candidate", case.candidate_answer.clone());
    render_slots(templates.text(TemplateKind::Judge), &slots)
}

/// Extracts a 0-5 score from free-form judge text. Precedence: the last
/// `Score:` marker, then the first standalone integer. Out-of-range values at
/// either step are an error, as is text with no integer at all.
pub fn parse_judge_score(reply: &str) -> Result<u8, EvalError> {
    fn leading_int(s: &str) -> Option<i64> {
        let s = s.trim_start();
        let end = s
            .char_indices()
            .take_while(|&(i, c)| c.is_ascii_digit() || (i == 0 && c == '-'))
            .map(|(i, c)| i + c.len_utf8())
            .last()?;
        s[..end].parse().ok()
    }
    let check = |n: i64| {
        if (0..=5).contains(&n) {
            Ok(n as u8)
        } else {
            Err(EvalError::OutOfRange(n))
        }
    };
    if let Some(idx) = reply.to_ascii_lowercase().rfind("score:") {
        if let Some(n) = leading_int(&reply[idx + "score:".len()..]) {
            return check(n);
        }
    }
    // Fallback: first whitespace/punctuation-delimited integer token.
    for token in reply.split(|c: char| c.is_whitespace() || ",;()[]/".contains(c)) {
        let token = token.trim_end_matches(|c: char| ".!:".contains(c));
        if token.is_empty() {
            continue;
        }
        if let Ok(n) = token.parse::<i64>() {
            return check(n);
        }
    }
    Err(EvalError::Unparseable)
}

/// Scores one case at temperature zero, reprompting once if the first reply
/// cannot be parsed.
pub fn score_case(
    judge: &Gateway<dyn ChatBackend>,
    templates: &TemplateSet,
    rubric: &ScoreRubric,
    case: &EvalCase,
    seed: u64,
) -> Result<EvalResult, EvalError> {
    let body = build_judge_prompt(templates, rubric, case);
    let req = ChatRequest::new("You are an impartial grader.", body)
        .with_temperature(0.0)
        .with_seed(seed);
    let reply = judge.chat_complete(&req)?;
    let score = match parse_judge_score(&reply) {
        Ok(s) => s,
        Err(_) => {
            let mut retry = req.clone();
            retry.messages.push(crate::backend::ChatMessage {
                role: "user".into(),
                content: "Reply with exactly one line of the form `Score: <k>` where k is 0-5."
                    .into(),
            });
            retry.seed = Some(seed.wrapping_add(1));
            let reply = judge.chat_complete(&retry)?;
            parse_judge_score(&reply)?
        }
    };
    Ok(EvalResult { case_id: case.case_id.clone(), category: case.category.clone(), score })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub per_category: BTreeMap<String, f64>,
    pub overall: f64,
    pub case_count: usize,
}

/// Rounds half away from zero to two decimal places.
fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

/// Per-category means plus an overall mean of the category means (so each
/// category carries equal weight regardless of case count), both rounded to
/// two decimals.
pub fn aggregate_scores(results: &[EvalResult]) -> ScoreSummary {
    let mut sums: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for r in results {
        let entry = sums.entry(r.category.clone()).or_insert((0, 0));
        entry.0 += r.score as u64;
        entry.1 += 1;
    }
    let per_category: BTreeMap<String, f64> = sums
        .iter()
        .map(|(cat, &(sum, n))| (cat.clone(), round2(sum as f64 / n as f64)))
        .collect();
    let overall = if per_category.is_empty() {
        0.0
    } else {
        round2(per_category.values().sum::<f64>() / per_category.len() as f64)
    };
    ScoreSummary { per_category, overall, case_count: results.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockChatBackend;
    use crate::backend::BackendPolicy;
    use crate::template::test_support::write_default_templates;

    fn rubric() -> ScoreRubric {
        ScoreRubric {
            levels: (0..=5)
                .map(|score| RubricLevel {
                    score,
                    criteria: format!("level {score}"),
                    exemplar: format!("exemplar {score}"),
                })
                .collect(),
        }
    }

    #[test]
    fn rubric_must_cover_all_six_levels() {
        assert!(rubric().validate().is_ok());
        let mut bad = rubric();
        bad.levels.pop();
        assert!(matches!(bad.validate(), Err(EvalError::BadRubric)));
        let mut dup = rubric();
        dup.levels[5].score = 4;
        assert!(matches!(dup.validate(), Err(EvalError::BadRubric)));
    }

    #[test]
    fn parse_score_marker_and_fallback() {
        assert_eq!(parse_judge_score("Score: 4 - mostly consistent").unwrap(), 4);
        assert_eq!(parse_judge_score("I would give this a 3 out of 5.").unwrap(), 3);
        assert_eq!(parse_judge_score("score:5").unwrap(), 5);
        assert_eq!(parse_judge_score("The answer is weak.\nScore: 1").unwrap(), 1);
        assert_eq!(parse_judge_score("0").unwrap(), 0);
    }

    #[test]
    fn parse_score_rejects_out_of_range_and_garbage() {
        assert!(matches!(parse_judge_score("Score: 9"), Err(EvalError::OutOfRange(9))));
        assert!(matches!(parse_judge_score("Score: -1"), Err(EvalError::OutOfRange(-1))));
        assert!(matches!(parse_judge_score("no digits here"), Err(EvalError::Unparseable)));
        assert!(matches!(parse_judge_score(""), Err(EvalError::Unparseable)));
    }

    fn result(category: &str, score: u8) -> EvalResult {
        EvalResult { case_id: format!("{category}-{score}"), category: category.into(), score }
    }

    #[test]
    fn aggregate_matches_published_summaries() {
        // Category means 2.7, 2.2, 3.1 -> overall 2.67.
        let mut results = Vec::new();
        for (cat, scores) in [
            ("conversation", [3, 3, 3, 3, 3, 3, 3, 2, 2, 2]),
            ("detail", [2, 2, 2, 2, 2, 2, 2, 2, 3, 3]),
            ("reasoning", [3, 3, 3, 3, 3, 3, 3, 3, 3, 4]),
        ] {
            for (i, s) in scores.iter().enumerate() {
                results.push(EvalResult {
                    case_id: format!("{cat}-{i}"),
                    category: cat.into(),
                    score: *s,
                });
            }
        }
        let summary = aggregate_scores(&results);
        assert_eq!(summary.per_category["conversation"], 2.7);
        assert_eq!(summary.per_category["detail"], 2.2);
        assert_eq!(summary.per_category["reasoning"], 3.1);
        assert_eq!(summary.overall, 2.67);

        // Category means 3.6, 2.8, 3.7 -> overall 3.37.
        let mut results = Vec::new();
        for (cat, scores) in [
            ("conversation", [4, 4, 4, 4, 4, 4, 3, 3, 3, 3]),
            ("detail", [3, 3, 3, 3, 3, 3, 3, 3, 2, 2]),
            ("reasoning", [4, 4, 4, 4, 4, 4, 4, 3, 3, 3]),
        ] {
            for (i, s) in scores.iter().enumerate() {
                results.push(EvalResult {
                    case_id: format!("{cat}-{i}"),
                    category: cat.into(),
                    score: *s,
                });
            }
        }
        let summary = aggregate_scores(&results);
        assert_eq!(summary.overall, 3.37);
    }

    #[test]
    fn aggregate_weights_categories_equally() {
        let mut results = vec![result("a", 5)];
        for i in 0..99 {
            results.push(EvalResult { case_id: format!("b-{i}"), category: "b".into(), score: 1 });
        }
        let summary = aggregate_scores(&results);
        assert_eq!(summary.per_category["a"], 5.0);
        assert_eq!(summary.per_category["b"], 1.0);
        assert_eq!(summary.overall, 3.0);
        assert_eq!(summary.case_count, 100);
    }

    #[test]
    fn benchmark_loader_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        let good = serde_json::json!({
            "case_id": "c1", "category": "conversation", "question": "What color?",
            "reference_answer": "Red.", "candidate_answer": "It is red."
        });
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match load_benchmark(&path) {
            Err(EvalError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Format error, got {other:?}"),
        }
        let dup = format!("{good}\n{good}\n");
        std::fs::write(&path, dup).unwrap();
        match load_benchmark(&path) {
            Err(EvalError::Format { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("duplicate case_id"));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        std::fs::write(&path, format!("{good}\n")).unwrap();
        assert_eq!(load_benchmark(&path).unwrap().len(), 1);
    }

    #[test]
    fn score_case_is_deterministic_with_mock_judge() {
        let dir = tempfile::tempdir().unwrap();
        write_default_templates(dir.path());
        let templates = TemplateSet::load(dir.path()).unwrap();
        let judge: Gateway<dyn ChatBackend> =
            Gateway::new(Box::new(MockChatBackend::new(7)), BackendPolicy::default());
        let case = EvalCase {
            case_id: "c1".into(),
            category: "conversation".into(),
            question: "What animal is shown?".into(),
            reference_answer: "An owl perched on a branch.".into(),
            candidate_answer: "A bird, likely an owl.".into(),
        };
        let a = score_case(&judge, &templates, &rubric(), &case, 42).unwrap();
        let b = score_case(&judge, &templates, &rubric(), &case, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.score <= 5);
    }
}
