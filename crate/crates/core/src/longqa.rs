//! Long-form QA evaluation scaffolding: exact prompt construction for the
//! two question-generation settings (questions from the raw passage vs from
//! an intermediate summary), a pluggable chat-completion client with a
//! deterministic fixture replayer, and a 0–3 judge-score aggregation table.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Reference-scale generation cap for answers.
pub const MAX_ANSWER_TOKENS: usize = 512;

pub const JUDGE_DIMENSIONS: [&str; 3] = ["coherence", "relevance", "accuracy"];

const SUMMARY_TEMPLATE: &str = "Summarize the paragraphs below in the context of {title} in {domain}.";
const QG_TEMPLATE: &str = "Using the context below, come up with follow-up questions such that \
answers are beyond few words or a couple of phrases. Rank the generated questions in the order \
of decreasing complexity to answer and display only the top 3. \n{context}";

#[derive(Debug, Error)]
pub enum LongqaError {
    #[error("empty field: {0}")]
    EmptyField(&'static str),
    #[error("setting {setting:?} {problem}")]
    BadSetting {
        setting: QgSetting,
        problem: &'static str,
    },
    #[error("no fixture response recorded for request hash {hash}")]
    MissingFixture { hash: String },
    #[error("fixture line {line}: {msg}")]
    BadFixture { line: usize, msg: String },
    #[error("could not parse judge response: {0}")]
    BadJudgeResponse(String),
    #[error("chat provider error: {0}")]
    Provider(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QgSetting {
    /// Questions generated directly from the passage.
    QgPassage,
    /// Questions generated from an intermediate summary.
    QgSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QGRequest {
    pub setting: QgSetting,
    pub title: Option<String>,
    pub domain: Option<String>,
    pub context: String,
    pub max_questions: usize,
}

impl QGRequest {
    pub fn validate(&self) -> Result<(), LongqaError> {
        if self.context.is_empty() {
            return Err(LongqaError::EmptyField("context"));
        }
        let has_meta = self.title.is_some() && self.domain.is_some();
        match self.setting {
            QgSetting::QgSummary if !has_meta => Err(LongqaError::BadSetting {
                setting: self.setting,
                problem: "requires title and domain",
            }),
            QgSetting::QgPassage if self.title.is_some() || self.domain.is_some() => {
                Err(LongqaError::BadSetting {
                    setting: self.setting,
                    problem: "must not carry title/domain",
                })
            }
            _ => Ok(()),
        }
    }
}

/// Judge request carrying the fixed three-dimension 0–3 rubric.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest {
    pub question: String,
    pub candidate_answer: String,
    pub reference_context: String,
}

impl JudgeRequest {
    pub fn validate(&self) -> Result<(), LongqaError> {
        if self.question.is_empty() {
            return Err(LongqaError::EmptyField("question"));
        }
        if self.candidate_answer.is_empty() {
            return Err(LongqaError::EmptyField("candidate_answer"));
        }
        if self.reference_context.is_empty() {
            return Err(LongqaError::EmptyField("reference_context"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Prompt builders
// ---------------------------------------------------------------------------

pub fn build_summary_prompt(title: &str, domain: &str, passage: &str) -> Result<String, LongqaError> {
    if title.is_empty() {
        return Err(LongqaError::EmptyField("title"));
    }
    if domain.is_empty() {
        return Err(LongqaError::EmptyField("domain"));
    }
    if passage.is_empty() {
        return Err(LongqaError::EmptyField("passage"));
    }
    let head = SUMMARY_TEMPLATE
        .replace("{title}", title)
        .replace("{domain}", domain);
    Ok(format!("{head}\n{passage}"))
}

/// Identical template for both settings; they differ only in what the
/// context is (raw passage vs generated summary).
pub fn build_qg_prompt(context: &str) -> Result<String, LongqaError> {
    if context.is_empty() {
        return Err(LongqaError::EmptyField("context"));
    }
    Ok(QG_TEMPLATE.replace("{context}", context))
}

/// Answer prompt plus the generation cap the request must carry.
pub fn build_answer_prompt(question: &str, document: &str) -> Result<(String, usize), LongqaError> {
    if question.is_empty() {
        return Err(LongqaError::EmptyField("question"));
    }
    if document.is_empty() {
        return Err(LongqaError::EmptyField("document"));
    }
    Ok((
        format!(
            "Answer the question using only the document below.\n\nDocument:\n{document}\n\nQuestion: {question}\nAnswer:"
        ),
        MAX_ANSWER_TOKENS,
    ))
}

/// House judge template (the rubric dimensions and 0–3 scale are fixed; the
/// surrounding wording is this artifact's own, not a published prompt).
pub fn build_judge_prompt(req: &JudgeRequest) -> Result<String, LongqaError> {
    req.validate()?;
    Ok(format!(
        "You are grading an answer to a question about a reference document. \
Rate the answer on a scale of 0-3 for the following dimensions: coherence, relevance, and accuracy. \
Reply with exactly three lines, `coherence: <score>`, `relevance: <score>`, `accuracy: <score>`.\n\n\
Document:\n{}\n\nQuestion: {}\n\nAnswer: {}",
        req.reference_context, req.question, req.candidate_answer
    ))
}

// ---------------------------------------------------------------------------
// Chat clients
// ---------------------------------------------------------------------------

/// Stable identity of a request for transcript recording/replay: SHA-256 of
/// the prompt bytes, a NUL separator, and the decimal max_tokens.
pub fn request_hash(prompt: &str, max_tokens: usize) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(max_tokens.to_string().as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub trait ChatClient {
    fn send(&self, prompt: &str, max_tokens: usize) -> Result<String, LongqaError>;
}

/// Deterministic replayer over a recorded transcript
/// (JSONL of `{"request_hash": ..., "response_text": ...}`).
pub struct FixtureClient {
    responses: HashMap<String, String>,
}

impl FixtureClient {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        FixtureClient {
            responses: pairs.into_iter().collect(),
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LongqaError> {
        #[derive(serde::Deserialize)]
        struct Line {
            request_hash: String,
            response_text: String,
        }
        let mut responses = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line).map_err(|e| LongqaError::BadFixture {
                line: i + 1,
                msg: e.to_string(),
            })?;
            responses.insert(parsed.request_hash, parsed.response_text);
        }
        Ok(FixtureClient { responses })
    }
}

impl ChatClient for FixtureClient {
    fn send(&self, prompt: &str, max_tokens: usize) -> Result<String, LongqaError> {
        let hash = request_hash(prompt, max_tokens);
        self.responses
            .get(&hash)
            .cloned()
            .ok_or(LongqaError::MissingFixture { hash })
    }
}

/// Live OpenAI-compatible chat-completions client (blocking). Endpoint and
/// model come from the constructor; the API key from the named environment
/// variable. Retries with exponential backoff. Never exercised by tests.
pub struct HttpChatClient {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub max_retries: u32,
}

impl HttpChatClient {
    pub fn new(endpoint: &str, model: &str, api_key_env: &str) -> Self {
        HttpChatClient {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key_env: api_key_env.to_string(),
            max_retries: 3,
        }
    }
}

impl ChatClient for HttpChatClient {
    fn send(&self, prompt: &str, max_tokens: usize) -> Result<String, LongqaError> {
        let key = std::env::var(&self.api_key_env)
            .map_err(|_| LongqaError::Provider(format!("env var {} not set", self.api_key_env)))?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_tokens,
        });
        let client = reqwest::blocking::Client::new();
        let mut delay = std::time::Duration::from_millis(500);
        let mut last_err = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            let resp = client
                .post(&self.endpoint)
                .bearer_auth(&key)
                .json(&body)
                .send();
            match resp.and_then(|r| r.error_for_status()) {
                Ok(r) => {
                    let v: serde_json::Value = r
                        .json()
                        .map_err(|e| LongqaError::Provider(e.to_string()))?;
                    let text = v["choices"][0]["message"]["content"]
                        .as_str()
                        .ok_or_else(|| {
                            LongqaError::Provider("malformed completion response".into())
                        })?;
                    return Ok(text.to_string());
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(LongqaError::Provider(last_err))
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LongDocument {
    pub id: String,
    pub title: String,
    pub domain: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgedQuestion {
    pub question: String,
    pub answer: String,
    /// coherence, relevance, accuracy.
    pub scores: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub enum DocOutcome {
    Scored(Vec<JudgedQuestion>),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocResult {
    pub doc_id: String,
    pub outcome: DocOutcome,
}

/// Per-dimension means over all judged questions, plus their average.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<DocResult>,
    pub mean_scores: [f64; 3],
    pub avg: f64,
    pub n_questions: usize,
}

/// Average of one Table-layout row: mean of the three dimension scores.
pub fn aggregate_row(scores: [f64; 3]) -> f64 {
    (scores[0] + scores[1] + scores[2]) / 3.0
}

/// Round for display to two decimals (the table convention).
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Pull up to `max_questions` non-empty lines out of a question-generation
/// response, stripping any leading list numbering.
fn parse_questions(response: &str, max_questions: usize) -> Vec<String> {
    response
        .lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')')
                .trim_start()
        })
        .filter(|l| !l.is_empty())
        .take(max_questions)
        .map(|s| s.to_string())
        .collect()
}

fn parse_judge_scores(response: &str) -> Result<[f64; 3], LongqaError> {
    let lower = response.to_lowercase();
    let mut scores = [0.0; 3];
    for (i, dim) in JUDGE_DIMENSIONS.iter().enumerate() {
        let pos = lower
            .find(dim)
            .ok_or_else(|| LongqaError::BadJudgeResponse(format!("missing dimension {dim}")))?;
        let rest = &lower[pos + dim.len()..];
        let num: String = rest
            .chars()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(|c| c.is_ascii_digit() || *c == '.')
            .collect();
        scores[i] = num
            .parse()
            .map_err(|_| LongqaError::BadJudgeResponse(format!("no score after {dim}")))?;
        if !(0.0..=3.0).contains(&scores[i]) {
            return Err(LongqaError::BadJudgeResponse(format!(
                "{dim} score {} outside 0-3",
                scores[i]
            )));
        }
    }
    Ok(scores)
}

fn run_document(
    doc: &LongDocument,
    setting: QgSetting,
    client: &dyn ChatClient,
    max_questions: usize,
) -> Result<Vec<JudgedQuestion>, LongqaError> {
    let context = match setting {
        QgSetting::QgPassage => doc.text.clone(),
        QgSetting::QgSummary => {
            let prompt = build_summary_prompt(&doc.title, &doc.domain, &doc.text)?;
            client.send(&prompt, MAX_ANSWER_TOKENS)?
        }
    };
    let questions = {
        let prompt = build_qg_prompt(&context)?;
        parse_questions(&client.send(&prompt, MAX_ANSWER_TOKENS)?, max_questions)
    };
    let mut judged = Vec::new();
    for q in questions {
        let (prompt, cap) = build_answer_prompt(&q, &doc.text)?;
        let answer = client.send(&prompt, cap)?;
        let judge_req = JudgeRequest {
            question: q.clone(),
            candidate_answer: answer.clone(),
            reference_context: doc.text.clone(),
        };
        let verdict = client.send(&build_judge_prompt(&judge_req)?, MAX_ANSWER_TOKENS)?;
        judged.push(JudgedQuestion {
            question: q,
            answer,
            scores: parse_judge_scores(&verdict)?,
        });
    }
    Ok(judged)
}

/// Run summarize → question-generate → answer → judge for every document.
/// A client failure on one document records an error entry and the pipeline
/// continues. Results are order-stable by document position.
pub fn run_pipeline(
    documents: &[LongDocument],
    setting: QgSetting,
    client: &dyn ChatClient,
    max_questions: usize,
) -> ResultsTable {
    let mut rows = Vec::new();
    let mut sums = [0.0; 3];
    let mut n = 0usize;
    for doc in documents {
        match run_document(doc, setting, client, max_questions) {
            Ok(judged) => {
                for jq in &judged {
                    for d in 0..3 {
                        sums[d] += jq.scores[d];
                    }
                    n += 1;
                }
                rows.push(DocResult {
                    doc_id: doc.id.clone(),
                    outcome: DocOutcome::Scored(judged),
                });
            }
            Err(e) => rows.push(DocResult {
                doc_id: doc.id.clone(),
                outcome: DocOutcome::Failed(e.to_string()),
            }),
        }
    }
    let mean_scores = if n > 0 {
        [
            sums[0] / n as f64,
            sums[1] / n as f64,
            sums[2] / n as f64,
        ]
    } else {
        [0.0; 3]
    };
    let avg = if n > 0 { aggregate_row(mean_scores) } else { 0.0 };
    ResultsTable {
        rows,
        mean_scores,
        avg,
        n_questions: n,
    }
}

/// CSV in the results-table column layout:
/// `doc_id,coherence,relevance,accuracy,avg` with a final `mean` row.
pub fn results_to_csv(table: &ResultsTable) -> String {
    let mut out = String::from("doc_id,coherence,relevance,accuracy,avg\n");
    for row in &table.rows {
        match &row.outcome {
            DocOutcome::Scored(judged) => {
                let mut sums = [0.0; 3];
                for jq in judged {
                    for d in 0..3 {
                        sums[d] += jq.scores[d];
                    }
                }
                let n = judged.len().max(1) as f64;
                let means = [sums[0] / n, sums[1] / n, sums[2] / n];
                out.push_str(&format!(
                    "{},{:.2},{:.2},{:.2},{:.2}\n",
                    row.doc_id,
                    means[0],
                    means[1],
                    means[2],
                    aggregate_row(means)
                ));
            }
            DocOutcome::Failed(msg) => {
                out.push_str(&format!("{},error,error,error,{}\n", row.doc_id, msg.replace(',', ";")));
            }
        }
    }
    if table.n_questions > 0 {
        out.push_str(&format!(
            "mean,{:.2},{:.2},{:.2},{:.2}\n",
            table.mean_scores[0], table.mean_scores[1], table.mean_scores[2], table.avg
        ));
    }
    out
}

pub fn write_results_csv(table: &ResultsTable, path: &Path) -> Result<(), LongqaError> {
    let io = |e: std::io::Error| LongqaError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(results_to_csv(table).as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_prompt_golden_prefix() {
        let p = build_summary_prompt("T", "D", "body").unwrap();
        assert!(p.starts_with("Summarize the paragraphs below in the context of T in D."));
        assert!(!p.contains("{title}"));
        assert!(!p.contains("{domain}"));
        assert!(p.contains("body"));
    }

    #[test]
    fn summary_prompt_unicode_round_trip() {
        let title = "Čajkovskij — 1812 увертюра";
        let p = build_summary_prompt(title, "музыка", "text").unwrap();
        assert!(p.contains(title));
    }

    #[test]
    fn qg_prompt_contains_verbatim_clauses() {
        let p = build_qg_prompt("CTX").unwrap();
        assert!(p.contains("display only the top 3"));
        assert!(p.contains("Rank the generated questions in the order of decreasing complexity"));
        assert!(p.contains(
            "come up with follow-up questions such that answers are beyond few words"
        ));
        assert!(!p.contains("{context}"));
        assert!(p.ends_with("CTX"));
    }

    #[test]
    fn qg_prompt_golden_full_text() {
        assert_eq!(
            build_qg_prompt("X").unwrap(),
            "Using the context below, come up with follow-up questions such that answers are \
beyond few words or a couple of phrases. Rank the generated questions in the order of \
decreasing complexity to answer and display only the top 3. \nX"
        );
    }

    #[test]
    fn answer_prompt_carries_512_cap() {
        let (p, cap) = build_answer_prompt("why?", "the doc").unwrap();
        assert_eq!(cap, 512);
        assert!(p.contains("why?"));
        assert!(p.contains("the doc"));
        assert!(matches!(
            build_answer_prompt("", "doc"),
            Err(LongqaError::EmptyField("question"))
        ));
    }

    #[test]
    fn empty_fields_rejected() {
        assert!(build_summary_prompt("", "d", "p").is_err());
        assert!(build_qg_prompt("").is_err());
        let bad = QGRequest {
            setting: QgSetting::QgSummary,
            title: None,
            domain: None,
            context: "c".into(),
            max_questions: 3,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn judge_prompt_names_rubric() {
        let req = JudgeRequest {
            question: "q".into(),
            candidate_answer: "a".into(),
            reference_context: "ctx".into(),
        };
        let p = build_judge_prompt(&req).unwrap();
        assert!(p.contains("scale of 0-3"));
        assert!(p.contains("coherence, relevance, and accuracy"));
    }

    #[test]
    fn judge_score_parsing() {
        let s = parse_judge_scores("coherence: 3\nrelevance: 2\naccuracy: 1").unwrap();
        assert_eq!(s, [3.0, 2.0, 1.0]);
        assert!(parse_judge_scores("coherence: 5\nrelevance: 2\naccuracy: 1").is_err());
        assert!(parse_judge_scores("nothing useful").is_err());
    }

    fn fixture_for(doc: &LongDocument, judge_scores: &[[u32; 3]]) -> FixtureClient {
        // Record the full QG-passage transcript for one document with one
        // generated question per judge-score row.
        let mut pairs = Vec::new();
        let qg_prompt = build_qg_prompt(&doc.text).unwrap();
        let questions: Vec<String> = (0..judge_scores.len())
            .map(|i| format!("What about part {i} of {}?", doc.id))
            .collect();
        let listing: Vec<String> = questions
            .iter()
            .enumerate()
            .map(|(i, q)| format!("{}. {}", i + 1, q))
            .collect();
        pairs.push((
            request_hash(&qg_prompt, MAX_ANSWER_TOKENS),
            listing.join("\n"),
        ));
        for (q, scores) in questions.iter().zip(judge_scores) {
            let (ap, cap) = build_answer_prompt(q, &doc.text).unwrap();
            let answer = format!("An answer to {q}");
            pairs.push((request_hash(&ap, cap), answer.clone()));
            let jp = build_judge_prompt(&JudgeRequest {
                question: q.clone(),
                candidate_answer: answer,
                reference_context: doc.text.clone(),
            })
            .unwrap();
            pairs.push((
                request_hash(&jp, MAX_ANSWER_TOKENS),
                format!(
                    "coherence: {}\nrelevance: {}\naccuracy: {}",
                    scores[0], scores[1], scores[2]
                ),
            ));
        }
        FixtureClient::from_pairs(pairs)
    }

    #[test]
    fn fixture_pipeline_averages() {
        let doc = LongDocument {
            id: "d0".into(),
            title: "t".into(),
            domain: "dom".into(),
            text: "a long passage".into(),
        };
        let client = fixture_for(&doc, &[[3, 3, 3], [2, 2, 2]]);
        let table = run_pipeline(&[doc], QgSetting::QgPassage, &client, 3);
        assert_eq!(table.n_questions, 2);
        assert_eq!(table.mean_scores, [2.5, 2.5, 2.5]);
        assert!((table.avg - 2.5).abs() < 1e-12);
    }

    #[test]
    fn empty_document_set_gives_empty_table() {
        let client = FixtureClient::from_pairs(Vec::<(String, String)>::new());
        let table = run_pipeline(&[], QgSetting::QgPassage, &client, 3);
        assert!(table.rows.is_empty());
        assert_eq!(table.n_questions, 0);
    }

    #[test]
    fn client_failure_is_tolerated_per_document() {
        let good = LongDocument {
            id: "ok".into(),
            title: "t".into(),
            domain: "d".into(),
            text: "passage one".into(),
        };
        let bad = LongDocument {
            id: "broken".into(),
            title: "t".into(),
            domain: "d".into(),
            text: "passage two".into(),
        };
        let client = fixture_for(&good, &[[1, 2, 3]]);
        let table = run_pipeline(
            &[bad.clone(), good.clone()],
            QgSetting::QgPassage,
            &client,
            3,
        );
        assert_eq!(table.rows.len(), 2);
        assert!(matches!(table.rows[0].outcome, DocOutcome::Failed(_)));
        assert!(matches!(table.rows[1].outcome, DocOutcome::Scored(_)));
        assert_eq!(table.mean_scores, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn published_row_aggregates_within_rounding() {
        let avg = aggregate_row([2.81, 2.72, 2.70]);
        assert_eq!(round2(avg), 2.74);
    }

    #[test]
    fn fixture_replay_is_deterministic() {
        let doc = LongDocument {
            id: "d0".into(),
            title: "t".into(),
            domain: "dom".into(),
            text: "stable passage".into(),
        };
        let client = fixture_for(&doc, &[[2, 3, 1]]);
        let t1 = run_pipeline(std::slice::from_ref(&doc), QgSetting::QgPassage, &client, 3);
        let t2 = run_pipeline(std::slice::from_ref(&doc), QgSetting::QgPassage, &client, 3);
        assert_eq!(results_to_csv(&t1), results_to_csv(&t2));
        assert_eq!(t1, t2);
    }

    #[test]
    fn jsonl_fixture_round_trip() {
        let jsonl = format!(
            "{}\n{}\n",
            serde_json::json!({"request_hash": request_hash("p", 1), "response_text": "r"}),
            serde_json::json!({"request_hash": request_hash("q", 2), "response_text": "s"}),
        );
        let client = FixtureClient::from_jsonl(&jsonl).unwrap();
        assert_eq!(client.send("p", 1).unwrap(), "r");
        assert_eq!(client.send("q", 2).unwrap(), "s");
        assert!(matches!(
            client.send("unknown", 1),
            Err(LongqaError::MissingFixture { .. })
        ));
        assert!(FixtureClient::from_jsonl("not json").is_err());
    }
}
