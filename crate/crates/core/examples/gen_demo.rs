//! Regenerates the checked-in demo corpus and fixtures under demo/.
//!
//! Run from the workspace root: `cargo run --example gen_demo`. Everything is
//! seeded, so repeated runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use stagelm::longqa::{
    build_answer_prompt, build_judge_prompt, build_qg_prompt, build_summary_prompt, request_hash,
    JudgeRequest, MAX_ANSWER_TOKENS,
};

const WORDS: &[&str] = &[
    "tide", "harbor", "lantern", "granite", "meadow", "cedar", "current", "quarry", "signal",
    "vessel", "compass", "ledger", "archive", "furnace", "timber", "canal", "spindle", "mill",
    "anchor", "beacon", "crest", "delta", "ember", "fjord", "glacier", "hollow", "inlet",
    "junction", "keel", "lattice", "marsh", "north", "orchard", "plain", "quay", "ridge",
    "strait", "terrace", "upland", "valley", "wharf", "basin", "cliff", "dune", "estuary",
    "forge", "grove", "headland",
];

fn sentence(rng: &mut ChaCha20Rng) -> String {
    let n = rng.gen_range(5..12);
    let mut s = String::new();
    for i in 0..n {
        let w = WORDS[rng.gen_range(0..WORDS.len())];
        if i == 0 {
            let mut cs = w.chars();
            let head = cs.next().unwrap().to_uppercase().to_string();
            s.push_str(&head);
            s.push_str(cs.as_str());
        } else {
            s.push(' ');
            s.push_str(w);
        }
    }
    s.push('.');
    s
}

fn paragraph(rng: &mut ChaCha20Rng, sentences: usize) -> String {
    (0..sentences).map(|_| sentence(rng)).collect::<Vec<_>>().join(" ")
}

fn jsonl_doc(text: &str, source: &str) -> String {
    serde_json::json!({ "text": text, "source": source }).to_string()
}

fn main() {
    let root = Path::new("demo");
    fs::create_dir_all(root.join("corpus")).unwrap();
    fs::create_dir_all(root.join("longqa")).unwrap();

    // Training corpus: two sources so the mixture path stays exercisable.
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut train = String::new();
    for i in 0..120 {
        let source = if i % 4 == 0 { "notes" } else { "prose" };
        let n_sentences = rng.gen_range(8..16);
        let text = paragraph(&mut rng, n_sentences);
        writeln!(train, "{}", jsonl_doc(&text, source)).unwrap();
    }
    fs::write(root.join("corpus/train.jsonl"), train).unwrap();

    // Held-out documents, longer so each covers a full eval window.
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let mut heldout = String::new();
    for _ in 0..16 {
        let text = paragraph(&mut rng, 24);
        writeln!(heldout, "{}", jsonl_doc(&text, "heldout")).unwrap();
    }
    fs::write(root.join("corpus/heldout.jsonl"), heldout).unwrap();

    // Instruction-tuning conversations.
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let mut inst = String::new();
    for i in 0..8 {
        let q = format!("Describe the {} near the {}.", WORDS[i * 3], WORDS[i * 3 + 1]);
        let a = sentence(&mut rng);
        let turns = serde_json::json!({
            "turns": [
                { "role": "human", "text": q },
                { "role": "assistant", "text": a },
            ]
        });
        writeln!(inst, "{turns}").unwrap();
    }
    fs::write(root.join("insttune.jsonl"), inst).unwrap();

    // Long-form QA documents plus a recorded transcript for offline replay.
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let docs: Vec<(String, String, String, String)> = (0..2)
        .map(|i| {
            (
                format!("doc{i}"),
                format!("The {} Survey", WORDS[40 + i]),
                "geography".to_string(),
                paragraph(&mut rng, 30),
            )
        })
        .collect();
    let mut docs_jsonl = String::new();
    for (id, title, domain, text) in &docs {
        let line = serde_json::json!({ "id": id, "title": title, "domain": domain, "text": text });
        writeln!(docs_jsonl, "{line}").unwrap();
    }
    fs::write(root.join("longqa/docs.jsonl"), docs_jsonl).unwrap();

    let mut fixture = String::new();
    let mut record = |prompt: &str, max_tokens: usize, response: &str| {
        let line = serde_json::json!({
            "request_hash": request_hash(prompt, max_tokens),
            "response_text": response,
        });
        writeln!(fixture, "{line}").unwrap();
    };
    for (di, (_, title, domain, text)) in docs.iter().enumerate() {
        let summary_prompt = build_summary_prompt(title, domain, text).unwrap();
        let summary = format!(
            "The survey describes coastal landforms and trade routes around record {di}."
        );
        record(&summary_prompt, MAX_ANSWER_TOKENS, &summary);

        let qg_prompt = build_qg_prompt(&summary).unwrap();
        let questions = [
            format!("How do the trade routes in record {di} interact with the coastal landforms?"),
            format!("Why does record {di} emphasize harbors over inland junctions?"),
            format!("What evidence supports the survey's route reconstruction in record {di}?"),
        ];
        let qg_response = questions
            .iter()
            .enumerate()
            .map(|(i, q)| format!("{}. {q}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        record(&qg_prompt, MAX_ANSWER_TOKENS, &qg_response);

        for (qi, q) in questions.iter().enumerate() {
            let (answer_prompt, cap) = build_answer_prompt(q, text).unwrap();
            let answer = format!(
                "According to the document, question {qi} turns on the relation between \
the harbor network and the surrounding terrain."
            );
            record(&answer_prompt, cap, &answer);

            let judge_prompt = build_judge_prompt(&JudgeRequest {
                question: q.clone(),
                candidate_answer: answer.clone(),
                reference_context: text.clone(),
            })
            .unwrap();
            let scores = [[3, 2, 3], [2, 3, 2], [3, 3, 2]][qi];
            let verdict = format!(
                "coherence: {}\nrelevance: {}\naccuracy: {}",
                scores[0], scores[1], scores[2]
            );
            record(&judge_prompt, MAX_ANSWER_TOKENS, &verdict);
        }
    }
    fs::write(root.join("longqa/fixture.jsonl"), fixture).unwrap();

    println!("demo data written under {}", root.display());
}
