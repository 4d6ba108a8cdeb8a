//! Instruction fine-tuning: conversation serialization with the
//! `### Human:` / `### Assistant:` sentinels, prompt-loss masking via
//! per-segment tokenization, and a fine-tuning driver over the trainer ops.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{self, ModelConfig, ModelError, ModelParams};
use crate::tokenizer::{TokenId, Vocab, END_OF_TEXT};
use crate::trainer::{
    adam_step, clip_gradients, cosine_lr, LossRecord, OptimizerHyper, TrainState, TrainerError,
};

pub const HUMAN_SENTINEL: &str = "### Human: ";
pub const ASSISTANT_SENTINEL: &str = "### Assistant: ";

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("conversation has no turns")]
    EmptyConversation,
    #[error("malformed alternation: {0}")]
    BadAlternation(String),
    #[error("turn {index} has empty text")]
    EmptyTurnText { index: usize },
    #[error("batch of {given} examples exceeds batch_size {batch_size}")]
    BatchOverflow { given: usize, batch_size: usize },
    #[error("no trainable examples: every example lost all response tokens")]
    AllExamplesDropped,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChatRole {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub text: String,
}

/// Alternating human/assistant turns, starting with human and ending with
/// assistant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationExample {
    pub turns: Vec<ChatTurn>,
}

impl ConversationExample {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if self.turns.is_empty() {
            return Err(FinetuneError::EmptyConversation);
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.is_empty() {
                return Err(FinetuneError::EmptyTurnText { index: i });
            }
            let expected = if i % 2 == 0 {
                ChatRole::Human
            } else {
                ChatRole::Assistant
            };
            if turn.role != expected {
                return Err(FinetuneError::BadAlternation(format!(
                    "turn {i} should be {expected:?}"
                )));
            }
        }
        if self.turns.last().unwrap().role != ChatRole::Assistant {
            return Err(FinetuneError::BadAlternation(
                "final turn must be assistant".into(),
            ));
        }
        Ok(())
    }
}

/// Serialize a conversation with the exact sentinel strings and a
/// terminating end-of-text token string.
pub fn format_conversation(ex: &ConversationExample) -> Result<String, FinetuneError> {
    Ok(serialize_with_spans(ex)?.0)
}

/// Serialization plus the byte span of each assistant-response substring
/// (exactly the `{response}` texts, no sentinels).
pub fn serialize_with_spans(
    ex: &ConversationExample,
) -> Result<(String, Vec<(usize, usize)>), FinetuneError> {
    ex.validate()?;
    let mut out = String::new();
    let mut spans = Vec::new();
    for (i, turn) in ex.turns.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(match turn.role {
            ChatRole::Human => HUMAN_SENTINEL,
            ChatRole::Assistant => ASSISTANT_SENTINEL,
        });
        let start = out.len();
        out.push_str(&turn.text);
        if turn.role == ChatRole::Assistant {
            spans.push((start, out.len()));
        }
    }
    out.push_str(END_OF_TEXT);
    Ok((out, spans))
}

/// Fixed-width rows with shift-by-one targets and a response-only loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub ids: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
    pub loss_mask: Vec<Vec<u8>>,
    pub seq_len: usize,
}

/// Tokenize one example segment by segment so supervision provenance is
/// exact: sentinels and human text are unsupervised; assistant text and the
/// final end-of-text terminator are supervised.
fn tokenize_example(
    ex: &ConversationExample,
    vocab: &Vocab,
) -> Result<(Vec<TokenId>, Vec<bool>), FinetuneError> {
    ex.validate()?;
    let mut tokens = Vec::new();
    let mut supervised = Vec::new();
    for (i, turn) in ex.turns.iter().enumerate() {
        let mut prefix = String::new();
        if i > 0 {
            prefix.push(' ');
        }
        prefix.push_str(match turn.role {
            ChatRole::Human => HUMAN_SENTINEL,
            ChatRole::Assistant => ASSISTANT_SENTINEL,
        });
        for t in vocab.encode(&prefix, false) {
            tokens.push(t);
            supervised.push(false);
        }
        let is_response = turn.role == ChatRole::Assistant;
        for t in vocab.encode(&turn.text, false) {
            tokens.push(t);
            supervised.push(is_response);
        }
    }
    tokens.push(vocab.eot_id());
    supervised.push(true); // the model learns to stop
    Ok((tokens, supervised))
}

/// Build one batch (≤ batch_size rows). Examples longer than seq_len are
/// right-truncated; examples whose responses are entirely truncated away are
/// dropped with a warning.
pub fn build_masked_batch(
    examples: &[ConversationExample],
    vocab: &Vocab,
    seq_len: usize,
    batch_size: usize,
) -> Result<(MaskedBatch, Vec<String>), FinetuneError> {
    if examples.len() > batch_size {
        return Err(FinetuneError::BatchOverflow {
            given: examples.len(),
            batch_size,
        });
    }
    let eot = vocab.eot_id();
    let mut batch = MaskedBatch {
        ids: Vec::new(),
        targets: Vec::new(),
        loss_mask: Vec::new(),
        seq_len,
    };
    let mut warnings = Vec::new();
    for (ei, ex) in examples.iter().enumerate() {
        let (tokens, supervised) = tokenize_example(ex, vocab)?;
        let mut ids = vec![eot; seq_len];
        let mut targets = vec![eot; seq_len];
        let mut mask = vec![0u8; seq_len];
        for t in 0..seq_len {
            if t < tokens.len() {
                ids[t] = tokens[t];
            }
            if t + 1 < tokens.len() && t < tokens.len() {
                targets[t] = tokens[t + 1];
                if supervised[t + 1] {
                    mask[t] = 1;
                }
            }
        }
        if mask.iter().all(|&m| m == 0) {
            warnings.push(format!(
                "example {ei} dropped: all response tokens truncated away"
            ));
            continue;
        }
        batch.ids.push(ids);
        batch.targets.push(targets);
        batch.loss_mask.push(mask);
    }
    Ok((batch, warnings))
}

/// Mean masked loss and mean gradients over all supervised positions of the
/// batch; rows in parallel with an in-order (bit-deterministic) reduction.
pub fn masked_batch_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &MaskedBatch,
) -> Result<(f64, model::Gradients), ModelError> {
    let partials: Vec<Result<(f64, usize, model::Gradients), ModelError>> = (0..batch.ids.len())
        .into_par_iter()
        .map(|r| {
            model::backward_sum(
                params,
                cfg,
                &batch.ids[r],
                &batch.targets[r],
                &batch.loss_mask[r],
            )
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut grads = model::Gradients::zeros(cfg);
    for p in partials {
        let (s, c, g) = p?;
        sum += s;
        count += c;
        grads.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / count as f64;
    for t in grads.flat_mut() {
        for g in t.iter_mut() {
            *g *= inv;
        }
    }
    Ok((sum * inv, grads))
}

/// Forward-only mean NLL per supervised position (nats/token).
pub fn masked_mean_nll(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &MaskedBatch,
) -> Result<f64, ModelError> {
    let v = cfg.vocab_size;
    let mut sum = 0.0;
    let mut count = 0u64;
    for r in 0..batch.ids.len() {
        let logits = model::forward(params, cfg, &batch.ids[r])?;
        for t in 0..batch.seq_len {
            if batch.loss_mask[r][t] == 0 {
                continue;
            }
            let row = &logits[t * v..(t + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
            sum += denom.ln() + max - row[batch.targets[r][t].value() as usize];
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneReport {
    pub steps: u64,
    pub dropped_examples: Vec<String>,
    pub final_loss: f64,
}

/// Fine-tune a pre-trained state on conversations for `epochs` passes with
/// the cosine schedule decaying from `hyper.base_lr` to its floor.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    state: &mut TrainState,
    cfg: &ModelConfig,
    examples: &[ConversationExample],
    vocab: &Vocab,
    hyper: &OptimizerHyper,
    seq_len: usize,
    batch_size: usize,
    epochs: usize,
    records: &mut Vec<LossRecord>,
) -> Result<FinetuneReport, FinetuneError> {
    hyper.validate()?;
    let mut report = FinetuneReport::default();

    // Pre-tokenize once; drop untrainable examples up front.
    let mut rows = Vec::new();
    for (ei, ex) in examples.iter().enumerate() {
        let (batch, warnings) = build_masked_batch(std::slice::from_ref(ex), vocab, seq_len, 1)?;
        report.dropped_examples.extend(warnings);
        if !batch.ids.is_empty() {
            let _ = ei;
            rows.push(batch);
        }
    }
    if rows.is_empty() {
        return Err(FinetuneError::AllExamplesDropped);
    }

    let n = rows.len();
    let steps_per_epoch = n.div_ceil(batch_size) as u64;
    let total_steps = steps_per_epoch * epochs as u64;
    let start_step = state.step;

    for epoch in 0..epochs {
        // Seeded epoch shuffle (Fisher-Yates) from the state RNG.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = state.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch_size) {
            let mut batch = MaskedBatch {
                ids: Vec::new(),
                targets: Vec::new(),
                loss_mask: Vec::new(),
                seq_len,
            };
            for &idx in chunk {
                batch.ids.push(rows[idx].ids[0].clone());
                batch.targets.push(rows[idx].targets[0].clone());
                batch.loss_mask.push(rows[idx].loss_mask[0].clone());
            }
            let lr = cosine_lr(
                state.step - start_step,
                hyper.warmup_steps,
                total_steps,
                hyper.base_lr,
                hyper.floor_fraction,
            );
            let (loss, mut grads) = masked_batch_backward(&state.params, cfg, &batch)?;
            clip_gradients(&mut grads, hyper.grad_clip_norm);
            adam_step(state, &grads, hyper, lr);
            state.step += 1;
            state.tokens_seen += (batch.ids.len() * seq_len) as u64;
            state.push_loss(loss);
            records.push(LossRecord {
                step: state.step,
                tokens_seen: state.tokens_seen,
                stage: epoch as u32,
                seq_len,
                lr,
                loss,
            });
            report.steps += 1;
            report.final_loss = loss;
        }
    }
    Ok(report)
}

/// Parse fine-tuning data: JSONL, one conversation per line —
/// `{"turns": [{"role": "human", "text": ...}, ...]}`.
pub fn parse_conversations_jsonl(text: &str) -> Result<Vec<ConversationExample>, FinetuneError> {
    #[derive(serde::Deserialize)]
    struct RawTurn {
        role: String,
        text: String,
    }
    #[derive(serde::Deserialize)]
    struct RawExample {
        turns: Vec<RawTurn>,
    }
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| {
            FinetuneError::BadAlternation(format!("line {}: invalid JSON: {e}", ln + 1))
        })?;
        let ex = ConversationExample {
            turns: raw
                .turns
                .into_iter()
                .map(|t| {
                    let role = match t.role.as_str() {
                        "human" => Ok(ChatRole::Human),
                        "assistant" => Ok(ChatRole::Assistant),
                        other => Err(FinetuneError::BadAlternation(format!(
                            "line {}: unknown role {other:?}",
                            ln + 1
                        ))),
                    }?;
                    Ok(ChatTurn { role, text: t.text })
                })
                .collect::<Result<Vec<_>, FinetuneError>>()?,
        };
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::SpecialSpec;

    fn single(p: &str, r: &str) -> ConversationExample {
        ConversationExample {
            turns: vec![
                ChatTurn {
                    role: ChatRole::Human,
                    text: p.to_string(),
                },
                ChatTurn {
                    role: ChatRole::Assistant,
                    text: r.to_string(),
                },
            ],
        }
    }

    fn test_vocab() -> Vocab {
        // Byte-level vocab (merge target barely above the base alphabet) so
        // ASCII text tokenizes one byte per token.
        Vocab::train_bpe("zzzz", 258, vec![SpecialSpec::end_of_text()]).unwrap()
    }

    #[test]
    fn golden_single_turn_serialization() {
        let ex = single("p", "r");
        assert_eq!(
            format_conversation(&ex).unwrap(),
            "### Human: p ### Assistant: r<|endoftext|>"
        );
    }

    #[test]
    fn two_round_conversation_has_sentinels_twice_in_order() {
        let ex = ConversationExample {
            turns: vec![
                ChatTurn { role: ChatRole::Human, text: "a".into() },
                ChatTurn { role: ChatRole::Assistant, text: "b".into() },
                ChatTurn { role: ChatRole::Human, text: "c".into() },
                ChatTurn { role: ChatRole::Assistant, text: "d".into() },
            ],
        };
        let s = format_conversation(&ex).unwrap();
        assert_eq!(s.matches(HUMAN_SENTINEL).count(), 2);
        assert_eq!(s.matches(ASSISTANT_SENTINEL).count(), 2);
        let h2 = s.rfind(HUMAN_SENTINEL).unwrap();
        let a1 = s.find(ASSISTANT_SENTINEL).unwrap();
        assert!(a1 < h2);
    }

    #[test]
    fn empty_turn_list_is_an_error() {
        let ex = ConversationExample { turns: vec![] };
        assert!(matches!(
            format_conversation(&ex),
            Err(FinetuneError::EmptyConversation)
        ));
    }

    #[test]
    fn bad_alternation_is_an_error() {
        let ex = ConversationExample {
            turns: vec![
                ChatTurn { role: ChatRole::Assistant, text: "r".into() },
            ],
        };
        assert!(matches!(
            format_conversation(&ex),
            Err(FinetuneError::BadAlternation(_))
        ));
        let ex2 = ConversationExample {
            turns: vec![ChatTurn { role: ChatRole::Human, text: "p".into() }],
        };
        assert!(matches!(
            format_conversation(&ex2),
            Err(FinetuneError::BadAlternation(_))
        ));
    }

    #[test]
    fn response_spans_cover_exactly_the_response_substrings() {
        let ex = ConversationExample {
            turns: vec![
                ChatTurn { role: ChatRole::Human, text: "ask".into() },
                ChatTurn { role: ChatRole::Assistant, text: "answer one".into() },
                ChatTurn { role: ChatRole::Human, text: "more".into() },
                ChatTurn { role: ChatRole::Assistant, text: "answer two".into() },
            ],
        };
        let (s, spans) = serialize_with_spans(&ex).unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!(&s[spans[0].0..spans[0].1], "answer one");
        assert_eq!(&s[spans[1].0..spans[1].1], "answer two");
    }

    #[test]
    fn mask_sum_is_response_tokens_plus_terminator() {
        let vocab = test_vocab();
        let ex = single("hello there", "general reply");
        let (batch, warnings) = build_masked_batch(&[ex], &vocab, 64, 1).unwrap();
        assert!(warnings.is_empty());
        let response_tokens = vocab.encode("general reply", false).len();
        let mask_sum: u32 = batch.loss_mask[0].iter().map(|&m| m as u32).sum();
        assert_eq!(mask_sum as usize, response_tokens + 1);
    }

    #[test]
    fn targets_are_ids_shifted_by_one() {
        let vocab = test_vocab();
        let (batch, _) = build_masked_batch(&[single("ab", "cd")], &vocab, 48, 1).unwrap();
        let n_real = format_conversation(&single("ab", "cd")).unwrap();
        // Up to the serialized token length, target[t] == ids[t+1].
        let len = vocab.encode(&n_real, true).len();
        for t in 0..len - 1 {
            assert_eq!(batch.targets[0][t], batch.ids[0][t + 1]);
        }
    }

    #[test]
    fn masked_loss_matches_scalar_oracle_over_response_positions() {
        let vocab = test_vocab();
        let cfg = ModelConfig::new(vocab.vocab_size() as usize, 8, 2, 1, 64).unwrap();
        let params = ModelParams::init(&cfg, 31);
        let (batch, _) = build_masked_batch(&[single("hi", "yes")], &vocab, 40, 1).unwrap();
        let (loss, _) = masked_batch_backward(&params, &cfg, &batch).unwrap();

        // Scalar oracle: full forward, NLL summed over only masked positions.
        let logits = model::forward(&params, &cfg, &batch.ids[0]).unwrap();
        let v = cfg.vocab_size;
        let mut sum = 0.0;
        let mut count = 0;
        for t in 0..batch.seq_len {
            if batch.loss_mask[0][t] == 0 {
                continue;
            }
            let row = &logits[t * v..(t + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
            sum += denom.ln() + max - row[batch.targets[0][t].value() as usize];
            count += 1;
        }
        let expect = sum / count as f64;
        assert!((loss - expect).abs() < 1e-6 * expect.abs().max(1.0));
    }

    #[test]
    fn perturbing_prompt_targets_changes_nothing() {
        let vocab = test_vocab();
        let cfg = ModelConfig::new(vocab.vocab_size() as usize, 8, 2, 1, 64).unwrap();
        let params = ModelParams::init(&cfg, 32);
        let (batch, _) = build_masked_batch(&[single("abc", "de")], &vocab, 40, 1).unwrap();
        let (loss, _) = masked_batch_backward(&params, &cfg, &batch).unwrap();
        let mut altered = batch.clone();
        // Rewrite every masked-out target to an arbitrary id.
        for t in 0..altered.seq_len {
            if altered.loss_mask[0][t] == 0 {
                altered.targets[0][t] = vocab.eot_id();
            }
        }
        let (loss2, _) = masked_batch_backward(&params, &cfg, &altered).unwrap();
        assert_eq!(loss, loss2);
    }

    #[test]
    fn all_prompt_window_is_dropped() {
        let vocab = test_vocab();
        // seq_len 12 truncates before any response token appears
        // ("### Human: long question..." alone exceeds it).
        let (batch, warnings) =
            build_masked_batch(&[single("a very long question", "yes")], &vocab, 12, 1).unwrap();
        assert!(batch.ids.is_empty());
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn epoch_accounting() {
        let vocab = test_vocab();
        let cfg = ModelConfig::new(vocab.vocab_size() as usize, 8, 2, 0, 64).unwrap();
        let mut state = TrainState::new(&cfg, 33);
        let examples: Vec<_> = (0..5).map(|i| single(&format!("q{i}"), "a")).collect();
        let mut records = Vec::new();
        let report = finetune(
            &mut state,
            &cfg,
            &examples,
            &vocab,
            &OptimizerHyper::default(),
            32,
            2,
            3,
            &mut records,
        )
        .unwrap();
        // ceil(5/2) = 3 steps per epoch × 3 epochs.
        assert_eq!(report.steps, 9);
        assert_eq!(records.len(), 9);
    }

    #[test]
    fn jsonl_round_trip() {
        let text = concat!(
            r#"{"turns": [{"role": "human", "text": "hi"}, {"role": "assistant", "text": "hello"}]}"#,
            "\n",
            r#"{"turns": [{"role": "human", "text": "2+2?"}, {"role": "assistant", "text": "4"}]}"#,
            "\n"
        );
        let examples = parse_conversations_jsonl(text).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].turns[1].text, "hello");
        assert!(parse_conversations_jsonl(r#"{"turns": []}"#).is_err());
    }

    #[test]
    fn overfit_eight_fixture_conversations() {
        let vocab = test_vocab();
        let cfg = ModelConfig::new(vocab.vocab_size() as usize, 32, 4, 2, 64).unwrap();
        let fixtures: Vec<ConversationExample> = [
            ("color of sky", "blue"),
            ("two plus two", "four"),
            ("opposite of up", "down"),
            ("capital letter after a", "b"),
            ("sound a cat makes", "meow"),
            ("frozen water", "ice"),
            ("first month", "january"),
            ("shape with three sides", "triangle"),
        ]
        .iter()
        .map(|(p, r)| single(p, r))
        .collect();
        let hyper = OptimizerHyper {
            base_lr: 1e-2,
            ..OptimizerHyper::default()
        };
        let mut state = TrainState::new(&cfg, 34);
        let mut records = Vec::new();
        finetune(
            &mut state, &cfg, &fixtures, &vocab, &hyper, 48, 8, 150, &mut records,
        )
        .unwrap();
        let (batch, _) = build_masked_batch(&fixtures, &vocab, 48, 8).unwrap();
        let nll = masked_mean_nll(&state.params, &cfg, &batch).unwrap();
        assert!(nll < 0.5, "response NLL {nll} nats/token");
    }
}
