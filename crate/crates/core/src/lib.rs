//! Desk-scale training recipe for a decoder-only language model: byte-level
//! BPE tokenization, mixture sampling and fixed-length sequence packing,
//! a LLaMA-style transformer with hand-written forward/backward, stage-wise
//! sequence-length curriculum training, per-position perplexity evaluation,
//! instruction fine-tuning with prompt-loss masking, long-form QA prompt
//! scaffolding, and carbon accounting.

pub mod carbon;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod finetune;
pub mod longqa;
pub mod model;
pub mod tokenizer;
pub mod trainer;
