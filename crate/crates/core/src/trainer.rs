//! Causal-LM pre-training loop: bias-corrected Adam with weight decay,
//! linear-warmup cosine decay to a floor, global-norm gradient clipping,
//! loss-spike monitoring, a stage-wise sequence-length curriculum, and
//! bit-exact checkpointing (`ckpt v1`) including optimizer and RNG state.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::PackedDataset;
use crate::model::{self, Gradients, ModelConfig, ModelError, ModelParams};

/// Ring-buffer capacity for the recent-loss history kept in TrainState.
pub const LOSS_HISTORY_CAP: usize = 512;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid stage plan: {0}")]
    BadStagePlan(String),
    #[error("out-of-order stage: state is at stage {expected}, got {got}")]
    OutOfOrderStage { expected: u32, got: u32 },
    #[error("stage seq_len {stage} does not match dataset seq_len {dataset}")]
    SeqLenMismatch { stage: usize, dataset: usize },
    #[error(
        "dataset exhausted before budget: {tokens_remaining} tokens of budget remain \
         with no unseen sequences (re-epoching requires the explicit flag)"
    )]
    DatasetExhausted { tokens_remaining: u64 },
    #[error("invalid optimizer hyperparameters: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint has bad magic (not a ckpt file)")]
    BadMagic,
    #[error("checkpoint version mismatch: found {found:?}, expected \"ckpt v1\"")]
    VersionMismatch { found: String },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint shape mismatch for tensor {name}: stored {stored:?}, config wants {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint parse error: {0}")]
    CkptParse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainerError {
    TrainerError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub floor_fraction: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            base_lr: 2e-5,
            floor_fraction: 0.1,
            warmup_steps: 0,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
        }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if !(0.0 < self.beta1 && self.beta1 < 1.0) || !(0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(TrainerError::BadHyper("betas must lie in (0, 1)".into()));
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction <= 1.0) {
            return Err(TrainerError::BadHyper(
                "floor_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.base_lr <= 0.0 {
            return Err(TrainerError::BadHyper("base_lr must be positive".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(TrainerError::BadHyper(
                "grad_clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One curriculum stage: train at `seq_len` until `token_budget` tokens have
/// been consumed (rounded down to whole batches).
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub seq_len: usize,
    pub token_budget: u64,
}

/// Ordered stages with strictly increasing sequence lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    /// Reference lengths divided by desk lengths (8 maps 2048→256).
    pub scale_factor: u32,
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.stages.is_empty() {
            return Err(TrainerError::BadStagePlan("no stages".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].seq_len <= w[0].seq_len {
                return Err(TrainerError::BadStagePlan(format!(
                    "seq_len must strictly increase across stages ({} then {})",
                    w[0].seq_len, w[1].seq_len
                )));
            }
        }
        for s in &self.stages {
            if s.token_budget == 0 {
                return Err(TrainerError::BadStagePlan("token_budget must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Total optimizer steps the plan will execute at `batch_size`.
    pub fn total_steps(&self, batch_size: usize) -> u64 {
        self.stages
            .iter()
            .map(|s| s.token_budget / (batch_size * s.seq_len) as u64)
            .sum()
    }
}

/// Full mutable training state; a multi-stage run is a pure function of
/// (corpus bytes, configs, seed) given this struct is only mutated by the
/// trainer ops.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam_m: Gradients,
    pub adam_v: Gradients,
    /// Count of applied Adam updates (basis for bias correction).
    pub adam_t: u64,
    /// Global optimizer-step counter across all stages.
    pub step: u64,
    pub tokens_seen: u64,
    pub stage_index: u32,
    /// Sequences consumed within the current stage (mid-stage resume cursor).
    pub stage_cursor: u64,
    pub rng: ChaCha20Rng,
    pub loss_history: VecDeque<f64>,
    pub nan_events: u64,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        TrainState {
            params: ModelParams::init(cfg, seed),
            adam_m: Gradients::zeros(cfg),
            adam_v: Gradients::zeros(cfg),
            adam_t: 0,
            step: 0,
            tokens_seen: 0,
            stage_index: 0,
            stage_cursor: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
            loss_history: VecDeque::new(),
            nan_events: 0,
        }
    }

    pub fn push_loss(&mut self, loss: f64) {
        if self.loss_history.len() == LOSS_HISTORY_CAP {
            self.loss_history.pop_front();
        }
        self.loss_history.push_back(loss);
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to `floor_fraction · base_lr` at `total_steps`.
pub fn cosine_lr(
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
    base_lr: f64,
    floor_fraction: f64,
) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let floor = floor_fraction * base_lr;
    if total_steps <= warmup_steps {
        return floor;
    }
    let progress =
        (step.min(total_steps) - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for t in grads.flat() {
        for &g in t.iter() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.flat_mut() {
            for g in t.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Bias-corrected Adam with decoupled weight decay. Returns `true` if the
/// update was applied; a non-finite gradient component aborts the step,
/// records a nan-grad event, and leaves params unchanged.
pub fn adam_step(state: &mut TrainState, grads: &Gradients, hyper: &OptimizerHyper, lr: f64) -> bool {
    if !grads.all_finite() {
        state.nan_events += 1;
        return false;
    }
    let t = state.adam_t + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let params = state.params.flat_mut();
    let ms = state.adam_m.flat_mut();
    let vs = state.adam_v.flat_mut();
    let gs = grads.flat();
    for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + hyper.eps) + lr * hyper.weight_decay * p[i];
        }
    }
    state.adam_t = t;
    true
}

/// One loss-curve row, exported as `step,tokens_seen,stage,seq_len,lr,loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub stage: u32,
    pub seq_len: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<(), TrainerError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    (|| -> std::io::Result<()> {
        writeln!(w, "step,tokens_seen,stage,seq_len,lr,loss")?;
        for r in records {
            writeln!(
                w,
                "{},{},{},{},{:?},{:?}",
                r.step, r.tokens_seen, r.stage, r.seq_len, r.lr, r.loss
            )?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub steps_executed: u64,
    pub warnings: Vec<String>,
}

/// Mean loss and mean gradients over all unmasked positions of a batch of
/// full windows. Rows run in parallel; the reduction folds in row order so
/// the result is bit-deterministic for any thread count.
pub fn batch_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    rows: &[&[crate::tokenizer::TokenId]],
) -> Result<(f64, Gradients), ModelError> {
    let partials: Vec<Result<(f64, usize, Gradients), ModelError>> = rows
        .par_iter()
        .map(|row| {
            let t = row.len();
            let tokens = &row[..t - 1];
            let targets = &row[1..];
            let mask = vec![1u8; t - 1];
            model::backward_sum(params, cfg, tokens, targets, &mask)
        })
        .collect();
    let mut total_sum = 0.0;
    let mut total_count = 0usize;
    let mut grads = Gradients::zeros(cfg);
    for p in partials {
        let (s, c, g) = p?;
        total_sum += s;
        total_count += c;
        grads.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / total_count as f64;
    for t in grads.flat_mut() {
        for g in t.iter_mut() {
            *g *= inv;
        }
    }
    Ok((total_sum * inv, grads))
}

/// Train on `dataset` until the stage token budget is consumed (whole
/// batches only). `total_plan_steps` drives the global cosine schedule.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    state: &mut TrainState,
    cfg: &ModelConfig,
    stage_index: u32,
    stage: &StageSpec,
    dataset: &PackedDataset,
    hyper: &OptimizerHyper,
    batch_size: usize,
    total_plan_steps: u64,
    re_epoch: bool,
    records: &mut Vec<LossRecord>,
) -> Result<StageReport, TrainerError> {
    hyper.validate()?;
    if stage_index != state.stage_index {
        return Err(TrainerError::OutOfOrderStage {
            expected: state.stage_index,
            got: stage_index,
        });
    }
    if dataset.seq_len != stage.seq_len {
        return Err(TrainerError::SeqLenMismatch {
            stage: stage.seq_len,
            dataset: dataset.seq_len,
        });
    }
    if stage.seq_len > cfg.max_seq_len {
        return Err(TrainerError::BadStagePlan(format!(
            "stage seq_len {} exceeds model max_seq_len {}",
            stage.seq_len, cfg.max_seq_len
        )));
    }

    let mut report = StageReport::default();
    let tokens_per_step = (batch_size * stage.seq_len) as u64;
    let n_steps_total = stage.token_budget / tokens_per_step;
    if n_steps_total == 0 {
        report.warnings.push(format!(
            "token_budget {} is below one batch of {} tokens; zero steps executed",
            stage.token_budget, tokens_per_step
        ));
        state.stage_index += 1;
        state.stage_cursor = 0;
        return Ok(report);
    }
    let n_seq = dataset.sequences.len() as u64;
    let steps_done = state.stage_cursor / batch_size as u64;
    if !re_epoch {
        let needed = n_steps_total * batch_size as u64;
        if needed > n_seq {
            let doable_steps = n_seq / batch_size as u64;
            return Err(TrainerError::DatasetExhausted {
                tokens_remaining: stage.token_budget - doable_steps * tokens_per_step,
            });
        }
    }

    for _ in steps_done..n_steps_total {
        let lr = cosine_lr(
            state.step,
            hyper.warmup_steps,
            total_plan_steps,
            hyper.base_lr,
            hyper.floor_fraction,
        );
        let rows: Vec<&[crate::tokenizer::TokenId]> = (0..batch_size as u64)
            .map(|b| {
                let idx = ((state.stage_cursor + b) % n_seq) as usize;
                dataset.sequences[idx].ids.as_slice()
            })
            .collect();
        let (loss, mut grads) = batch_backward(&state.params, cfg, &rows)?;
        clip_gradients(&mut grads, hyper.grad_clip_norm);
        adam_step(state, &grads, hyper, lr);
        state.step += 1;
        state.stage_cursor += batch_size as u64;
        state.tokens_seen += tokens_per_step;
        state.push_loss(loss);
        records.push(LossRecord {
            step: state.step,
            tokens_seen: state.tokens_seen,
            stage: stage_index,
            seq_len: stage.seq_len,
            lr,
            loss,
        });
        report.steps_executed += 1;
    }

    state.stage_index += 1;
    state.stage_cursor = 0;
    Ok(report)
}

/// Run every remaining stage of the plan in order.
pub fn run_plan(
    state: &mut TrainState,
    cfg: &ModelConfig,
    plan: &StagePlan,
    datasets: &[&PackedDataset],
    hyper: &OptimizerHyper,
    batch_size: usize,
    re_epoch: bool,
    records: &mut Vec<LossRecord>,
) -> Result<Vec<StageReport>, TrainerError> {
    plan.validate()?;
    if datasets.len() != plan.stages.len() {
        return Err(TrainerError::BadStagePlan(format!(
            "{} stages but {} datasets",
            plan.stages.len(),
            datasets.len()
        )));
    }
    let total = plan.total_steps(batch_size);
    let mut reports = Vec::new();
    for (i, (stage, ds)) in plan.stages.iter().zip(datasets).enumerate() {
        if (i as u32) < state.stage_index {
            continue; // already completed (resumed state)
        }
        reports.push(run_stage(
            state, cfg, i as u32, stage, ds, hyper, batch_size, total, re_epoch, records,
        )?);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Spike monitoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeEvent {
    pub step_index: usize,
    pub loss: f64,
    pub threshold: f64,
    /// Excess over the threshold.
    pub magnitude: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Flag indices whose loss exceeds the rolling median + threshold_sigma ·
/// rolling MAD of the preceding `window` losses. Observation only.
pub fn monitor_spikes(losses: &[f64], window: usize, threshold_sigma: f64) -> Vec<SpikeEvent> {
    assert!(window >= 8, "spike window must be >= 8");
    let mut events = Vec::new();
    for i in window..losses.len() {
        let mut recent: Vec<f64> = losses[i - window..i].to_vec();
        recent.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = median(&recent);
        let mut dev: Vec<f64> = recent.iter().map(|x| (x - med).abs()).collect();
        dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mad = median(&dev);
        let threshold = med + threshold_sigma * mad;
        if losses[i] > threshold {
            events.push(SpikeEvent {
                step_index: i,
                loss: losses[i],
                threshold,
                magnitude: losses[i] - threshold,
            });
        }
    }
    events
}

// ---------------------------------------------------------------------------
// Checkpointing: `ckpt v1`
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "ckpt v1";
const DTYPE_F64: u8 = 0;

fn write_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the full training state (params, optimizer, RNG, counters) so
/// that `load_checkpoint(save_checkpoint(s)) == s` bit-exactly.
pub fn save_checkpoint(
    state: &TrainState,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<(), TrainerError> {
    let mut head = String::new();
    head.push_str(CKPT_MAGIC);
    head.push('\n');
    head.push_str(&format!("vocab_size = {}\n", cfg.vocab_size));
    head.push_str(&format!("d_model = {}\n", cfg.d_model));
    head.push_str(&format!("n_heads = {}\n", cfg.n_heads));
    head.push_str(&format!("n_layers = {}\n", cfg.n_layers));
    head.push_str(&format!("max_seq_len = {}\n", cfg.max_seq_len));
    head.push_str(&format!("ffn_hidden = {}\n", cfg.ffn_hidden));
    head.push_str(&format!("rms_eps = {:?}\n", cfg.rms_eps));
    head.push_str(&format!("rope_base = {:?}\n", cfg.rope_base));
    head.push_str(&format!("parallel_residual = {}\n", cfg.parallel_residual));
    head.push_str(&format!("adam_t = {}\n", state.adam_t));
    head.push_str(&format!("step = {}\n", state.step));
    head.push_str(&format!("tokens_seen = {}\n", state.tokens_seen));
    head.push_str(&format!("stage_index = {}\n", state.stage_index));
    head.push_str(&format!("stage_cursor = {}\n", state.stage_cursor));
    head.push_str(&format!("nan_events = {}\n", state.nan_events));
    let seed = state.rng.get_seed();
    let seed_hex: String = seed.iter().map(|b| format!("{b:02x}")).collect();
    head.push_str(&format!("rng_seed = {seed_hex}\n"));
    head.push_str(&format!("rng_stream = {}\n", state.rng.get_stream()));
    head.push_str(&format!("rng_word_pos = {}\n", state.rng.get_word_pos()));
    // f64 bit patterns so history round-trips exactly.
    let hist: Vec<String> = state
        .loss_history
        .iter()
        .map(|l| format!("{:016x}", l.to_bits()))
        .collect();
    head.push_str(&format!("loss_history = {}\n", hist.join(",")));
    head.push_str("#tensors\n");

    let mut bytes = head.into_bytes();
    let specs = ModelParams::tensor_specs(cfg);
    for (prefix, tree) in [
        ("", &state.params),
        ("adam_m.", &state.adam_m),
        ("adam_v.", &state.adam_v),
    ] {
        for ((name, dims), data) in specs.iter().zip(tree.flat()) {
            write_tensor(&mut bytes, &format!("{prefix}{name}"), dims, data);
        }
    }
    std::fs::write(path, &bytes).map_err(|e| io_err(path, e))
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainerError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainerError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, TrainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, TrainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8, TrainerError> {
        Ok(self.take(1)?[0])
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn header_val<'a>(
    fields: &'a std::collections::HashMap<String, String>,
    key: &str,
) -> Result<&'a str, TrainerError> {
    fields
        .get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| TrainerError::CkptParse(format!("missing header field {key}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T, TrainerError> {
    s.parse()
        .map_err(|_| TrainerError::CkptParse(format!("bad value for {key}: {s:?}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, TrainState), TrainerError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;

    // Header: UTF-8 lines up to the "#tensors" marker.
    let marker = b"#tensors\n";
    let marker_pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or(TrainerError::Truncated);
    // Magic check comes first so corrupt files report BadMagic, not Truncated.
    let first_line_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let first_line = String::from_utf8_lossy(&bytes[..first_line_end]).to_string();
    if first_line != CKPT_MAGIC {
        if first_line.starts_with("ckpt v") {
            return Err(TrainerError::VersionMismatch { found: first_line });
        }
        return Err(TrainerError::BadMagic);
    }
    let marker_pos = marker_pos?;
    let header = std::str::from_utf8(&bytes[..marker_pos])
        .map_err(|_| TrainerError::CkptParse("header is not UTF-8".into()))?;

    let mut fields = std::collections::HashMap::new();
    for line in header.lines().skip(1) {
        if let Some((k, v)) = line.split_once(" = ") {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let cfg = ModelConfig {
        vocab_size: parse_num(header_val(&fields, "vocab_size")?, "vocab_size")?,
        d_model: parse_num(header_val(&fields, "d_model")?, "d_model")?,
        n_heads: parse_num(header_val(&fields, "n_heads")?, "n_heads")?,
        n_layers: parse_num(header_val(&fields, "n_layers")?, "n_layers")?,
        max_seq_len: parse_num(header_val(&fields, "max_seq_len")?, "max_seq_len")?,
        ffn_hidden: parse_num(header_val(&fields, "ffn_hidden")?, "ffn_hidden")?,
        rms_eps: parse_num(header_val(&fields, "rms_eps")?, "rms_eps")?,
        rope_base: parse_num(header_val(&fields, "rope_base")?, "rope_base")?,
        parallel_residual: parse_num(
            header_val(&fields, "parallel_residual")?,
            "parallel_residual",
        )?,
    };
    cfg.validate()
        .map_err(|e| TrainerError::CkptParse(e.to_string()))?;

    let seed_hex = header_val(&fields, "rng_seed")?;
    if seed_hex.len() != 64 {
        return Err(TrainerError::CkptParse("rng_seed must be 32 bytes hex".into()));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).unwrap();
        seed[i] = u8::from_str_radix(s, 16)
            .map_err(|_| TrainerError::CkptParse("bad rng_seed hex".into()))?;
    }
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_stream(parse_num(header_val(&fields, "rng_stream")?, "rng_stream")?);
    rng.set_word_pos(parse_num(
        header_val(&fields, "rng_word_pos")?,
        "rng_word_pos",
    )?);

    let mut loss_history = VecDeque::new();
    let hist = header_val(&fields, "loss_history")?;
    if !hist.is_empty() {
        for part in hist.split(',') {
            let bits = u64::from_str_radix(part, 16)
                .map_err(|_| TrainerError::CkptParse("bad loss_history entry".into()))?;
            loss_history.push_back(f64::from_bits(bits));
        }
    }

    let mut state = TrainState {
        params: ModelParams::zeros(&cfg),
        adam_m: Gradients::zeros(&cfg),
        adam_v: Gradients::zeros(&cfg),
        adam_t: parse_num(header_val(&fields, "adam_t")?, "adam_t")?,
        step: parse_num(header_val(&fields, "step")?, "step")?,
        tokens_seen: parse_num(header_val(&fields, "tokens_seen")?, "tokens_seen")?,
        stage_index: parse_num(header_val(&fields, "stage_index")?, "stage_index")?,
        stage_cursor: parse_num(header_val(&fields, "stage_cursor")?, "stage_cursor")?,
        rng,
        loss_history,
        nan_events: parse_num(header_val(&fields, "nan_events")?, "nan_events")?,
    };

    // Tensor records.
    let specs = ModelParams::tensor_specs(&cfg);
    let mut r = ByteReader {
        buf: &bytes,
        pos: marker_pos + marker.len(),
    };
    for (prefix, ti) in [("", 0usize), ("adam_m.", 1), ("adam_v.", 2)] {
        for (name, dims) in &specs {
            let name_len = r.u16()? as usize;
            let stored_name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TrainerError::CkptParse("tensor name not UTF-8".into()))?;
            let expected_name = format!("{prefix}{name}");
            if stored_name != expected_name {
                return Err(TrainerError::CkptParse(format!(
                    "unexpected tensor {stored_name:?}, expected {expected_name:?}"
                )));
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(TrainerError::CkptParse(format!(
                    "unsupported dtype tag {dtype} for {stored_name}"
                )));
            }
            let rank = r.u8()? as usize;
            let mut stored_dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                stored_dims.push(r.u32()? as usize);
            }
            if stored_dims != *dims {
                return Err(TrainerError::ShapeMismatch {
                    name: stored_name,
                    stored: stored_dims,
                    expected: dims.clone(),
                });
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 8)?;
            let tree = match ti {
                0 => &mut state.params,
                1 => &mut state.adam_m,
                _ => &mut state.adam_v,
            };
            let spec_index = specs.iter().position(|(s, _)| s == name).unwrap();
            let dst = &mut tree.flat_mut()[spec_index];
            for (i, chunk) in raw.chunks_exact(8).enumerate() {
                dst[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    if !r.done() {
        return Err(TrainerError::CkptParse("trailing bytes after tensors".into()));
    }
    Ok((cfg, state))
}
