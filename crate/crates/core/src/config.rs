//! Plain-text run configuration: `section.key = value` lines, strict key
//! checking with line numbers, flag overrides, and a deterministic SHA-256
//! hash recorded in every output artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ExhaustPolicy;
use crate::model::ModelConfig;
use crate::trainer::{OptimizerHyper, StagePlan, StageSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `section.key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` expects {expected}, got {value:?}")]
    TypeMismatch {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("override `{0}` is not of the form section.key=value")]
    BadOverride(String),
    #[error("dangling reference: {0}")]
    Dangling(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Every key the config file accepts, with its documented type.
const KNOWN_KEYS: &[(&str, &'static str)] = &[
    ("corpus.train_paths", "comma-separated paths"),
    ("corpus.heldout_paths", "comma-separated paths"),
    ("corpus.min_tokens", "integer"),
    ("mixture.entries", "comma-separated name:proportion pairs"),
    ("mixture.policy", "stop_all | redistribute"),
    ("tokenizer.target_size", "integer"),
    ("tokenizer.max_run", "integer"),
    ("model.d_model", "integer"),
    ("model.n_heads", "integer"),
    ("model.n_layers", "integer"),
    ("model.max_seq_len", "integer"),
    ("model.ffn_hidden", "integer"),
    ("model.rms_eps", "float"),
    ("model.rope_base", "float"),
    ("model.parallel_residual", "bool"),
    ("optimizer.base_lr", "float"),
    ("optimizer.beta1", "float"),
    ("optimizer.beta2", "float"),
    ("optimizer.eps", "float"),
    ("optimizer.floor_fraction", "float"),
    ("optimizer.warmup_steps", "integer"),
    ("optimizer.weight_decay", "float"),
    ("optimizer.grad_clip_norm", "float"),
    ("stages.seq_lens", "comma-separated integers"),
    ("stages.token_budgets", "comma-separated integers"),
    ("stages.scale_factor", "integer"),
    ("stages.batch_size", "integer"),
    ("stages.re_epoch", "bool"),
    ("insttune.data_path", "path"),
    ("insttune.seq_len", "integer"),
    ("insttune.batch_size", "integer"),
    ("insttune.epochs", "integer"),
    ("insttune.base_lr", "float"),
    ("eval.seq_len", "integer"),
    ("eval.bucket_size", "integer"),
    ("longqa.docs_path", "path"),
    ("longqa.fixture_path", "path"),
    ("longqa.endpoint", "string"),
    ("longqa.model", "string"),
    ("longqa.api_key_env", "string"),
    ("longqa.setting", "qg_passage | qg_summary"),
    ("longqa.max_questions", "integer"),
    ("run.seed", "integer"),
    ("run.out_dir", "path"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSection {
    pub train_paths: Vec<PathBuf>,
    pub heldout_paths: Vec<PathBuf>,
    pub min_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSection {
    pub entries: Vec<(String, f64)>,
    pub policy: ExhaustPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerSection {
    pub target_size: usize,
    pub max_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagesSection {
    pub plan: StagePlan,
    pub batch_size: usize,
    pub re_epoch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsttuneSection {
    pub data_path: Option<PathBuf>,
    pub seq_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub seq_len: usize,
    pub bucket_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongqaSection {
    pub docs_path: Option<PathBuf>,
    pub fixture_path: Option<PathBuf>,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub setting: crate::longqa::QgSetting,
    pub max_questions: usize,
}

/// Fully resolved run configuration. `model_config(vocab_size)` produces the
/// ModelConfig once the tokenizer artifact fixes the vocabulary size.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub mixture: Option<MixtureSection>,
    pub tokenizer: TokenizerSection,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub ffn_hidden: Option<usize>,
    pub rms_eps: f64,
    pub rope_base: f64,
    pub parallel_residual: bool,
    pub optimizer: OptimizerHyper,
    pub stages: StagesSection,
    pub insttune: InsttuneSection,
    pub eval: EvalSection,
    pub longqa: LongqaSection,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// SHA-256 over the canonical resolved key-value map.
    pub hash: String,
}

impl RunConfig {
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, ConfigError> {
        let mut cfg = ModelConfig::new(
            vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.max_seq_len,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(f) = self.ffn_hidden {
            cfg.ffn_hidden = f;
        }
        cfg.rms_eps = self.rms_eps;
        cfg.rope_base = self.rope_base;
        cfg.parallel_residual = self.parallel_residual;
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

struct Raw {
    // key -> (value, line number)
    map: BTreeMap<String, (String, usize)>,
}

impl Raw {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(v, _)| v.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map(|&(_, l)| l).unwrap_or(0)
    }

    fn parse<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::TypeMismatch {
                line: self.line(key),
                key: key.to_string(),
                expected,
                value: v.to_string(),
            }),
        }
    }

    fn parse_list<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Vec<T>, ConfigError> {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| ConfigError::TypeMismatch {
                        line: self.line(key),
                        key: key.to_string(),
                        expected,
                        value: part.trim().to_string(),
                    })
                })
                .collect(),
        }
    }

    fn paths(&self, key: &str) -> Vec<PathBuf> {
        match self.get(key) {
            None => Vec::new(),
            Some(v) if v.trim().is_empty() => Vec::new(),
            Some(v) => v.split(',').map(|p| PathBuf::from(p.trim())).collect(),
        }
    }
}

fn parse_lines(text: &str) -> Result<Raw, ConfigError> {
    let known: std::collections::HashSet<&str> = KNOWN_KEYS.iter().map(|&(k, _)| k).collect();
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: n,
            text: trimmed.to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !known.contains(key) {
            return Err(ConfigError::UnknownKey {
                line: n,
                key: key.to_string(),
            });
        }
        if map.contains_key(key) {
            return Err(ConfigError::DuplicateKey {
                line: n,
                key: key.to_string(),
            });
        }
        map.insert(key.to_string(), (value.to_string(), n));
    }
    Ok(Raw { map })
}

/// Deterministic hash of the resolved key-value map (sorted, canonical).
fn hash_map(map: &BTreeMap<String, (String, usize)>) -> String {
    let mut h = Sha256::new();
    for (k, (v, _)) in map {
        h.update(k.as_bytes());
        h.update(b" = ");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a config file and apply `section.key=value` flag overrides (flags
/// win over file values).
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config_text(&text, overrides)
}

pub fn parse_config_text(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut raw = parse_lines(text)?;
    let known: std::collections::HashSet<&str> = KNOWN_KEYS.iter().map(|&(k, _)| k).collect();
    for ov in overrides {
        let (key, value) = ov
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(ov.clone()))?;
        let key = key.trim();
        if !known.contains(key) {
            return Err(ConfigError::UnknownKey {
                line: 0,
                key: key.to_string(),
            });
        }
        raw.map
            .insert(key.to_string(), (value.trim().to_string(), 0));
    }

    let mixture = match raw.get("mixture.entries") {
        None => None,
        Some(v) => {
            let mut entries = Vec::new();
            for part in v.split(',') {
                let (name, prop) =
                    part.trim()
                        .split_once(':')
                        .ok_or_else(|| ConfigError::TypeMismatch {
                            line: raw.line("mixture.entries"),
                            key: "mixture.entries".to_string(),
                            expected: "name:proportion pairs",
                            value: part.trim().to_string(),
                        })?;
                let p: f64 = prop.trim().parse().map_err(|_| ConfigError::TypeMismatch {
                    line: raw.line("mixture.entries"),
                    key: "mixture.entries".to_string(),
                    expected: "float proportion",
                    value: prop.trim().to_string(),
                })?;
                entries.push((name.trim().to_string(), p));
            }
            let policy = match raw.get("mixture.policy").unwrap_or("stop_all") {
                "stop_all" => ExhaustPolicy::StopAll,
                "redistribute" => ExhaustPolicy::Redistribute,
                other => {
                    return Err(ConfigError::TypeMismatch {
                        line: raw.line("mixture.policy"),
                        key: "mixture.policy".to_string(),
                        expected: "stop_all | redistribute",
                        value: other.to_string(),
                    })
                }
            };
            Some(MixtureSection { entries, policy })
        }
    };

    let seq_lens: Vec<usize> = raw.parse_list("stages.seq_lens", "comma-separated integers")?;
    let budgets: Vec<u64> = raw.parse_list("stages.token_budgets", "comma-separated integers")?;
    let (seq_lens, budgets) = if seq_lens.is_empty() && budgets.is_empty() {
        (vec![256, 512, 1024], vec![8_192_000, 4_096_000, 3_072_000])
    } else {
        (seq_lens, budgets)
    };
    if seq_lens.len() != budgets.len() {
        return Err(ConfigError::Dangling(format!(
            "stages.seq_lens has {} entries but stages.token_budgets has {}",
            seq_lens.len(),
            budgets.len()
        )));
    }
    let plan = StagePlan {
        stages: seq_lens
            .iter()
            .zip(&budgets)
            .map(|(&seq_len, &token_budget)| StageSpec {
                seq_len,
                token_budget,
            })
            .collect(),
        scale_factor: raw.parse("stages.scale_factor", "integer", 8)?,
    };
    plan.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let max_seq_len = raw.parse(
        "model.max_seq_len",
        "integer",
        plan.stages.last().map(|s| s.seq_len).unwrap_or(1024),
    )?;

    let optimizer = OptimizerHyper {
        base_lr: raw.parse("optimizer.base_lr", "float", 2e-5)?,
        beta1: raw.parse("optimizer.beta1", "float", 0.9)?,
        beta2: raw.parse("optimizer.beta2", "float", 0.99)?,
        eps: raw.parse("optimizer.eps", "float", 1e-8)?,
        floor_fraction: raw.parse("optimizer.floor_fraction", "float", 0.1)?,
        warmup_steps: raw.parse("optimizer.warmup_steps", "integer", 0)?,
        weight_decay: raw.parse("optimizer.weight_decay", "float", 0.0)?,
        grad_clip_norm: raw.parse("optimizer.grad_clip_norm", "float", 1.0)?,
    };
    optimizer
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let setting = match raw.get("longqa.setting").unwrap_or("qg_summary") {
        "qg_passage" => crate::longqa::QgSetting::QgPassage,
        "qg_summary" => crate::longqa::QgSetting::QgSummary,
        other => {
            return Err(ConfigError::TypeMismatch {
                line: raw.line("longqa.setting"),
                key: "longqa.setting".to_string(),
                expected: "qg_passage | qg_summary",
                value: other.to_string(),
            })
        }
    };

    let cfg = RunConfig {
        corpus: CorpusSection {
            train_paths: raw.paths("corpus.train_paths"),
            heldout_paths: raw.paths("corpus.heldout_paths"),
            min_tokens: raw.parse("corpus.min_tokens", "integer", 100)?,
        },
        mixture,
        tokenizer: TokenizerSection {
            target_size: raw.parse("tokenizer.target_size", "integer", 512)?,
            max_run: raw.parse("tokenizer.max_run", "integer", 16)?,
        },
        d_model: raw.parse("model.d_model", "integer", 64)?,
        n_heads: raw.parse("model.n_heads", "integer", 4)?,
        n_layers: raw.parse("model.n_layers", "integer", 2)?,
        max_seq_len,
        ffn_hidden: match raw.get("model.ffn_hidden") {
            None => None,
            Some(_) => Some(raw.parse("model.ffn_hidden", "integer", 0)?),
        },
        rms_eps: raw.parse("model.rms_eps", "float", 1e-5)?,
        rope_base: raw.parse("model.rope_base", "float", 10000.0)?,
        parallel_residual: raw.parse("model.parallel_residual", "bool", false)?,
        optimizer,
        stages: StagesSection {
            plan,
            batch_size: raw.parse("stages.batch_size", "integer", 8)?,
            re_epoch: raw.parse("stages.re_epoch", "bool", false)?,
        },
        insttune: InsttuneSection {
            data_path: raw.get("insttune.data_path").map(PathBuf::from),
            seq_len: raw.parse("insttune.seq_len", "integer", 1024)?,
            batch_size: raw.parse("insttune.batch_size", "integer", 16)?,
            epochs: raw.parse("insttune.epochs", "integer", 3)?,
            base_lr: raw.parse("insttune.base_lr", "float", 2e-5)?,
        },
        eval: EvalSection {
            seq_len: raw.parse(
                "eval.seq_len",
                "integer",
                max_seq_len,
            )?,
            bucket_size: raw.parse("eval.bucket_size", "integer", 32)?,
        },
        longqa: LongqaSection {
            docs_path: raw.get("longqa.docs_path").map(PathBuf::from),
            fixture_path: raw.get("longqa.fixture_path").map(PathBuf::from),
            endpoint: raw
                .get("longqa.endpoint")
                .unwrap_or("https://api.openai.com/v1/chat/completions")
                .to_string(),
            model: raw.get("longqa.model").unwrap_or("gpt-4").to_string(),
            api_key_env: raw
                .get("longqa.api_key_env")
                .unwrap_or("LONGQA_API_KEY")
                .to_string(),
            setting,
            max_questions: raw.parse("longqa.max_questions", "integer", 3)?,
        },
        seed: raw.parse("run.seed", "integer", 0)?,
        out_dir: raw
            .get("run.out_dir")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out")),
        hash: hash_map(&raw.map),
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults_with_stable_hash() {
        let a = parse_config_text("run.seed = 7\n", &[]).unwrap();
        let b = parse_config_text("run.seed = 7\n", &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, 7);
        assert_eq!(a.corpus.min_tokens, 100);
        assert_eq!(a.optimizer.base_lr, 2e-5);
        assert_eq!(a.stages.plan.stages.len(), 3);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = parse_config_text("run.seed = 1\nfoo = 2\n", &[]).unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "foo");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn type_mismatch_names_line() {
        let err = parse_config_text("model.d_model = soup\n", &[]).unwrap_err();
        match err {
            ConfigError::TypeMismatch { line, key, .. } => {
                assert_eq!(line, 1);
                assert_eq!(key, "model.d_model");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flag_override_beats_file_value() {
        let cfg =
            parse_config_text("run.seed = 3\n", &["run.seed=7".to_string()]).unwrap();
        assert_eq!(cfg.seed, 7);
        // The hash reflects the resolved (overridden) value.
        let plain = parse_config_text("run.seed = 7\n", &[]).unwrap();
        assert_eq!(cfg.hash, plain.hash);
    }

    #[test]
    fn stage_list_length_mismatch_is_dangling() {
        let err = parse_config_text(
            "stages.seq_lens = 64,128\nstages.token_budgets = 1000\n",
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Dangling(_)));
    }

    #[test]
    fn hash_changes_with_values() {
        let a = parse_config_text("run.seed = 1\n", &[]).unwrap();
        let b = parse_config_text("run.seed = 2\n", &[]).unwrap();
        assert_ne!(a.hash, b.hash);
    }

    #[test]
    fn mixture_entries_parse() {
        let cfg = parse_config_text(
            "mixture.entries = natural:0.9531, code:0.0469\nmixture.policy = redistribute\n",
            &[],
        )
        .unwrap();
        let m = cfg.mixture.unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0], ("natural".to_string(), 0.9531));
        assert_eq!(m.policy, ExhaustPolicy::Redistribute);
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = parse_config_text("run.seed = 1\nrun.seed = 2\n", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { line: 2, .. }));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config_text("# a comment\n\nrun.seed = 9\n", &[]).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn model_config_resolution_applies_overrides() {
        let cfg = parse_config_text(
            "model.d_model = 32\nmodel.n_heads = 4\nmodel.parallel_residual = true\n",
            &[],
        )
        .unwrap();
        let mc = cfg.model_config(64).unwrap();
        assert_eq!(mc.d_model, 32);
        assert!(mc.parallel_residual);
        assert_eq!(mc.ffn_hidden, 88);
    }
}
