//! Single command-line entry point binding all modules, driven by the shared
//! plain-text config file plus flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stagelm::carbon;
use stagelm::config::{parse_config, RunConfig};
use stagelm::corpus::{self, CorpusFormat, Document, MixtureSpec, PackedDataset};
use stagelm::eval;
use stagelm::finetune;
use stagelm::longqa::{self, ChatClient};
use stagelm::model::ModelConfig;
use stagelm::tokenizer::{default_specials, Vocab};
use stagelm::trainer::{self, TrainState};

#[derive(Parser)]
#[command(name = "stagelm", version, about = "Desk-scale staged LM training recipe")]
struct Cli {
    /// Path to the run config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. --set run.seed=7 (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Deterministic intra-op parallelism level.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the byte-level BPE vocabulary from the training corpus.
    TokenizerTrain,
    /// Ingest, filter, mix, and pack the corpus into per-stage datasets.
    Pack,
    /// Run the stage-wise pre-training curriculum.
    Pretrain,
    /// Instruction-tune a pre-trained checkpoint on conversation data.
    Finetune {
        /// Checkpoint to start from (default: last stage checkpoint).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Per-position perplexity on the held-out set.
    EvalPpl {
        /// Checkpoints to evaluate (default: all stage checkpoints).
        #[arg(long = "ckpt")]
        ckpts: Vec<PathBuf>,
    },
    /// Long-form QA prompt pipeline against a fixture or live provider.
    Longqa,
    /// Carbon-footprint estimate from device-hours, wattage, PUE, intensity.
    Carbon(CarbonArgs),
}

#[derive(Args)]
struct CarbonArgs {
    #[arg(long)]
    hours: f64,
    #[arg(long)]
    watts: f64,
    #[arg(long)]
    pue: f64,
    #[arg(long)]
    intensity: f64,
    /// Optionally append a CSV row to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // A fixed pool keeps parallel reductions bit-deterministic per run.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    // Carbon is self-contained; every other subcommand needs the config.
    if let Command::Carbon(args) = &cli.command {
        return run_carbon(args);
    }
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| "cli: --config is required for this subcommand".to_string())?;
    let cfg = parse_config(config_path, &cli.overrides).map_err(|e| format!("config: {e}"))?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| format!("cli: cannot create out dir: {e}"))?;
    match cli.command {
        Command::TokenizerTrain => run_tokenizer_train(&cfg),
        Command::Pack => run_pack(&cfg),
        Command::Pretrain => run_pretrain(&cfg),
        Command::Finetune { ckpt } => run_finetune(&cfg, ckpt),
        Command::EvalPpl { ckpts } => run_eval_ppl(&cfg, ckpts),
        Command::Longqa => run_longqa(&cfg),
        Command::Carbon(_) => unreachable!(),
    }
}

/// Record the config hash beside a fixed-format artifact.
fn write_meta(artifact: &Path, cfg: &RunConfig) -> Result<(), String> {
    let meta = artifact.with_extension(format!(
        "{}.meta",
        artifact.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    std::fs::write(&meta, format!("config_hash = {}\n", cfg.hash))
        .map_err(|e| format!("cli: cannot write {}: {e}", meta.display()))
}

/// Append the config hash as a trailing comment line of a CSV artifact.
fn append_hash_line(path: &Path, cfg: &RunConfig) -> Result<(), String> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| format!("cli: cannot reopen {}: {e}", path.display()))?;
    writeln!(f, "# config_hash={}", cfg.hash)
        .map_err(|e| format!("cli: cannot write {}: {e}", path.display()))
}

fn load_train_documents(cfg: &RunConfig) -> Result<Vec<Document>, String> {
    if cfg.corpus.train_paths.is_empty() {
        return Err("corpus: corpus.train_paths is empty".to_string());
    }
    let (docs, stats) = corpus::ingest(&cfg.corpus.train_paths, CorpusFormat::Jsonl)
        .map_err(|e| format!("corpus: {e}"))?;
    if stats.skipped > 0 {
        eprintln!("note: skipped {} malformed corpus records", stats.skipped);
    }
    Ok(docs)
}

fn vocab_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("vocab.bpe")
}

fn run_tokenizer_train(cfg: &RunConfig) -> Result<(), String> {
    let docs = load_train_documents(cfg)?;
    let mut sample = String::new();
    for doc in &docs {
        sample.push_str(&doc.text);
        sample.push('\n');
    }
    let vocab = Vocab::train_bpe(
        &sample,
        cfg.tokenizer.target_size as u32,
        default_specials(cfg.tokenizer.max_run),
    )
    .map_err(|e| format!("tokenizer: {e}"))?;
    let path = vocab_path(cfg);
    vocab.save(&path).map_err(|e| format!("tokenizer: {e}"))?;
    write_meta(&path, cfg)?;
    println!(
        "trained vocab of {} tokens -> {}",
        vocab.vocab_size(),
        path.display()
    );
    Ok(())
}

fn stage_pack_path(cfg: &RunConfig, stage: usize) -> PathBuf {
    cfg.out_dir.join(format!("stage{stage}.packtok"))
}

fn stage_ckpt_path(cfg: &RunConfig, stage: usize) -> PathBuf {
    cfg.out_dir.join(format!("stage{stage}.ckpt"))
}

fn run_pack(cfg: &RunConfig) -> Result<(), String> {
    let vocab = Vocab::load(&vocab_path(cfg)).map_err(|e| format!("tokenizer: {e}"))?;
    let docs = load_train_documents(cfg)?;
    let (docs, fstats) = corpus::filter_short(docs, &vocab, cfg.corpus.min_tokens);
    eprintln!(
        "note: kept {} documents, dropped {} below {} tokens",
        fstats.kept, fstats.dropped, cfg.corpus.min_tokens
    );
    let docs = match &cfg.mixture {
        None => docs,
        Some(m) => {
            let mut streams: BTreeMap<String, Vec<Document>> = BTreeMap::new();
            for doc in docs {
                streams.entry(doc.source.clone()).or_default().push(doc);
            }
            let spec = MixtureSpec::new(m.entries.clone(), cfg.seed)
                .map_err(|e| format!("corpus: {e}"))?;
            let (mixed, notes) = corpus::sample_mixture(streams, &spec, m.policy)
                .map_err(|e| format!("corpus: {e}"))?;
            for n in notes {
                eprintln!("note: {n}");
            }
            mixed
        }
    };
    for (i, stage) in cfg.stages.plan.stages.iter().enumerate() {
        let ds = corpus::pack(&docs, &vocab, stage.seq_len, cfg.seed.wrapping_add(i as u64), i)
            .map_err(|e| format!("corpus: {e}"))?;
        let path = stage_pack_path(cfg, i);
        corpus::write_packtok(&ds, &path).map_err(|e| format!("corpus: {e}"))?;
        write_meta(&path, cfg)?;
        println!(
            "stage {i}: {} sequences of {} tokens -> {}",
            ds.sequences.len(),
            stage.seq_len,
            path.display()
        );
    }
    if !cfg.corpus.heldout_paths.is_empty() {
        let (hdocs, _) = corpus::ingest(&cfg.corpus.heldout_paths, CorpusFormat::Jsonl)
            .map_err(|e| format!("corpus: {e}"))?;
        let ds = eval::pack_eval_documents(&hdocs, &vocab, cfg.eval.seq_len)
            .map_err(|e| format!("corpus: {e}"))?;
        let path = cfg.out_dir.join("heldout.packtok");
        corpus::write_packtok(&ds, &path).map_err(|e| format!("corpus: {e}"))?;
        write_meta(&path, cfg)?;
        println!(
            "heldout: {} whole documents of {} tokens -> {}",
            ds.sequences.len(),
            cfg.eval.seq_len,
            path.display()
        );
    }
    Ok(())
}

fn run_pretrain(cfg: &RunConfig) -> Result<(), String> {
    let vocab = Vocab::load(&vocab_path(cfg)).map_err(|e| format!("tokenizer: {e}"))?;
    let model_cfg: ModelConfig = cfg
        .model_config(vocab.vocab_size() as usize)
        .map_err(|e| format!("config: {e}"))?;
    let mut datasets: Vec<PackedDataset> = Vec::new();
    for i in 0..cfg.stages.plan.stages.len() {
        datasets.push(
            corpus::read_packtok(&stage_pack_path(cfg, i)).map_err(|e| format!("corpus: {e}"))?,
        );
    }
    let mut state = TrainState::new(&model_cfg, cfg.seed);
    let total = cfg.stages.plan.total_steps(cfg.stages.batch_size);
    let mut records = Vec::new();
    for (i, stage) in cfg.stages.plan.stages.iter().enumerate() {
        let report = trainer::run_stage(
            &mut state,
            &model_cfg,
            i as u32,
            stage,
            &datasets[i],
            &cfg.optimizer,
            cfg.stages.batch_size,
            total,
            cfg.stages.re_epoch,
            &mut records,
        )
        .map_err(|e| format!("trainer: {e}"))?;
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        let path = stage_ckpt_path(cfg, i);
        trainer::save_checkpoint(&state, &model_cfg, &path)
            .map_err(|e| format!("trainer: {e}"))?;
        write_meta(&path, cfg)?;
        println!(
            "stage {i}: {} steps, loss {:.4} -> {}",
            report.steps_executed,
            records.last().map(|r| r.loss).unwrap_or(f64::NAN),
            path.display()
        );
    }
    let spikes = trainer::monitor_spikes(
        &records.iter().map(|r| r.loss).collect::<Vec<_>>(),
        16.min(records.len().max(8)),
        6.0,
    );
    for s in &spikes {
        println!("spike: step index {} loss {:.4} (threshold {:.4})", s.step_index, s.loss, s.threshold);
    }
    let csv = cfg.out_dir.join("loss.csv");
    trainer::write_loss_csv(&records, &csv).map_err(|e| format!("trainer: {e}"))?;
    append_hash_line(&csv, cfg)?;
    println!("loss curve -> {}", csv.display());
    Ok(())
}

fn run_finetune(cfg: &RunConfig, ckpt: Option<PathBuf>) -> Result<(), String> {
    let vocab = Vocab::load(&vocab_path(cfg)).map_err(|e| format!("tokenizer: {e}"))?;
    let ckpt_path = ckpt.unwrap_or_else(|| {
        stage_ckpt_path(cfg, cfg.stages.plan.stages.len().saturating_sub(1))
    });
    let (model_cfg, mut state) =
        trainer::load_checkpoint(&ckpt_path).map_err(|e| format!("trainer: {e}"))?;
    let data_path = cfg
        .insttune
        .data_path
        .as_ref()
        .ok_or_else(|| "config: insttune.data_path is not set".to_string())?;
    let text = std::fs::read_to_string(data_path)
        .map_err(|e| format!("insttune: cannot read {}: {e}", data_path.display()))?;
    let examples = finetune::parse_conversations_jsonl(&text).map_err(|e| format!("insttune: {e}"))?;
    let hyper = trainer::OptimizerHyper {
        base_lr: cfg.insttune.base_lr,
        ..cfg.optimizer.clone()
    };
    let mut records = Vec::new();
    let report = finetune::finetune(
        &mut state,
        &model_cfg,
        &examples,
        &vocab,
        &hyper,
        cfg.insttune.seq_len,
        cfg.insttune.batch_size,
        cfg.insttune.epochs,
        &mut records,
    )
    .map_err(|e| format!("insttune: {e}"))?;
    for w in &report.dropped_examples {
        eprintln!("warning: {w}");
    }
    let out = cfg.out_dir.join("finetuned.ckpt");
    trainer::save_checkpoint(&state, &model_cfg, &out).map_err(|e| format!("trainer: {e}"))?;
    write_meta(&out, cfg)?;
    let csv = cfg.out_dir.join("ft_loss.csv");
    trainer::write_loss_csv(&records, &csv).map_err(|e| format!("trainer: {e}"))?;
    append_hash_line(&csv, cfg)?;
    println!(
        "fine-tuned {} steps, final loss {:.4} -> {}",
        report.steps,
        report.final_loss,
        out.display()
    );
    Ok(())
}

fn run_eval_ppl(cfg: &RunConfig, ckpts: Vec<PathBuf>) -> Result<(), String> {
    let heldout = corpus::read_packtok(&cfg.out_dir.join("heldout.packtok"))
        .map_err(|e| format!("corpus: {e}"))?;
    let ckpts = if ckpts.is_empty() {
        (0..cfg.stages.plan.stages.len())
            .map(|i| stage_ckpt_path(cfg, i))
            .collect()
    } else {
        ckpts
    };
    let mut reports = Vec::new();
    for path in &ckpts {
        let (model_cfg, state) =
            trainer::load_checkpoint(path).map_err(|e| format!("trainer: {e}"))?;
        let tag = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string();
        let report = eval::per_position_perplexity(
            &state.params,
            &model_cfg,
            &heldout,
            cfg.eval.bucket_size,
            &tag,
        )
        .map_err(|e| format!("evalppl: {e}"))?;
        println!(
            "{tag}: ppl {:.3} .. {:.3} over {} buckets",
            report.ppl.first().unwrap_or(&f64::NAN),
            report.ppl.last().unwrap_or(&f64::NAN),
            report.ppl.len()
        );
        reports.push(report);
    }
    if reports.len() >= 2 {
        let table = eval::compare_stage_models(&reports).map_err(|e| format!("evalppl: {e}"))?;
        for (tag, s) in table.model_tags.iter().zip(&table.spearman_vs_position) {
            println!("{tag}: Spearman(ppl, position) = {s:.3}");
        }
    }
    let csv = cfg.out_dir.join("ppl.csv");
    eval::write_report_csv(&reports, &csv).map_err(|e| format!("evalppl: {e}"))?;
    append_hash_line(&csv, cfg)?;
    println!("report -> {}", csv.display());
    Ok(())
}

fn run_longqa(cfg: &RunConfig) -> Result<(), String> {
    let docs_path = cfg
        .longqa
        .docs_path
        .as_ref()
        .ok_or_else(|| "config: longqa.docs_path is not set".to_string())?;
    let text = std::fs::read_to_string(docs_path)
        .map_err(|e| format!("longqa: cannot read {}: {e}", docs_path.display()))?;
    #[derive(serde::Deserialize)]
    struct RawDoc {
        id: String,
        title: String,
        domain: String,
        text: String,
    }
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDoc = serde_json::from_str(line)
            .map_err(|e| format!("longqa: docs line {}: {e}", i + 1))?;
        docs.push(longqa::LongDocument {
            id: raw.id,
            title: raw.title,
            domain: raw.domain,
            text: raw.text,
        });
    }
    let client: Box<dyn ChatClient> = match &cfg.longqa.fixture_path {
        Some(p) => {
            let fixture = std::fs::read_to_string(p)
                .map_err(|e| format!("longqa: cannot read {}: {e}", p.display()))?;
            Box::new(longqa::FixtureClient::from_jsonl(&fixture).map_err(|e| format!("longqa: {e}"))?)
        }
        None => Box::new(longqa::HttpChatClient::new(
            &cfg.longqa.endpoint,
            &cfg.longqa.model,
            &cfg.longqa.api_key_env,
        )),
    };
    let table = longqa::run_pipeline(&docs, cfg.longqa.setting, client.as_ref(), cfg.longqa.max_questions);
    println!(
        "{} questions judged: coherence {:.2}, relevance {:.2}, accuracy {:.2}, avg {:.2}",
        table.n_questions,
        table.mean_scores[0],
        table.mean_scores[1],
        table.mean_scores[2],
        table.avg
    );
    let csv = cfg.out_dir.join("longqa.csv");
    longqa::write_results_csv(&table, &csv).map_err(|e| format!("longqa: {e}"))?;
    append_hash_line(&csv, cfg)?;
    println!("results -> {}", csv.display());
    Ok(())
}

fn run_carbon(args: &CarbonArgs) -> Result<(), String> {
    let report = carbon::estimate(carbon::CarbonInput {
        device_hours: args.hours,
        device_power_w: args.watts,
        pue: args.pue,
        carbon_intensity: args.intensity,
    })
    .map_err(|e| format!("carbon: {e}"))?;
    println!("{}", report.display_line());
    if let Some(csv) = &args.csv {
        use std::io::Write;
        let fresh = !csv.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(csv)
            .map_err(|e| format!("carbon: cannot open {}: {e}", csv.display()))?;
        (|| -> std::io::Result<()> {
            if fresh {
                writeln!(f, "device_hours,device_power_w,pue,carbon_intensity,mwh,tco2eq")?;
            }
            writeln!(
                f,
                "{},{},{},{},{:?},{:?}",
                args.hours, args.watts, args.pue, args.intensity, report.mwh, report.tco2eq
            )
        })()
        .map_err(|e| format!("carbon: cannot write {}: {e}", csv.display()))?;
    }
    Ok(())
}
