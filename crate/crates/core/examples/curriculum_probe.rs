//! Diagnostic twin of the curriculum acceptance check: same data, model, and
//! plan, but prints the measured quantities instead of asserting on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use stagelm::corpus::PackedDataset;
use stagelm::eval::{per_position_perplexity, spearman};
use stagelm::model::ModelConfig;
use stagelm::trainer::{run_stage, OptimizerHyper, StagePlan, StageSpec, TrainState};

fn curriculum_doc(rng: &mut ChaCha20Rng, doc_len: usize) -> Vec<u32> {
    let period = 384;
    let mut base = Vec::with_capacity(period);
    let mut s: u32 = rng.gen_range(0..48);
    for _ in 0..period {
        base.push(s);
        s = if rng.gen::<f64>() < 0.9 {
            (s * 7 + 3) % 48
        } else {
            rng.gen_range(0..48)
        };
    }
    (0..doc_len).map(|p| base[p % period]).collect()
}

fn windowed_dataset(docs: &[Vec<u32>], seq_len: usize, vocab_size: u32) -> PackedDataset {
    let rows: Vec<(Vec<u32>, Vec<usize>)> = docs
        .iter()
        .flat_map(|doc| {
            doc.chunks_exact(seq_len)
                .map(|w| (w.to_vec(), vec![0]))
                .collect::<Vec<_>>()
        })
        .collect();
    PackedDataset::from_raw(seq_len, vocab_size, rows).unwrap()
}

fn main() {
    let vocab_size = 64u32;
    let cfg = ModelConfig::new(vocab_size as usize, 32, 4, 2, 1024).unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let docs: Vec<Vec<u32>> = (0..440).map(|_| curriculum_doc(&mut rng, 2048)).collect();
    let plan = StagePlan {
        stages: vec![
            StageSpec { seq_len: 256, token_budget: 819_200 },
            StageSpec { seq_len: 512, token_budget: 409_600 },
            StageSpec { seq_len: 1024, token_budget: 307_200 },
        ],
        scale_factor: 8,
    };
    let datasets: Vec<PackedDataset> = plan
        .stages
        .iter()
        .map(|s| windowed_dataset(&docs, s.seq_len, vocab_size))
        .collect();

    let hyper = OptimizerHyper {
        base_lr: 2e-3,
        warmup_steps: 20,
        ..OptimizerHyper::default()
    };
    let batch = 8;
    let total = plan.total_steps(batch);
    let mut state = TrainState::new(&cfg, 42);
    let mut records = Vec::new();
    let mut stage1_params = None;
    for (i, stage) in plan.stages.iter().enumerate() {
        let t0 = std::time::Instant::now();
        run_stage(
            &mut state, &cfg, i as u32, stage, &datasets[i], &hyper, batch, total, false,
            &mut records,
        )
        .unwrap();
        if i == 0 {
            stage1_params = Some(state.params.clone());
        }
        eprintln!("stage {i} done in {:.0}s, {} records", t0.elapsed().as_secs_f64(), records.len());
    }
    let stage1_params = stage1_params.unwrap();

    for r in &records {
        println!("loss,{},{},{:.6}", r.step, r.stage, r.loss);
    }

    let s0 = records.iter().filter(|r| r.stage == 0).count();
    let s1 = records.iter().filter(|r| r.stage == 1).count();
    for &b in &[s0, s0 + s1] {
        let pre = records[b - 8..b].iter().map(|r| r.loss).sum::<f64>() / 8.0;
        let post4 = records[b..b + 4].iter().map(|r| r.loss).sum::<f64>() / 4.0;
        let post1 = records[b].loss;
        let postmax: f64 = records[b..b + 8].iter().map(|r| r.loss).fold(0.0, f64::max);
        println!("transition at {b}: pre8 {pre:.4} post1 {post1:.4} post4 {post4:.4} postmax8 {postmax:.4}");
    }
    let initial = records[0].loss;
    let final_loss = records[records.len() - 16..].iter().map(|r| r.loss).sum::<f64>() / 16.0;
    println!("initial {initial:.4} final16 {final_loss:.4} ratio {:.3}", final_loss / initial);

    let mut eval_rng = ChaCha20Rng::seed_from_u64(43);
    let eval_docs: Vec<Vec<u32>> = (0..16).map(|_| curriculum_doc(&mut eval_rng, 1024)).collect();
    let heldout = PackedDataset::from_raw(
        1024,
        vocab_size,
        eval_docs.iter().map(|d| (d.clone(), vec![0])).collect(),
    )
    .unwrap();
    let final_report = per_position_perplexity(&state.params, &cfg, &heldout, 128, "final").unwrap();
    let stage1_report =
        per_position_perplexity(&stage1_params, &cfg, &heldout, 128, "stage1").unwrap();
    for (i, &pos) in final_report.positions.iter().enumerate() {
        println!(
            "bucket {pos}: stage1 {:.4} final {:.4}",
            stage1_report.ppl[i], final_report.ppl[i]
        );
    }
    let positions: Vec<f64> = final_report.positions.iter().map(|&p| p as f64).collect();
    println!("spearman final {:.4}", spearman(&positions, &final_report.ppl));
    println!("spearman stage1 {:.4}", spearman(&positions, &stage1_report.ppl));
}
