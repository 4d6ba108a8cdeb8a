//! Held-out evaluation: average perplexity per token position (bucketed) and
//! cross-model comparison with a monotone-trend statistic.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Document, PackedDataset};
use crate::model::{self, ModelConfig, ModelError, ModelParams};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval requires whole documents: sequence {seq_index} has an interior boundary")]
    InteriorBoundary { seq_index: usize },
    #[error("held-out dataset is empty")]
    EmptyDataset,
    #[error("bucket_size must be >= 1")]
    BadBucketSize,
    #[error("reports have mismatched bucket geometry")]
    MismatchedBuckets,
    #[error("need at least two reports to compare")]
    TooFewReports,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Bucketed per-position perplexity over a held-out set of whole documents.
#[derive(Debug, Clone, PartialEq)]
pub struct PerPositionReport {
    /// Bucket start offsets (predicted-token positions), strictly increasing.
    pub positions: Vec<usize>,
    /// exp(mean NLL) per bucket; one entry per position.
    pub ppl: Vec<f64>,
    pub n_docs: usize,
    pub model_tag: String,
    pub eval_seq_len: usize,
}

/// Token NLLs for one whole document window: entry p-1 is the negative
/// log-likelihood of the token at position p (p in 1..T) given positions < p.
fn document_nlls(
    params: &ModelParams,
    cfg: &ModelConfig,
    ids: &[crate::tokenizer::TokenId],
) -> Result<Vec<f64>, ModelError> {
    let t_len = ids.len();
    let logits = model::forward(params, cfg, &ids[..t_len - 1])?;
    let v = cfg.vocab_size;
    let mut nlls = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        let row = &logits[t * v..(t + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let target = ids[t + 1].value() as usize;
        nlls.push(denom.ln() + max - row[target]);
    }
    Ok(nlls)
}

/// Per-bucket exp(mean NLL) across all documents. Every sequence of the
/// held-out dataset must be a single whole document (boundaries == [0]).
/// Positions are those of predicted tokens (1..seq_len); bucket k starts at
/// offset k·bucket_size.
pub fn per_position_perplexity(
    params: &ModelParams,
    cfg: &ModelConfig,
    heldout: &PackedDataset,
    bucket_size: usize,
    model_tag: &str,
) -> Result<PerPositionReport, EvalError> {
    if bucket_size == 0 {
        return Err(EvalError::BadBucketSize);
    }
    if heldout.sequences.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    for (i, seq) in heldout.sequences.iter().enumerate() {
        if seq.boundaries != [0] {
            return Err(EvalError::InteriorBoundary { seq_index: i });
        }
    }
    let seq_len = heldout.seq_len;
    let n_buckets = (seq_len - 1) / bucket_size + 1;

    // Documents evaluate in parallel; the bucket sums fold in document order
    // so the means are bit-deterministic.
    let per_doc: Vec<Result<Vec<f64>, ModelError>> = heldout
        .sequences
        .par_iter()
        .map(|seq| document_nlls(params, cfg, &seq.ids))
        .collect();
    let mut sums = vec![0.0; n_buckets];
    let mut counts = vec![0u64; n_buckets];
    for doc in per_doc {
        let nlls = doc?;
        for (i, nll) in nlls.iter().enumerate() {
            let pos = i + 1; // position of the predicted token
            let b = pos / bucket_size;
            sums[b] += nll;
            counts[b] += 1;
        }
    }

    let mut positions = Vec::new();
    let mut ppl = Vec::new();
    for b in 0..n_buckets {
        if counts[b] == 0 {
            continue;
        }
        positions.push(b * bucket_size);
        ppl.push((sums[b] / counts[b] as f64).exp());
    }
    Ok(PerPositionReport {
        positions,
        ppl,
        n_docs: heldout.sequences.len(),
        model_tag: model_tag.to_string(),
        eval_seq_len: seq_len,
    })
}

/// Average ranks (ties share the mean rank).
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut r = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            r[idx] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of the rank vectors).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Per-bucket deltas against the first report plus a per-model trend
/// statistic: Spearman correlation of perplexity against position.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub positions: Vec<usize>,
    pub model_tags: Vec<String>,
    pub ppl: Vec<Vec<f64>>,
    /// deltas[m][b] = ppl[m][b] − ppl[0][b].
    pub deltas: Vec<Vec<f64>>,
    pub spearman_vs_position: Vec<f64>,
}

pub fn compare_stage_models(reports: &[PerPositionReport]) -> Result<ComparisonTable, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports);
    }
    let positions = reports[0].positions.clone();
    for r in reports {
        if r.positions != positions {
            return Err(EvalError::MismatchedBuckets);
        }
    }
    let pos_f: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    let mut ppl = Vec::new();
    let mut deltas = Vec::new();
    let mut trends = Vec::new();
    for r in reports {
        deltas.push(
            r.ppl
                .iter()
                .zip(&reports[0].ppl)
                .map(|(a, b)| a - b)
                .collect(),
        );
        trends.push(spearman(&r.ppl, &pos_f));
        ppl.push(r.ppl.clone());
    }
    Ok(ComparisonTable {
        positions,
        model_tags: reports.iter().map(|r| r.model_tag.clone()).collect(),
        ppl,
        deltas,
        spearman_vs_position: trends,
    })
}

/// CSV export: `bucket_start,ppl,model_tag`, one row per bucket per report.
pub fn write_report_csv(reports: &[PerPositionReport], path: &Path) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        writeln!(w, "bucket_start,ppl,model_tag")?;
        for r in reports {
            for (pos, ppl) in r.positions.iter().zip(&r.ppl) {
                writeln!(w, "{},{:?},{}", pos, ppl, r.model_tag)?;
            }
        }
        w.flush()
    })()
    .map_err(io)
}

/// Select held-out documents for evaluation: tokenize each, keep those with
/// at least `eval_seq_len` tokens, and truncate each to exactly that length
/// as its own sequence (no cross-document packing).
pub fn pack_eval_documents(
    docs: &[Document],
    vocab: &Vocab,
    eval_seq_len: usize,
) -> Result<PackedDataset, crate::corpus::CorpusError> {
    let mut rows = Vec::new();
    for doc in docs {
        let ids = vocab.encode(&doc.text, false);
        if ids.len() < eval_seq_len {
            continue;
        }
        rows.push((
            ids[..eval_seq_len].iter().map(|t| t.value()).collect(),
            vec![0usize],
        ));
    }
    PackedDataset::from_raw(eval_seq_len, vocab.vocab_size() as u32, rows)
}
