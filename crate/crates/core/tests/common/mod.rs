//! Shared helpers for the acceptance suite, including a from-scratch scalar
//! forward pass kept deliberately independent of the library internals.

use stagelm::model::{ModelConfig, ModelParams};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column `o` of the `[n_in × n_out]` row-major weight, applied to `x`.
fn col_apply(x: &[f64], w: &[f64], n_out: usize, o: usize) -> f64 {
    x.iter()
        .enumerate()
        .map(|(i, &xi)| xi * w[i * n_out + o])
        .sum()
}

fn scalar_rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len();
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let r = 1.0 / (ms + eps).sqrt();
    (0..d).map(|i| x[i] * r * gain[i]).collect()
}

fn scalar_rope_row(row: &[f64], n_heads: usize, head_dim: usize, pos: usize, base: f64) -> Vec<f64> {
    let mut out = row.to_vec();
    for h in 0..n_heads {
        for i in 0..head_dim / 2 {
            let theta = pos as f64 * base.powf(-((2 * i) as f64) / head_dim as f64);
            let (s, c) = theta.sin_cos();
            let a = row[h * head_dim + 2 * i];
            let b = row[h * head_dim + 2 * i + 1];
            out[h * head_dim + 2 * i] = c * a - s * b;
            out[h * head_dim + 2 * i + 1] = s * a + c * b;
        }
    }
    out
}

/// Straight-line decoder forward over raw token ids; returns per-position
/// logit rows. Everything is per-position scalar arithmetic: no shared matmul
/// helper, no caching, softmax without max subtraction.
pub fn scalar_forward(params: &ModelParams, cfg: &ModelConfig, tokens: &[u32]) -> Vec<Vec<f64>> {
    let d = cfg.d_model;
    let dh = cfg.d_model / cfg.n_heads;
    let t_len = tokens.len();

    let mut states: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&id| params.tok_embed[id as usize * d..(id as usize + 1) * d].to_vec())
        .collect();

    for layer in &params.layers {
        let normed: Vec<Vec<f64>> = states
            .iter()
            .map(|x| scalar_rmsnorm(x, &layer.attn_norm_gain, cfg.rms_eps))
            .collect();
        // Per-position projections with RoPE applied row by row.
        let q: Vec<Vec<f64>> = normed
            .iter()
            .enumerate()
            .map(|(t, x)| {
                let raw: Vec<f64> = (0..d).map(|o| col_apply(x, &layer.wq, d, o)).collect();
                scalar_rope_row(&raw, cfg.n_heads, dh, t, cfg.rope_base)
            })
            .collect();
        let k: Vec<Vec<f64>> = normed
            .iter()
            .enumerate()
            .map(|(t, x)| {
                let raw: Vec<f64> = (0..d).map(|o| col_apply(x, &layer.wk, d, o)).collect();
                scalar_rope_row(&raw, cfg.n_heads, dh, t, cfg.rope_base)
            })
            .collect();
        let v: Vec<Vec<f64>> = normed
            .iter()
            .map(|x| (0..d).map(|o| col_apply(x, &layer.wv, d, o)).collect())
            .collect();

        let mut attn_outs: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut ctx = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let qh = &q[t][h * dh..(h + 1) * dh];
                let weights: Vec<f64> = (0..=t)
                    .map(|s| (dot(qh, &k[s][h * dh..(h + 1) * dh]) / (dh as f64).sqrt()).exp())
                    .collect();
                let z: f64 = weights.iter().sum();
                for s in 0..=t {
                    for i in 0..dh {
                        ctx[h * dh + i] += weights[s] / z * v[s][h * dh + i];
                    }
                }
            }
            attn_outs.push((0..d).map(|o| col_apply(&ctx, &layer.wo, d, o)).collect());
        }

        let mut next: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let ffn_in: Vec<f64> = if cfg.parallel_residual {
                normed[t].clone()
            } else {
                let mid: Vec<f64> = (0..d).map(|i| states[t][i] + attn_outs[t][i]).collect();
                scalar_rmsnorm(&mid, &layer.ffn_norm_gain, cfg.rms_eps)
            };
            let mut ffn_out = vec![0.0; d];
            let mut gated = vec![0.0; cfg.ffn_hidden];
            for j in 0..cfg.ffn_hidden {
                let u = col_apply(&ffn_in, &layer.w_gate, cfg.ffn_hidden, j);
                let up = col_apply(&ffn_in, &layer.w_up, cfg.ffn_hidden, j);
                gated[j] = u / (1.0 + (-u).exp()) * up;
            }
            for o in 0..d {
                ffn_out[o] = col_apply(&gated, &layer.w_down, d, o);
            }
            // Both circuits sum the same three terms; they differ only in
            // what the FFN read (normed1 vs normed mid-state).
            next.push(
                (0..d)
                    .map(|i| states[t][i] + attn_outs[t][i] + ffn_out[i])
                    .collect(),
            );
        }
        states = next;
    }

    states
        .iter()
        .map(|x| {
            let n = scalar_rmsnorm(x, &params.final_norm_gain, cfg.rms_eps);
            (0..cfg.vocab_size)
                .map(|o| col_apply(&n, &params.lm_head, cfg.vocab_size, o))
                .collect()
        })
        .collect()
}
