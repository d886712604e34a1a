//! Straight-line reference implementations used by the integration tests.
//! Everything here is written with plain index loops and shares no code with
//! the library beyond the public data types.

#![allow(dead_code)]

use depthprune::{BoundarySet, ToyModel};

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

pub fn oracle_cosine(a: &[f64], b: &[f64], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..rows {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for c in 0..cols {
            let x = a[j * cols + c];
            let y = b[j * cols + c];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        let cos = if na < 1e-12 || nb < 1e-12 {
            0.0
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        };
        total += cos;
    }
    1.0 - total / rows as f64
}

pub fn oracle_mssd(a: &[f64], b: &[f64], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..rows {
        let mut sq = 0.0;
        for c in 0..cols {
            let d = b[j * cols + c] - a[j * cols + c];
            sq += d * d;
        }
        total += sq;
    }
    total / rows as f64
}

pub fn oracle_masd(a: &[f64], b: &[f64], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..rows {
        for c in 0..cols {
            total += (b[j * cols + c] - a[j * cols + c]).abs();
        }
    }
    total / (rows * cols) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScore {
    pub l_sim: f64,
    pub l_diff: f64,
    pub i_sim: f64,
    pub i_diff: f64,
    pub importance: f64,
}

/// Per-layer scores, least-important-first ranking and the sorted prune set.
pub fn oracle_plan(
    boundaries: &BoundarySet,
    masd: bool,
    alpha: f64,
    k: usize,
) -> (Vec<OracleScore>, Vec<usize>, Vec<usize>) {
    let (b, s, d) = boundaries.shape();
    let rows = b * s;
    let h = boundaries.boundaries();
    let mut scores = Vec::new();
    for i in 0..h.len() - 1 {
        let (x, y) = (h[i].data(), h[i + 1].data());
        let l_sim = oracle_cosine(x, y, rows, d);
        let l_diff = if masd {
            oracle_masd(x, y, rows, d)
        } else {
            oracle_mssd(x, y, rows, d)
        };
        let i_diff = 1.0 / (1.0 + (-l_diff).exp());
        let i_sim = l_sim / 2.0;
        scores.push(OracleScore {
            l_sim,
            l_diff,
            i_sim,
            i_diff,
            importance: alpha * i_diff + (1.0 - alpha) * i_sim,
        });
    }
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&p, &q| {
        let (a, c) = (&scores[p], &scores[q]);
        a.importance
            .partial_cmp(&c.importance)
            .unwrap()
            .then(a.l_diff.partial_cmp(&c.l_diff).unwrap())
            .then(p.cmp(&q))
    });
    let mut pruned = ranking[..k].to_vec();
    pruned.sort();
    (scores, ranking, pruned)
}

fn rms_norm(x: &[f64], g: &[f64]) -> Vec<f64> {
    let mut ms = 0.0;
    for v in x {
        ms += v * v;
    }
    let r = 1.0 / (ms / x.len() as f64 + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, gi)| v * r * gi).collect()
}

/// `x W` with `W` stored row-major as `rows x cols`.
fn project(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for o in 0..cols {
            y[o] += xi * w[i * cols + o];
        }
    }
    y
}

/// Token-by-token forward of one sequence through the layers listed in
/// `active`. Returns the residual stream before the first and after each
/// active layer (`[boundary][position][dim]`) plus the logits per position.
pub fn naive_forward(
    model: &ToyModel,
    tokens: &[u32],
    active: &[usize],
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let cfg = &model.config;
    let (d, v, f) = (cfg.hidden_dim, cfg.vocab_size, cfg.mlp_dim);
    let heads = cfg.head_count;
    let dh = d / heads;
    let s = tokens.len();
    let mut x: Vec<Vec<f64>> = (0..s)
        .map(|t| {
            (0..d)
                .map(|c| {
                    model.embedding.data()[tokens[t] as usize * d + c] + model.positions.data()[t * d + c]
                })
                .collect()
        })
        .collect();
    let mut stream = vec![x.clone()];
    for &li in active {
        let w = &model.layers[li];
        let n1: Vec<Vec<f64>> = x.iter().map(|r| rms_norm(r, &w.attn_norm)).collect();
        let q: Vec<Vec<f64>> = n1.iter().map(|r| project(r, w.wq.data(), d)).collect();
        let k: Vec<Vec<f64>> = n1.iter().map(|r| project(r, w.wk.data(), d)).collect();
        let vv: Vec<Vec<f64>> = n1.iter().map(|r| project(r, w.wv.data(), d)).collect();
        let mut next = Vec::with_capacity(s);
        for t in 0..s {
            let mut ctx = vec![0.0; d];
            for h in 0..heads {
                let mut logit = vec![0.0; t + 1];
                for u in 0..=t {
                    let mut acc = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        acc += q[t][c] * k[u][c];
                    }
                    logit[u] = acc / (dh as f64).sqrt();
                }
                let m = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logit.iter().map(|l| (l - m).exp()).sum();
                for u in 0..=t {
                    let p = (logit[u] - m).exp() / z;
                    for c in h * dh..(h + 1) * dh {
                        ctx[c] += p * vv[u][c];
                    }
                }
            }
            let attn = project(&ctx, w.wo.data(), d);
            let mid: Vec<f64> = x[t].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let n2 = rms_norm(&mid, &w.mlp_norm);
            let up: Vec<f64> = project(&n2, w.w_up.data(), f)
                .into_iter()
                .map(|u| u / (1.0 + (-u).exp()))
                .collect();
            let down = project(&up, w.w_down.data(), d);
            next.push((0..d).map(|c| x[t][c] + attn[c] + down[c]).collect());
        }
        x = next;
        stream.push(x.clone());
    }
    let logits = x
        .iter()
        .map(|r| project(&rms_norm(r, &model.final_norm), model.lm_head.data(), v))
        .collect();
    (stream, logits)
}

/// Perplexity from naive logits with an explicitly max-shifted log-softmax.
pub fn naive_perplexity(model: &ToyModel, seqs: &[Vec<u32>], active: &[usize]) -> f64 {
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        let (_, logits) = naive_forward(model, seq, active);
        for t in 0..seq.len() - 1 {
            let row = &logits[t];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            nll += lse - row[seq[t + 1] as usize];
            count += 1;
        }
    }
    (nll / count as f64).exp()
}

/// Alpha search loop written out step by step: returns every `(m1, m2)`
/// pair, the final best alpha and the evaluation count.
pub fn simulate_ternary(
    f: &dyn Fn(f64) -> f64,
    epsilon: f64,
    max_iterations: usize,
) -> (Vec<(f64, f64)>, f64, usize) {
    let mut l = 0.0f64;
    let mut r = 1.0f64;
    let mut best = (f64::NAN, f64::INFINITY);
    let mut mids = Vec::new();
    let mut evals = 0;
    let mut it = 0;
    loop {
        if r - l <= epsilon || it >= max_iterations {
            break;
        }
        let m1 = l + (r - l) / 3.0;
        let m2 = r - (r - l) / 3.0;
        let p1 = f(m1);
        let p2 = f(m2);
        evals += 2;
        if p1 < best.1 {
            best = (m1, p1);
        }
        if p2 < best.1 {
            best = (m2, p2);
        }
        mids.push((m1, m2));
        if p1 > p2 {
            l = m1;
        } else {
            r = m2;
        }
        it += 1;
    }
    (mids, best.0, evals)
}
