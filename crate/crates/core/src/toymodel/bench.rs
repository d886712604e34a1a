//! Greedy autoregressive generation with a KV cache, timed.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{matmul, rmsnorm, silu, softmax_in_place};
use super::{ToyModel, RMS_EPS};
use crate::error::{Error, Result};
use crate::scoring::PruningPlan;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub gen_tokens: usize,
    pub batch: usize,
    pub prompt_len: usize,
    pub repeats: usize,
    /// Seeds the random prompts.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            gen_tokens: 256,
            batch: 16,
            prompt_len: 4,
            repeats: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    /// Tokens per second of each repeat.
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation divided by the mean.
    pub rel_std: f64,
}

impl RunStats {
    fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            runs,
            mean,
            rel_std: var.sqrt() / mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub pruned_layers: usize,
    pub stats: RunStats,
    /// Mean throughput relative to the dense row of the same sweep.
    pub speedup: f64,
    /// Tokens generated by the first repeat, for cross-checking.
    pub sample_output: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub dense: BenchRow,
    pub pruned: BenchRow,
    pub speedup: f64,
}

struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    fn new(layers: usize, capacity: usize, hidden: usize) -> Self {
        Self {
            keys: vec![vec![0.0; capacity * hidden]; layers],
            values: vec![vec![0.0; capacity * hidden]; layers],
            len: 0,
        }
    }
}

impl ToyModel {
    /// Feeds one token per sequence (all at the same position) and returns
    /// the `batch x V` logits. Every projection runs over the whole batch.
    fn decode_batch(&self, active: &[usize], caches: &mut [KvCache], tokens: &[u32]) -> Vec<f64> {
        let cfg = &self.config;
        let (d, dh) = (cfg.hidden_dim, cfg.head_dim());
        let nb = tokens.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = Vec::with_capacity(nb * d);
        for (b, &tok) in tokens.iter().enumerate() {
            let pos = caches[b].len;
            x.extend(
                self.embedding
                    .row(tok as usize)
                    .iter()
                    .zip(self.positions.row(pos))
                    .map(|(e, p)| e + p),
            );
        }
        let mut ctx = vec![0.0; nb * d];
        for (slot, &li) in active.iter().enumerate() {
            let layer = &self.layers[li];
            let (n1, _) = rmsnorm(&x, nb, &layer.attn_norm, RMS_EPS);
            let q = matmul(&n1, nb, &layer.wq);
            let k = matmul(&n1, nb, &layer.wk);
            let v = matmul(&n1, nb, &layer.wv);
            ctx.fill(0.0);
            for (b, cache) in caches.iter_mut().enumerate() {
                let pos = cache.len;
                let keys = &mut cache.keys[slot];
                let values = &mut cache.values[slot];
                keys[pos * d..(pos + 1) * d].copy_from_slice(&k[b * d..(b + 1) * d]);
                values[pos * d..(pos + 1) * d].copy_from_slice(&v[b * d..(b + 1) * d]);
                let mut scores = vec![0.0; pos + 1];
                for h in 0..cfg.head_count {
                    let off = h * dh;
                    let qh = &q[b * d + off..b * d + off + dh];
                    for (u, sc) in scores.iter_mut().enumerate() {
                        let ku = &keys[u * d + off..u * d + off + dh];
                        *sc = qh.iter().zip(ku).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut scores);
                    let out = &mut ctx[b * d + off..b * d + off + dh];
                    for (u, &p) in scores.iter().enumerate() {
                        let vu = &values[u * d + off..u * d + off + dh];
                        for (o, vv) in out.iter_mut().zip(vu) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let a = matmul(&ctx, nb, &layer.wo);
            let x2: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| xi + ai).collect();
            let (n2, _) = rmsnorm(&x2, nb, &layer.mlp_norm, RMS_EPS);
            let mut up = matmul(&n2, nb, &layer.w_up);
            for u in up.iter_mut() {
                *u = silu(*u);
            }
            let m = matmul(&up, nb, &layer.w_down);
            for ((xi, ai), mi) in x.iter_mut().zip(&a).zip(&m) {
                *xi += ai + mi;
            }
        }
        for cache in caches.iter_mut() {
            cache.len += 1;
        }
        self.head(&x, nb)
    }

    /// Greedy continuation of each prompt by `gen_tokens` tokens. Prompts
    /// must share one length; the batch advances in lockstep.
    pub fn generate(
        &self,
        plan: Option<&PruningPlan>,
        prompts: &[Vec<u32>],
        gen_tokens: usize,
    ) -> Result<Vec<Vec<u32>>> {
        let active = self.active_layers(plan)?;
        let (v, d) = (self.config.vocab_size, self.config.hidden_dim);
        let prompt_len = prompts.first().map_or(0, Vec::len);
        let total = prompt_len + gen_tokens;
        if prompt_len == 0 || prompts.iter().any(|p| p.len() != prompt_len) {
            return Err(Error::Config("prompts must be non-empty and of equal length".into()));
        }
        if total > self.config.max_positions {
            return Err(Error::Config(format!(
                "prompt of {prompt_len} plus {gen_tokens} generated tokens exceeds {} positions",
                self.config.max_positions
            )));
        }
        if let Some(&bad) = prompts.iter().flatten().find(|&&t| t as usize >= v) {
            return Err(Error::Data(format!("prompt token {bad} outside vocabulary")));
        }
        let mut caches: Vec<KvCache> = (0..prompts.len())
            .map(|_| KvCache::new(active.len(), total, d))
            .collect();
        let mut logits = Vec::new();
        for t in 0..prompt_len {
            let column: Vec<u32> = prompts.iter().map(|p| p[t]).collect();
            logits = self.decode_batch(&active, &mut caches, &column);
        }
        let mut outputs = vec![Vec::with_capacity(gen_tokens); prompts.len()];
        for step in 0..gen_tokens {
            let next: Vec<u32> = logits.chunks(v).map(argmax).collect();
            for (o, &n) in outputs.iter_mut().zip(&next) {
                o.push(n);
            }
            if step + 1 < gen_tokens {
                logits = self.decode_batch(&active, &mut caches, &next);
            }
        }
        Ok(outputs)
    }
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn prompts(model: &ToyModel, cfg: &BenchConfig) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.batch)
        .map(|_| {
            (0..cfg.prompt_len)
                .map(|_| rng.gen_range(0..model.config.vocab_size as u32))
                .collect()
        })
        .collect()
}

/// Times the dense model and each plan, interleaving configurations within
/// every repeat so drift hits all of them alike. Row 0 is always dense.
pub fn bench_sweep(model: &ToyModel, plans: &[&PruningPlan], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.batch == 0 || cfg.gen_tokens == 0 || cfg.prompt_len == 0 {
        return Err(Error::Config(format!(
            "bench needs positive repeats, batch, prompt and generation lengths: {cfg:?}"
        )));
    }
    let variants: Vec<Option<&PruningPlan>> =
        std::iter::once(None).chain(plans.iter().map(|p| Some(*p))).collect();
    for p in variants.iter().flatten() {
        model.active_layers(Some(p))?;
    }
    let prompts = prompts(model, cfg);
    let tokens = (cfg.batch * cfg.gen_tokens) as f64;
    let mut runs = vec![Vec::with_capacity(cfg.repeats); variants.len()];
    let mut samples = vec![Vec::new(); variants.len()];
    // untimed warm-up
    model.generate(None, &prompts[..1], 1)?;
    for r in 0..cfg.repeats {
        for (vi, plan) in variants.iter().enumerate() {
            let start = Instant::now();
            let out = black_box(model.generate(*plan, black_box(&prompts), cfg.gen_tokens)?);
            let secs = start.elapsed().as_secs_f64();
            runs[vi].push(tokens / secs);
            if r == 0 {
                samples[vi] = out;
            }
        }
    }
    let stats: Vec<RunStats> = runs.into_iter().map(RunStats::from_runs).collect();
    let dense_mean = stats[0].mean;
    Ok(stats
        .into_iter()
        .zip(samples)
        .zip(&variants)
        .map(|((stats, sample_output), plan)| BenchRow {
            pruned_layers: plan.map_or(0, |p| p.k),
            speedup: stats.mean / dense_mean,
            stats,
            sample_output,
        })
        .collect())
}

/// Throughput of `plan` against a dense run measured in the same session.
pub fn bench_throughput(model: &ToyModel, plan: &PruningPlan, cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rows = bench_sweep(model, &[plan], cfg)?;
    let pruned = rows.pop().expect("two rows");
    let dense = rows.pop().expect("two rows");
    Ok(BenchReport {
        speedup: pruned.speedup,
        dense,
        pruned,
    })
}
