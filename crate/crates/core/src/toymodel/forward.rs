use super::ops::{logsumexp, matmul, rmsnorm, silu, softmax_in_place};
use super::{CalibrationSet, LayerWeights, ToyConfig, ToyModel, RMS_EPS};
use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::scoring::PruningPlan;
use crate::tensor::TensorF;

/// Next-token logits for `n_seq` sequences of `seq_len` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub n_seq: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn at(&self, seq: usize, pos: usize) -> &[f64] {
        let start = (seq * self.seq_len + pos) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

/// Intermediates of one layer over one sequence, kept for backprop.
#[derive(Debug, Default)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub n1: Vec<f64>,
    pub r1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `heads x S x S`, zero above the diagonal.
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
    pub x2: Vec<f64>,
    pub n2: Vec<f64>,
    pub r2: Vec<f64>,
    pub up: Vec<f64>,
    pub act: Vec<f64>,
}

/// Causal multi-head attention context for `s` positions.
fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    cfg: &ToyConfig,
    mut probs_out: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; s * d];
    if let Some(p) = probs_out.as_deref_mut() {
        *p = vec![0.0; cfg.head_count * s * s];
    }
    let mut scores = vec![0.0; s];
    for h in 0..cfg.head_count {
        let off = h * dh;
        for t in 0..s {
            let qt = &q[t * d + off..t * d + off + dh];
            for u in 0..=t {
                let ku = &k[u * d + off..u * d + off + dh];
                scores[u] = qt.iter().zip(ku).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores[..=t]);
            let out = &mut ctx[t * d + off..t * d + off + dh];
            for u in 0..=t {
                let p = scores[u];
                for (o, vv) in out.iter_mut().zip(&v[u * d + off..u * d + off + dh]) {
                    *o += p * vv;
                }
            }
            if let Some(pr) = probs_out.as_deref_mut() {
                pr[(h * s + t) * s..(h * s + t) * s + t + 1].copy_from_slice(&scores[..=t]);
            }
        }
    }
    ctx
}

/// The layer's update `F(x)` for one sequence of `s` positions, so that the
/// layer output is `x + F(x)`.
pub(crate) fn layer_update(
    layer: &LayerWeights,
    x: &[f64],
    s: usize,
    cfg: &ToyConfig,
    cache: Option<&mut LayerCache>,
) -> Vec<f64> {
    let (n1, r1) = rmsnorm(x, s, &layer.attn_norm, RMS_EPS);
    let q = matmul(&n1, s, &layer.wq);
    let k = matmul(&n1, s, &layer.wk);
    let v = matmul(&n1, s, &layer.wv);
    let mut probs = Vec::new();
    let ctx = attention(
        &q,
        &k,
        &v,
        s,
        cfg,
        if cache.is_some() { Some(&mut probs) } else { None },
    );
    let a = matmul(&ctx, s, &layer.wo);
    let x2: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| xi + ai).collect();
    let (n2, r2) = rmsnorm(&x2, s, &layer.mlp_norm, RMS_EPS);
    let up = matmul(&n2, s, &layer.w_up);
    let act: Vec<f64> = up.iter().map(|&u| silu(u)).collect();
    let m = matmul(&act, s, &layer.w_down);
    let update = a.iter().zip(&m).map(|(ai, mi)| ai + mi).collect();
    if let Some(c) = cache {
        *c = LayerCache {
            x_in: x.to_vec(),
            n1,
            r1,
            q,
            k,
            v,
            probs,
            ctx,
            x2,
            n2,
            r2,
            up,
            act,
        };
    }
    update
}

impl ToyModel {
    pub(crate) fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.config.hidden_dim;
        let mut x = vec![0.0; tokens.len() * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            for ((o, e), p) in row
                .iter_mut()
                .zip(self.embedding.row(tok as usize))
                .zip(self.positions.row(t))
            {
                *o = e + p;
            }
        }
        x
    }

    pub(crate) fn head(&self, x: &[f64], s: usize) -> Vec<f64> {
        let (n, _) = rmsnorm(x, s, &self.final_norm, RMS_EPS);
        matmul(&n, s, &self.lm_head)
    }

    /// Runs one sequence through the `active` layers. When `capture` is
    /// given, the residual stream is appended before the first and after
    /// every active layer.
    fn run_sequence(
        &self,
        tokens: &[u32],
        active: &[usize],
        mut capture: Option<&mut Vec<Vec<f64>>>,
    ) -> Vec<f64> {
        let s = tokens.len();
        let mut x = self.embed(tokens);
        if let Some(c) = capture.as_deref_mut() {
            c.push(x.clone());
        }
        for &i in active {
            let f = layer_update(&self.layers[i], &x, s, &self.config, None);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
            if let Some(c) = capture.as_deref_mut() {
                c.push(x.clone());
            }
        }
        self.head(&x, s)
    }

    pub(crate) fn check_data(&self, data: &CalibrationSet) -> Result<()> {
        data.check_vocab(self.config.vocab_size)?;
        if data.seq_len() > self.config.max_positions {
            return Err(Error::Data(format!(
                "sequence length {} exceeds the model's {} positions",
                data.seq_len(),
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn forward_active(&self, data: &CalibrationSet, active: &[usize]) -> Result<Logits> {
        self.check_data(data)?;
        let mut out = Vec::with_capacity(data.len() * data.seq_len() * self.config.vocab_size);
        for seq in data.sequences() {
            out.extend(self.run_sequence(seq, active, None));
        }
        Ok(Logits {
            n_seq: data.len(),
            seq_len: data.seq_len(),
            vocab: self.config.vocab_size,
            data: out,
        })
    }

    /// Dense forward pass recording all `L + 1` residual-stream boundaries.
    pub fn forward_capture(&self, data: &CalibrationSet) -> Result<(BoundarySet, Logits)> {
        self.check_data(data)?;
        let (n, s, d) = (data.len(), data.seq_len(), self.config.hidden_dim);
        let l = self.layers.len();
        let active: Vec<usize> = (0..l).collect();
        let mut flat: Vec<Vec<f64>> = (0..=l).map(|_| Vec::with_capacity(n * s * d)).collect();
        let mut logits = Vec::with_capacity(n * s * self.config.vocab_size);
        let mut captured = Vec::with_capacity(l + 1);
        for seq in data.sequences() {
            captured.clear();
            logits.extend(self.run_sequence(seq, &active, Some(&mut captured)));
            for (dst, src) in flat.iter_mut().zip(captured.drain(..)) {
                dst.extend(src);
            }
        }
        let tensors = flat
            .into_iter()
            .map(|b| TensorF::new(vec![n, s, d], b))
            .collect::<Result<Vec<_>>>()?;
        let boundaries = BoundarySet::new(tensors, self.checksum(), data.fingerprint())?;
        Ok((
            boundaries,
            Logits {
                n_seq: n,
                seq_len: s,
                vocab: self.config.vocab_size,
                data: logits,
            },
        ))
    }

    /// Forward pass that skips the layers `plan` prunes.
    pub fn prune_and_forward(&self, plan: &PruningPlan, data: &CalibrationSet) -> Result<Logits> {
        let active = self.active_layers(Some(plan))?;
        self.forward_active(data, &active)
    }

    pub fn forward(&self, data: &CalibrationSet) -> Result<Logits> {
        let active = self.active_layers(None)?;
        self.forward_active(data, &active)
    }

    /// `exp` of the mean next-token negative log-likelihood over positions
    /// `1..S` of every sequence.
    pub fn perplexity(&self, plan: Option<&PruningPlan>, data: &CalibrationSet) -> Result<f64> {
        self.check_data(data)?;
        let active = self.active_layers(plan)?;
        let (s, v) = (data.seq_len(), self.config.vocab_size);
        let mut nll = 0.0f64;
        for seq in data.sequences() {
            let logits = self.run_sequence(seq, &active, None);
            for t in 0..s - 1 {
                let row = &logits[t * v..(t + 1) * v];
                nll += logsumexp(row) - row[seq[t + 1] as usize];
            }
        }
        let count = (data.len() * (s - 1)) as f64;
        Ok((nll / count).exp())
    }
}
