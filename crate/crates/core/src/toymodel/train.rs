//! Full-model backpropagation and a plain SGD loop.

use super::forward::{layer_update, LayerCache};
use super::ops::{
    logsumexp, matmul, matmul_backward, rmsnorm, rmsnorm_backward, silu_grad, softmax_in_place,
};
use super::{CalibrationSet, LayerWeights, ToyConfig, ToyModel, RMS_EPS};
use crate::error::{Error, Result};

fn add_into(acc: &mut [f64], part: &[f64]) {
    for (a, p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

fn attention_backward(
    c: &LayerCache,
    dctx: &[f64],
    s: usize,
    cfg: &ToyConfig,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; s * d];
    let mut dk = vec![0.0; s * d];
    let mut dv = vec![0.0; s * d];
    let mut dp = vec![0.0; s];
    for h in 0..cfg.head_count {
        let off = h * dh;
        for t in 0..s {
            let p = &c.probs[(h * s + t) * s..(h * s + t) * s + t + 1];
            let dct = &dctx[t * d + off..t * d + off + dh];
            let mut weighted = 0.0;
            for u in 0..=t {
                let vu = &c.v[u * d + off..u * d + off + dh];
                dp[u] = dct.iter().zip(vu).map(|(a, b)| a * b).sum();
                weighted += p[u] * dp[u];
                for (g, x) in dv[u * d + off..u * d + off + dh].iter_mut().zip(dct) {
                    *g += p[u] * x;
                }
            }
            for u in 0..=t {
                let ds = p[u] * (dp[u] - weighted) * scale;
                for e in 0..dh {
                    dq[t * d + off + e] += ds * c.k[u * d + off + e];
                    dk[u * d + off + e] += ds * c.q[t * d + off + e];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Backward through one layer; returns the gradient w.r.t. the layer input.
fn layer_backward(
    layer: &LayerWeights,
    c: &LayerCache,
    dout: &[f64],
    g: &mut LayerWeights,
    cfg: &ToyConfig,
) -> Vec<f64> {
    let s = c.r1.len();
    // out = x2 + mlp(x2), x2 = x_in + attn(x_in)
    let dact = matmul_backward(&c.act, dout, s, &layer.w_down, &mut g.w_down);
    let dup: Vec<f64> = dact
        .iter()
        .zip(&c.up)
        .map(|(da, &u)| da * silu_grad(u))
        .collect();
    let dn2 = matmul_backward(&c.n2, &dup, s, &layer.w_up, &mut g.w_up);
    let mut dx2 = rmsnorm_backward(&c.x2, &c.r2, &dn2, &layer.mlp_norm, &mut g.mlp_norm);
    add_into(&mut dx2, dout);

    let dctx = matmul_backward(&c.ctx, &dx2, s, &layer.wo, &mut g.wo);
    let (dq, dk, dv) = attention_backward(c, &dctx, s, cfg);
    let mut dn1 = matmul_backward(&c.n1, &dq, s, &layer.wq, &mut g.wq);
    add_into(&mut dn1, &matmul_backward(&c.n1, &dk, s, &layer.wk, &mut g.wk));
    add_into(&mut dn1, &matmul_backward(&c.n1, &dv, s, &layer.wv, &mut g.wv));
    let mut dx = rmsnorm_backward(&c.x_in, &c.r1, &dn1, &layer.attn_norm, &mut g.attn_norm);
    add_into(&mut dx, &dx2);
    dx
}

/// Mean next-token cross-entropy over every predicted position of `batch`
/// and its gradient, returned as a model-shaped tensor set.
pub fn loss_and_grad(model: &ToyModel, batch: &[Vec<u32>]) -> Result<(f64, ToyModel)> {
    let cfg = model.config;
    let (d, v) = (cfg.hidden_dim, cfg.vocab_size);
    let data = CalibrationSet::new(batch.to_vec())?;
    model.check_data(&data)?;
    let s = data.seq_len();
    let count = (batch.len() * (s - 1)) as f64;
    let mut grad = model.zeros_like();
    let mut loss = 0.0f64;

    for tokens in batch {
        let mut x = model.embed(tokens);
        let mut caches: Vec<LayerCache> = Vec::with_capacity(model.layers.len());
        for layer in &model.layers {
            let mut cache = LayerCache::default();
            let f = layer_update(layer, &x, s, &cfg, Some(&mut cache));
            add_into(&mut x, &f);
            caches.push(cache);
        }
        let (nf, rf) = rmsnorm(&x, s, &model.final_norm, RMS_EPS);
        let mut logits = matmul(&nf, s, &model.lm_head);

        for t in 0..s {
            let row = &mut logits[t * v..(t + 1) * v];
            if t + 1 == s {
                row.fill(0.0);
                continue;
            }
            let target = tokens[t + 1] as usize;
            loss += logsumexp(row) - row[target];
            softmax_in_place(row);
            row[target] -= 1.0;
            for g in row.iter_mut() {
                *g /= count;
            }
        }

        let dnf = matmul_backward(&nf, &logits, s, &model.lm_head, &mut grad.lm_head);
        let mut dx = rmsnorm_backward(&x, &rf, &dnf, &model.final_norm, &mut grad.final_norm);
        for ((layer, cache), g) in model
            .layers
            .iter()
            .zip(&caches)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            dx = layer_backward(layer, cache, &dx, g, &cfg);
        }
        for (t, &tok) in tokens.iter().enumerate() {
            let dxt = &dx[t * d..(t + 1) * d];
            add_into(grad.embedding.row_mut(tok as usize), dxt);
            add_into(grad.positions.row_mut(t), dxt);
        }
    }
    Ok((loss / count, grad))
}

/// Plain gradient descent: step `t` trains on sequence `t mod N` of `corpus`
/// with update `w -= lr * grad`. `steps == 0` returns an unchanged copy.
pub fn train_micro(model: &ToyModel, corpus: &CalibrationSet, steps: usize, lr: f64) -> Result<ToyModel> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let mut current = model.clone();
    for step in 0..steps {
        let seq = &corpus.sequences()[step % corpus.len()];
        let (loss, grad) = loss_and_grad(&current, std::slice::from_ref(seq))?;
        if !loss.is_finite() {
            return Err(Error::Train { step, loss });
        }
        for ((_, _, w), (_, _, g)) in current
            .named_tensors_mut()
            .into_iter()
            .zip(grad.named_tensors())
        {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{init_model, ToyConfig};

    fn small() -> (ToyModel, Vec<Vec<u32>>) {
        let cfg = ToyConfig {
            vocab_size: 16,
            hidden_dim: 8,
            layer_count: 2,
            head_count: 2,
            mlp_dim: 12,
            max_positions: 8,
        };
        let m = ToyModel::init(cfg, 5).unwrap();
        (m, vec![vec![1, 4, 9, 2, 2, 15], vec![3, 3, 0, 7, 11, 6]])
    }

    #[test]
    fn loss_matches_perplexity() {
        let (m, batch) = small();
        let (loss, _) = loss_and_grad(&m, &batch).unwrap();
        let ppl = m
            .perplexity(None, &CalibrationSet::new(batch).unwrap())
            .unwrap();
        assert!((loss - ppl.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_everywhere() {
        let (m, batch) = small();
        let (_, grad) = loss_and_grad(&m, &batch).unwrap();
        let grads: Vec<(String, Vec<f64>)> = grad
            .named_tensors()
            .into_iter()
            .map(|(n, _, d)| (n, d.to_vec()))
            .collect();
        let h = 1e-5;
        for (ti, (name, g)) in grads.iter().enumerate() {
            for idx in (0..g.len()).step_by(7) {
                let mut plus = m.clone();
                plus.named_tensors_mut()[ti].2[idx] += h;
                let mut minus = m.clone();
                minus.named_tensors_mut()[ti].2[idx] -= h;
                let fd = (loss_and_grad(&plus, &batch).unwrap().0
                    - loss_and_grad(&minus, &batch).unwrap().0)
                    / (2.0 * h);
                let err = (fd - g[idx]).abs();
                assert!(err <= 1e-7 + 1e-4 * fd.abs().max(g[idx].abs()), "{name}[{idx}]: fd={fd} analytic={}", g[idx]);
            }
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (m, batch) = small();
        let c = CalibrationSet::new(batch).unwrap();
        assert_eq!(train_micro(&m, &c, 0, 0.1).unwrap().checksum(), m.checksum());
        assert!(train_micro(&m, &c, 1, -1.0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let m = init_model(256, 16, 1, 2, 1).unwrap();
        let c = CalibrationSet::synthetic(4, 16, 1).unwrap();
        match train_micro(&m, &c, 50, 1e200) {
            Err(Error::Train { .. }) => {}
            other => panic!("expected TrainError, got {other:?}"),
        }
    }
}
