//! A small pre-norm decoder-only transformer used as the end-to-end
//! substrate: boundary capture, layer removal, perplexity, throughput and a
//! plain gradient-descent trainer.
//!
//! Block structure: `x += Attn(rmsnorm(x)); x += MLP(rmsnorm(x))` with causal
//! multi-head attention, a SiLU MLP, learned additive positions and an untied
//! output head.

mod bench;
mod calib;
mod forward;
mod ops;
mod train;

pub use bench::{bench_sweep, bench_throughput, BenchConfig, BenchReport, BenchRow, RunStats};
pub use calib::CalibrationSet;
pub use forward::Logits;
pub use ops::Mat;
pub use train::{loss_and_grad, train_micro};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scoring::PruningPlan;

pub const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub mlp_dim: usize,
    pub max_positions: usize,
}

impl ToyConfig {
    /// MLP width `4 * hidden`, 512 positions.
    pub fn new(vocab_size: usize, hidden_dim: usize, layer_count: usize, head_count: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim,
            layer_count,
            head_count,
            mlp_dim: 4 * hidden_dim,
            max_positions: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.mlp_dim == 0 {
            return Err(Error::Config(format!("zero-sized dimension in {self:?}")));
        }
        if self.head_count == 0 || !self.hidden_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by head_count {}",
                self.hidden_dim, self.head_count
            )));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.head_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub mlp_norm: Vec<f64>,
    pub w_up: Mat,
    pub w_down: Mat,
}

impl LayerWeights {
    fn zeros(cfg: &ToyConfig) -> Self {
        let d = cfg.hidden_dim;
        Self {
            attn_norm: vec![0.0; d],
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            mlp_norm: vec![0.0; d],
            w_up: Mat::zeros(d, cfg.mlp_dim),
            w_down: Mat::zeros(cfg.mlp_dim, d),
        }
    }

    /// All-zero weights: the layer's transformation is identically zero.
    pub fn zeroed(&mut self) {
        for (_, _, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn tensors(&self) -> [(&'static str, Vec<usize>, &[f64]); 8] {
        [
            ("attn_norm", vec![self.attn_norm.len()], &self.attn_norm),
            ("wq", self.wq.dims(), self.wq.data()),
            ("wk", self.wk.dims(), self.wk.data()),
            ("wv", self.wv.dims(), self.wv.data()),
            ("wo", self.wo.dims(), self.wo.data()),
            ("mlp_norm", vec![self.mlp_norm.len()], &self.mlp_norm),
            ("w_up", self.w_up.dims(), self.w_up.data()),
            ("w_down", self.w_down.dims(), self.w_down.data()),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, Vec<usize>, &mut [f64]); 8] {
        let n1 = vec![self.attn_norm.len()];
        let n2 = vec![self.mlp_norm.len()];
        let (dq, dk, dv, dout, dup, ddown) = (
            self.wq.dims(),
            self.wk.dims(),
            self.wv.dims(),
            self.wo.dims(),
            self.w_up.dims(),
            self.w_down.dims(),
        );
        [
            ("attn_norm", n1, &mut self.attn_norm),
            ("wq", dq, self.wq.data_mut()),
            ("wk", dk, self.wk.data_mut()),
            ("wv", dv, self.wv.data_mut()),
            ("wo", dout, self.wo.data_mut()),
            ("mlp_norm", n2, &mut self.mlp_norm),
            ("w_up", dup, self.w_up.data_mut()),
            ("w_down", ddown, self.w_down.data_mut()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    /// Seed the weights were drawn from; provenance only.
    pub seed: u64,
    /// `V x D`.
    pub embedding: Mat,
    /// `max_positions x D`, added to the token embedding.
    pub positions: Mat,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `D x V`.
    pub lm_head: Mat,
}

/// One named parameter tensor.
pub type NamedTensor<'a> = (String, Vec<usize>, &'a [f64]);
pub type NamedTensorMut<'a> = (String, Vec<usize>, &'a mut [f64]);

impl ToyModel {
    /// Draws every matrix uniformly from `[-1/sqrt(D), 1/sqrt(D))` with a
    /// ChaCha8 stream seeded by `seed`; norm scales start at 1. Values are
    /// sampled in `f32` so a fresh model survives checkpointing unchanged.
    ///
    /// Draw order: embedding, positions, then per layer wq, wk, wv, wo, w_up,
    /// w_down, and finally the output head.
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.hidden_dim as f32).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound) as f64)
                .collect();
            Mat::from_vec(rows, cols, data)
        };
        let (v, d, f) = (config.vocab_size, config.hidden_dim, config.mlp_dim);
        let embedding = draw(v, d);
        let positions = draw(config.max_positions, d);
        let layers = (0..config.layer_count)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                mlp_norm: vec![1.0; d],
                w_up: draw(d, f),
                w_down: draw(f, d),
            })
            .collect();
        let lm_head = draw(d, v);
        Ok(Self {
            config,
            seed,
            embedding,
            positions,
            layers,
            final_norm: vec![1.0; d],
            lm_head,
        })
    }

    /// Same shapes, every parameter zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut cfg = self.config;
        cfg.layer_count = self.layers.len();
        Self::zeros(cfg, self.seed)
    }

    /// All-zero parameters for `config`.
    pub fn zeros(config: ToyConfig, seed: u64) -> Self {
        let cfg = config;
        Self {
            config: cfg,
            seed,
            embedding: Mat::zeros(cfg.vocab_size, cfg.hidden_dim),
            positions: Mat::zeros(cfg.max_positions, cfg.hidden_dim),
            layers: (0..cfg.layer_count).map(|_| LayerWeights::zeros(&cfg)).collect(),
            final_norm: vec![0.0; cfg.hidden_dim],
            lm_head: Mat::zeros(cfg.hidden_dim, cfg.vocab_size),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out: Vec<NamedTensor<'_>> = vec![
            ("embedding".into(), self.embedding.dims(), self.embedding.data()),
            ("positions".into(), self.positions.dims(), self.positions.data()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, dims, data) in layer.tensors() {
                out.push((format!("layers.{i:04}.{name}"), dims, data));
            }
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        out.push(("lm_head".into(), self.lm_head.dims(), self.lm_head.data()));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        let mut out: Vec<NamedTensorMut<'_>> = Vec::new();
        let ed = self.embedding.dims();
        out.push(("embedding".into(), ed, self.embedding.data_mut()));
        let pd = self.positions.dims();
        out.push(("positions".into(), pd, self.positions.data_mut()));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, dims, data) in layer.tensors_mut() {
                out.push((format!("layers.{i:04}.{name}"), dims, data));
            }
        }
        let fd = vec![self.final_norm.len()];
        out.push(("final_norm".into(), fd, &mut self.final_norm));
        let hd = self.lm_head.dims();
        out.push(("lm_head".into(), hd, self.lm_head.data_mut()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// SHA-256 over config, tensor names and exact weight bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.hidden_dim,
            self.layers.len(),
            c.head_count,
            c.mlp_dim,
            c.max_positions,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for (name, _, data) in self.named_tensors() {
            h.update(name.as_bytes());
            for x in data {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Layer indices that survive `plan`, in original order.
    pub fn active_layers(&self, plan: Option<&PruningPlan>) -> Result<Vec<usize>> {
        let l = self.layers.len();
        match plan {
            None => Ok((0..l).collect()),
            Some(p) => {
                if p.total_layers != l {
                    return Err(Error::Plan(format!(
                        "plan covers {} layers, model has {l}",
                        p.total_layers
                    )));
                }
                Ok((0..l).filter(|i| !p.is_pruned(*i)).collect())
            }
        }
    }

    /// A new model containing only the layers `plan` keeps.
    pub fn without_layers(&self, plan: &PruningPlan) -> Result<Self> {
        let keep = self.active_layers(Some(plan))?;
        let mut out = self.clone();
        out.layers = keep.iter().map(|&i| self.layers[i].clone()).collect();
        out.config.layer_count = out.layers.len();
        Ok(out)
    }
}

/// Convenience constructor mirroring the CLI flags.
pub fn init_model(
    vocab_size: usize,
    hidden_dim: usize,
    layer_count: usize,
    head_count: usize,
    seed: u64,
) -> Result<ToyModel> {
    ToyModel::init(
        ToyConfig::new(vocab_size, hidden_dim, layer_count, head_count),
        seed,
    )
}
