//! Llama-style decoder: RMSNorm, grouped-query attention with rotary
//! embedding, SwiGLU feed-forward, tied or untied LM head.
//!
//! The forward pass records onto a [`Graph`] so the same code serves frozen
//! teachers, on-the-fly projected students and standalone checkpoints. It
//! captures the seven per-layer activations that the clone loss compares.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Var};
use crate::error::{LrcError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub rms_eps: f64,
    pub tie_embeddings: bool,
    pub rope_base: f64,
}

pub const MODEL_PRESETS: &[&str] = &[
    "tiny-debug",
    "llama3.2-3b",
    "qwen2.5-3b",
    "qwen2.5-7b",
    "lrc-1.5b",
    "lrc-1.7b",
    "lrc-4b",
];

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn geometry(
        num_layers: usize,
        hidden_size: usize,
        heads: (usize, usize),
        head_dim: usize,
        ffn_size: usize,
        vocab_size: usize,
        rms_eps: f64,
        tie_embeddings: bool,
    ) -> Self {
        ModelConfig {
            num_layers,
            hidden_size,
            num_q_heads: heads.0,
            num_kv_heads: heads.1,
            head_dim,
            ffn_size,
            vocab_size,
            rms_eps,
            tie_embeddings,
            rope_base: 10_000.0,
        }
    }

    /// Named architectures. The full-size entries carry the published
    /// geometries of the LRC students and their teachers.
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "tiny-debug" => Self::geometry(4, 64, (4, 2), 16, 128, 256, 1e-5, true),
            "llama3.2-3b" => Self::geometry(28, 3072, (24, 8), 128, 8192, 128_256, 1e-5, true),
            "lrc-1.5b" => Self::geometry(28, 1536, (24, 8), 128, 8192, 128_256, 1e-5, true),
            "qwen2.5-3b" => Self::geometry(36, 2048, (16, 2), 128, 11_008, 151_936, 1e-6, true),
            "lrc-1.7b" => Self::geometry(36, 1200, (16, 2), 128, 11_008, 151_936, 1e-6, true),
            "qwen2.5-7b" => Self::geometry(28, 3584, (28, 4), 128, 18_944, 152_064, 1e-6, false),
            "lrc-4b" => Self::geometry(28, 2048, (28, 4), 128, 18_944, 152_064, 1e-6, false),
            other => {
                return Err(LrcError::Config(format!(
                    "unknown model preset {other:?}; known: {}",
                    MODEL_PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn q_dim(&self) -> usize {
        self.num_q_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn with_hidden(&self, hidden_size: usize) -> Self {
        ModelConfig {
            hidden_size,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LrcError::Config(format!("{name} must be at least 1")));
        }
        if self.num_q_heads % self.num_kv_heads != 0 {
            return Err(LrcError::Config(format!(
                "{} query heads not divisible by {} kv heads",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if !(self.rms_eps > 0.0) {
            return Err(LrcError::Config(format!("rms_eps must be positive, got {}", self.rms_eps)));
        }
        if self.head_dim % 2 != 0 {
            return Err(LrcError::Config(format!("head_dim {} must be even for rotary", self.head_dim)));
        }
        Ok(())
    }

    pub fn attention_spec(&self, batch: usize, seq: usize) -> AttentionSpec {
        AttentionSpec {
            batch,
            seq,
            n_q_heads: self.num_q_heads,
            n_kv_heads: self.num_kv_heads,
            head_dim: self.head_dim,
            rope_base: Some(self.rope_base),
        }
    }

    /// `(name, shape)` of every stored tensor, in checkpoint order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden_size;
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
        if !self.tie_embeddings {
            out.push(("lm_head".to_string(), vec![self.vocab_size, d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        for i in 0..self.num_layers {
            for (m, shape) in [
                ("q", vec![self.q_dim(), d]),
                ("k", vec![self.kv_dim(), d]),
                ("v", vec![self.kv_dim(), d]),
                ("o", vec![self.q_dim(), d]),
                ("gate", vec![self.ffn_size, d]),
                ("up", vec![self.ffn_size, d]),
                ("down", vec![self.ffn_size, d]),
                ("attn_norm", vec![d]),
                ("ffn_norm", vec![d]),
            ] {
                out.push((format!("layers.{i}.{m}"), shape));
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Per-layer weights, generic over storage: [`Arc<Tensor>`] for a stored model
/// or [`Var`] for a graph.
///
/// `q/k/v/gate/up` are applied as `x·Wᵀ`; `o` (`[d_q, d]`) and `down`
/// (`[d_mid, d]`) right-multiply.
#[derive(Debug, Clone)]
pub struct LayerParams<W> {
    pub q: W,
    pub k: W,
    pub v: W,
    pub o: W,
    pub gate: W,
    pub up: W,
    pub down: W,
    pub attn_norm: W,
    pub ffn_norm: W,
}

#[derive(Debug, Clone)]
pub struct ModelParams<W> {
    pub layers: Vec<LayerParams<W>>,
    pub embed: W,
    /// Same storage as `embed` when embeddings are tied.
    pub lm_head: W,
    pub final_norm: W,
}

pub type WeightSet<T> = ModelParams<Arc<Tensor<T>>>;
pub type ModelVars = ModelParams<Var>;

impl<W> LayerParams<W> {
    pub fn get(&self, name: &str) -> Option<&W> {
        Some(match name {
            "q" => &self.q,
            "k" => &self.k,
            "v" => &self.v,
            "o" => &self.o,
            "gate" => &self.gate,
            "up" => &self.up,
            "down" => &self.down,
            "attn_norm" => &self.attn_norm,
            "ffn_norm" => &self.ffn_norm,
            _ => return None,
        })
    }
}

impl<T: Real> WeightSet<T> {
    pub fn is_tied(&self) -> bool {
        Arc::ptr_eq(&self.embed, &self.lm_head)
    }

    /// Random weights: linear maps N(0, 1/fan_in), embeddings N(0, 1/d), gains one.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| -> Arc<Tensor<T>> {
            let dist = Normal::new(0.0, std).expect("finite std");
            Arc::new(Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng))))
        };
        let d = cfg.hidden_size;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = normal(&[cfg.vocab_size, d], inv(d));
        let lm_head = if cfg.tie_embeddings {
            Arc::clone(&embed)
        } else {
            normal(&[cfg.vocab_size, d], inv(d))
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            layers.push(LayerParams {
                q: normal(&[cfg.q_dim(), d], inv(d)),
                k: normal(&[cfg.kv_dim(), d], inv(d)),
                v: normal(&[cfg.kv_dim(), d], inv(d)),
                o: normal(&[cfg.q_dim(), d], inv(cfg.q_dim())),
                gate: normal(&[cfg.ffn_size, d], inv(d)),
                up: normal(&[cfg.ffn_size, d], inv(d)),
                down: normal(&[cfg.ffn_size, d], inv(cfg.ffn_size)),
                attn_norm: Arc::new(Tensor::ones(&[d])),
                ffn_norm: Arc::new(Tensor::ones(&[d])),
            });
        }
        Ok(ModelParams {
            layers,
            embed,
            lm_head,
            final_norm: Arc::new(Tensor::ones(&[d])),
        })
    }

    /// Distinct tensors in checkpoint order; the LM head is omitted when tied.
    pub fn named_tensors(&self) -> Vec<(String, Arc<Tensor<T>>)> {
        let mut out = vec![("embed".to_string(), Arc::clone(&self.embed))];
        if !self.is_tied() {
            out.push(("lm_head".to_string(), Arc::clone(&self.lm_head)));
        }
        out.push(("final_norm".to_string(), Arc::clone(&self.final_norm)));
        for (i, l) in self.layers.iter().enumerate() {
            for (m, t) in [
                ("q", &l.q),
                ("k", &l.k),
                ("v", &l.v),
                ("o", &l.o),
                ("gate", &l.gate),
                ("up", &l.up),
                ("down", &l.down),
                ("attn_norm", &l.attn_norm),
                ("ffn_norm", &l.ffn_norm),
            ] {
                out.push((format!("layers.{i}.{m}"), Arc::clone(t)));
            }
        }
        out
    }

    /// Rebuilds a weight set from named tensors, checking every shape against
    /// `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let mut map: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Arc<Tensor<T>>> {
            let t = map
                .remove(name)
                .ok_or_else(|| LrcError::Input(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(LrcError::shape(
                    "weights",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            Ok(Arc::new(t))
        };
        let d = cfg.hidden_size;
        let embed = take("embed", &[cfg.vocab_size, d])?;
        let lm_head = if cfg.tie_embeddings {
            Arc::clone(&embed)
        } else {
            take("lm_head", &[cfg.vocab_size, d])?
        };
        let final_norm = take("final_norm", &[d])?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = |m: &str| format!("layers.{i}.{m}");
            layers.push(LayerParams {
                q: take(&p("q"), &[cfg.q_dim(), d])?,
                k: take(&p("k"), &[cfg.kv_dim(), d])?,
                v: take(&p("v"), &[cfg.kv_dim(), d])?,
                o: take(&p("o"), &[cfg.q_dim(), d])?,
                gate: take(&p("gate"), &[cfg.ffn_size, d])?,
                up: take(&p("up"), &[cfg.ffn_size, d])?,
                down: take(&p("down"), &[cfg.ffn_size, d])?,
                attn_norm: take(&p("attn_norm"), &[d])?,
                ffn_norm: take(&p("ffn_norm"), &[d])?,
            });
        }
        if let Some(extra) = map.keys().next() {
            return Err(LrcError::Input(format!("unexpected tensor {extra}")));
        }
        Ok(ModelParams {
            layers,
            embed,
            lm_head,
            final_norm,
        })
    }

    pub fn cast<U: Real>(&self) -> WeightSet<U> {
        let c = |t: &Arc<Tensor<T>>| Arc::new(t.cast::<U>());
        let embed = c(&self.embed);
        let lm_head = if self.is_tied() {
            Arc::clone(&embed)
        } else {
            c(&self.lm_head)
        };
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    q: c(&l.q),
                    k: c(&l.k),
                    v: c(&l.v),
                    o: c(&l.o),
                    gate: c(&l.gate),
                    up: c(&l.up),
                    down: c(&l.down),
                    attn_norm: c(&l.attn_norm),
                    ffn_norm: c(&l.ffn_norm),
                })
                .collect(),
            embed,
            lm_head,
            final_norm: c(&self.final_norm),
        }
    }

    /// Places every weight on `g`, as trainable leaves or frozen constants.
    /// A tied LM head reuses the embedding node so both uses feed one gradient.
    pub fn to_vars(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Arc<Tensor<T>>| {
            if trainable {
                g.param((**t).clone())
            } else {
                g.constant(Arc::clone(t))
            }
        };
        let embed = leaf(&self.embed);
        let lm_head = if self.is_tied() { embed } else { leaf(&self.lm_head) };
        let final_norm = leaf(&self.final_norm);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                q: leaf(&l.q),
                k: leaf(&l.k),
                v: leaf(&l.v),
                o: leaf(&l.o),
                gate: leaf(&l.gate),
                up: leaf(&l.up),
                down: leaf(&l.down),
                attn_norm: leaf(&l.attn_norm),
                ffn_norm: leaf(&l.ffn_norm),
            })
            .collect();
        ModelParams {
            layers,
            embed,
            lm_head,
            final_norm,
        }
    }
}

impl ModelVars {
    /// Distinct vars in the same order as [`WeightSet::named_tensors`].
    pub fn ordered(&self, tied: bool) -> Vec<Var> {
        let mut out = vec![self.embed];
        if !tied {
            out.push(self.lm_head);
        }
        out.push(self.final_norm);
        for l in &self.layers {
            out.extend([l.q, l.k, l.v, l.o, l.gate, l.up, l.down, l.attn_norm, l.ffn_norm]);
        }
        out
    }
}

/// Activations the clone loss compares. `q/k/v/gate/up` are the raw linear
/// outputs `x·Wᵀ` (k before rotary); `attn_out`/`ffn_out` are module outputs
/// after the output projection and before the residual add.
#[derive(Debug, Clone)]
pub struct LayerActivations<X> {
    pub q: X,
    pub k: X,
    pub v: X,
    pub gate: X,
    pub up: X,
    pub attn_out: X,
    pub ffn_out: X,
}

impl<X> LayerActivations<X> {
    pub const TERMS: [&'static str; 7] = ["q", "k", "v", "o_attn", "gate", "up", "o_ffn"];

    pub fn get(&self, term: CloneTerm) -> &X {
        match term {
            CloneTerm::Q => &self.q,
            CloneTerm::K => &self.k,
            CloneTerm::V => &self.v,
            CloneTerm::AttnOut => &self.attn_out,
            CloneTerm::Gate => &self.gate,
            CloneTerm::Up => &self.up,
            CloneTerm::FfnOut => &self.ffn_out,
        }
    }
}

/// The seven compared activations of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CloneTerm {
    Q,
    K,
    V,
    AttnOut,
    Gate,
    Up,
    FfnOut,
}

impl CloneTerm {
    pub const ALL: [CloneTerm; 7] = [
        CloneTerm::Q,
        CloneTerm::K,
        CloneTerm::V,
        CloneTerm::AttnOut,
        CloneTerm::Gate,
        CloneTerm::Up,
        CloneTerm::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CloneTerm::Q => "q",
            CloneTerm::K => "k",
            CloneTerm::V => "v",
            CloneTerm::AttnOut => "o_attn",
            CloneTerm::Gate => "gate",
            CloneTerm::Up => "up",
            CloneTerm::FfnOut => "o_ffn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| LrcError::Config(format!("unknown clone term {s:?}")))
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, CloneTerm::Gate | CloneTerm::Up | CloneTerm::FfnOut)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationBundle<X> {
    pub batch: usize,
    pub seq: usize,
    pub layers: Vec<LayerActivations<X>>,
    /// `[batch·seq, vocab]`, rows ordered batch-major.
    pub logits: X,
}

impl<X> ActivationBundle<X> {
    /// Captured tensors: seven per layer plus the logits.
    pub fn len(&self) -> usize {
        7 * self.layers.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `batch × seq` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != batch * seq || seq == 0 {
            return Err(LrcError::shape(
                "token batch",
                format!("{} tokens for {batch}×{seq}", tokens.len()),
            ));
        }
        Ok(TokenBatch { batch, seq, tokens })
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }

    /// Rotary positions: each row restarts at 0.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).map(|i| i % self.seq).collect()
    }

    /// Splits into consecutive groups of at most `rows` sequences.
    pub fn split_rows(&self, rows: usize) -> Vec<TokenBatch> {
        let rows = rows.max(1);
        self.tokens
            .chunks(rows * self.seq)
            .map(|c| TokenBatch {
                batch: c.len() / self.seq,
                seq: self.seq,
                tokens: c.to_vec(),
            })
            .collect()
    }
}

/// Records the full decoder forward pass on `g`.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    w: &ModelVars,
    batch: &TokenBatch,
) -> Result<ActivationBundle<Var>> {
    if w.layers.len() != cfg.num_layers {
        return Err(LrcError::Config(format!(
            "{} layer weight groups for a {}-layer config",
            w.layers.len(),
            cfg.num_layers
        )));
    }
    let eps = T::lit(cfg.rms_eps);
    let spec = cfg.attention_spec(batch.batch, batch.seq);
    let positions = batch.positions();
    let mut x = g.embedding(w.embed, &batch.ids())?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lw in &w.layers {
        let xa = g.rmsnorm(x, lw.attn_norm, eps)?;
        let q = g.matmul_t(xa, lw.q)?;
        let k = g.matmul_t(xa, lw.k)?;
        let v = g.matmul_t(xa, lw.v)?;
        let attn = g.attention(q, k, v, &positions, spec)?;
        let attn_out = g.matmul(attn, lw.o)?;
        x = g.add(x, attn_out)?;

        let xf = g.rmsnorm(x, lw.ffn_norm, eps)?;
        let gate = g.matmul_t(xf, lw.gate)?;
        let up = g.matmul_t(xf, lw.up)?;
        let act = g.swiglu(up, gate)?;
        let ffn_out = g.matmul(act, lw.down)?;
        x = g.add(x, ffn_out)?;
        layers.push(LayerActivations {
            q,
            k,
            v,
            gate,
            up,
            attn_out,
            ffn_out,
        });
    }
    let xn = g.rmsnorm(x, w.final_norm, eps)?;
    let logits = g.matmul_t(xn, w.lm_head)?;
    Ok(ActivationBundle {
        batch: batch.batch,
        seq: batch.seq,
        layers,
        logits,
    })
}

/// Copies captured values out of a graph.
pub fn bundle_values<T: Real>(g: &Graph<T>, b: &ActivationBundle<Var>) -> ActivationBundle<Arc<Tensor<T>>> {
    ActivationBundle {
        batch: b.batch,
        seq: b.seq,
        layers: b
            .layers
            .iter()
            .map(|l| LayerActivations {
                q: g.shared_value(l.q),
                k: g.shared_value(l.k),
                v: g.shared_value(l.v),
                gate: g.shared_value(l.gate),
                up: g.shared_value(l.up),
                attn_out: g.shared_value(l.attn_out),
                ffn_out: g.shared_value(l.ffn_out),
            })
            .collect(),
        logits: g.shared_value(b.logits),
    }
}

/// Frozen forward pass returning the captured activations.
pub fn model_forward<T: Real>(
    batch: &TokenBatch,
    weights: &WeightSet<T>,
    cfg: &ModelConfig,
) -> Result<ActivationBundle<Arc<Tensor<T>>>> {
    let mut g = Graph::new();
    let vars = weights.to_vars(&mut g, false);
    let bundle = forward_graph(&mut g, cfg, &vars, batch)?;
    Ok(bundle_values(&g, &bundle))
}

pub fn rmsnorm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, gv) = (g.constant_owned(x.clone()), g.constant_owned(gain.clone()));
    let y = g.rmsnorm(xv, gv, eps)?;
    Ok(g.value(y).clone())
}

pub fn swiglu<T: Real>(up: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (u, gt) = (g.constant_owned(up.clone()), g.constant_owned(gate.clone()));
    let y = g.swiglu(u, gt)?;
    Ok(g.value(y).clone())
}

/// Causal attention over already-projected heads; no output projection.
pub fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    positions: &[usize],
    spec: AttentionSpec,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant_owned(q.clone()),
        g.constant_owned(k.clone()),
        g.constant_owned(v.clone()),
    );
    let y = g.attention(qv, kv, vv, positions, spec)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny-debug").unwrap()
    }

    fn tokens(batch: usize, seq: usize, seed: u32) -> TokenBatch {
        let t = (0..batch * seq).map(|i| (i as u32 * 37 + seed * 11) % 250).collect();
        TokenBatch::new(batch, seq, t).unwrap()
    }

    #[test]
    fn published_student_geometries() {
        let c = ModelConfig::preset("lrc-1.5b").unwrap();
        assert_eq!(
            (c.num_layers, c.num_q_heads, c.num_kv_heads, c.head_dim, c.hidden_size, c.ffn_size),
            (28, 24, 8, 128, 1536, 8192)
        );
        assert_eq!((c.rms_eps, c.vocab_size, c.tie_embeddings), (1e-5, 128_256, true));
        assert!(!ModelConfig::preset("lrc-4b").unwrap().tie_embeddings);
        for name in MODEL_PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn rmsnorm_cases() {
        let z = rmsnorm(&Tensor::<f64>::zeros(&[1, 4]), &Tensor::from_fn(&[4], |i| i as f64), 1e-5).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        let c = rmsnorm(&Tensor::<f64>::full(&[1, 5], 3.0), &Tensor::ones(&[5]), 1e-12).unwrap();
        assert!(c.data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
        let x = Tensor::<f64>::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let g = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let y = rmsnorm(&x, &g, 0.0).unwrap();
        // rms = sqrt(12.5); 3/rms = 0.848528137..., 2·4/rms = 2.262741699...
        assert!((y.data()[0] - 0.848_528_137_4).abs() < 1e-9);
        assert!((y.data()[1] - 2.262_741_699_8).abs() < 1e-9);
        assert!(rmsnorm(&x, &Tensor::ones(&[3]), 0.0).is_err());
    }

    #[test]
    fn unit_gain_rmsnorm_has_unit_rms() {
        let x = Tensor::<f64>::from_fn(&[3, 7], |i| (i as f64 * 0.77).sin() * 4.0 + 0.1);
        let y = rmsnorm(&x, &Tensor::ones(&[7]), 0.0).unwrap();
        for row in y.data().chunks(7) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 7.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn swiglu_cases() {
        let one = Tensor::<f64>::ones(&[1, 1]);
        let zero = Tensor::<f64>::zeros(&[1, 1]);
        assert_eq!(swiglu(&one, &zero).unwrap().item(), 0.0);
        assert_eq!(swiglu(&zero, &one).unwrap().item(), 0.0);
        assert!((swiglu(&one, &one).unwrap().item() - 0.731_058_578_6).abs() < 1e-9);
        assert!(swiglu(&one, &Tensor::zeros(&[1, 2])).is_err());
    }

    fn no_rope(batch: usize, seq: usize, hq: usize, hkv: usize, hd: usize) -> AttentionSpec {
        AttentionSpec {
            batch,
            seq,
            n_q_heads: hq,
            n_kv_heads: hkv,
            head_dim: hd,
            rope_base: None,
        }
    }

    #[test]
    fn single_position_attention_returns_value() {
        let q = Tensor::<f64>::from_fn(&[1, 8], |i| i as f64);
        let k = Tensor::<f64>::from_fn(&[1, 4], |i| -(i as f64));
        let v = Tensor::<f64>::from_fn(&[1, 4], |i| i as f64 * 0.5 + 1.0);
        let out = attention_forward(&q, &k, &v, &[0], no_rope(1, 1, 2, 1, 4)).unwrap();
        assert_eq!(out.data(), &[1.0, 1.5, 2.0, 2.5, 1.0, 1.5, 2.0, 2.5]);
    }

    #[test]
    fn two_token_attention_matches_brute_force() {
        let q = Tensor::<f64>::from_rows(&[&[0.3, -1.2], &[0.8, 0.5]]).unwrap();
        let k = Tensor::<f64>::from_rows(&[&[1.0, 0.4], &[-0.6, 0.9]]).unwrap();
        let v = Tensor::<f64>::from_rows(&[&[2.0, -1.0], &[0.5, 3.0]]).unwrap();
        let out = attention_forward(&q, &k, &v, &[0, 1], no_rope(1, 2, 1, 1, 2)).unwrap();
        // brute force: row 0 sees only itself; row 1 softmax over two scaled scores
        let s = 1.0 / 2f64.sqrt();
        let s0 = (0.8 * 1.0 + 0.5 * 0.4) * s;
        let s1 = (0.8 * -0.6 + 0.5 * 0.9) * s;
        let (e0, e1) = (s0.exp(), s1.exp());
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let expected = [2.0, -1.0, p0 * 2.0 + p1 * 0.5, p0 * -1.0 + p1 * 3.0];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_shapes_and_bundle_count() {
        let cfg = tiny();
        let w = WeightSet::<f32>::random(&cfg, 1).unwrap();
        let b = model_forward(&tokens(2, 8, 0), &w, &cfg).unwrap();
        assert_eq!(b.logits.shape(), &[16, 256]);
        assert_eq!(b.len(), 7 * 4 + 1);
        assert_eq!(b.layers.len(), cfg.num_layers);
        assert_eq!(b.layers[0].k.shape(), &[16, cfg.kv_dim()]);
        assert_eq!(b.layers[3].ffn_out.shape(), &[16, 64]);
        assert!(b.logits.is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let w = WeightSet::<f32>::random(&cfg, 5).unwrap();
        let batch = tokens(2, 6, 3);
        let a = model_forward(&batch, &w, &cfg).unwrap();
        let b = model_forward(&batch, &w, &cfg).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
        for (x, y) in a.layers.iter().zip(&b.layers) {
            for t in CloneTerm::ALL {
                assert!(x.get(t).bit_eq(y.get(t)));
            }
        }
    }

    #[test]
    fn prefix_is_causal_in_every_capture() {
        let cfg = tiny();
        let w = WeightSet::<f64>::random(&cfg, 9).unwrap();
        let a = tokens(1, 8, 1);
        let mut b = a.clone();
        b.tokens[5] = (b.tokens[5] + 17) % 250;
        let (fa, fb) = (model_forward(&a, &w, &cfg).unwrap(), model_forward(&b, &w, &cfg).unwrap());
        let prefix = |t: &Tensor<f64>| t.data()[..5 * t.cols()].to_vec();
        for (x, y) in fa.layers.iter().zip(&fb.layers) {
            for t in CloneTerm::ALL {
                assert_eq!(prefix(x.get(t)), prefix(y.get(t)), "{t:?}");
            }
        }
        assert_eq!(prefix(&fa.logits), prefix(&fb.logits));
        assert_ne!(fa.logits.data()[5 * 256..6 * 256], fb.logits.data()[5 * 256..6 * 256]);
    }

    #[test]
    fn out_of_vocab_token_is_input_error() {
        let cfg = tiny();
        let w = WeightSet::<f32>::random(&cfg, 1).unwrap();
        let bad = TokenBatch::new(1, 2, vec![3, 256]).unwrap();
        assert!(matches!(model_forward(&bad, &w, &cfg), Err(LrcError::Input(_))));
    }

    #[test]
    fn named_round_trip_preserves_tying() {
        let cfg = tiny();
        let w = WeightSet::<f32>::random(&cfg, 2).unwrap();
        let named = w.named_tensors().into_iter().map(|(n, t)| (n, (*t).clone())).collect();
        let back = WeightSet::from_named(&cfg, named).unwrap();
        assert!(back.is_tied());
        assert!(back.layers[2].down.bit_eq(&w.layers[2].down));
        assert_eq!(
            cfg.tensor_shapes().len(),
            w.named_tensors().len(),
        );
    }
}
