//! Optimization: Adam over projections and student gains, linear warmup and
//! decay, global-norm clipping, metrics and resumable checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Graph;
use crate::checkpoint::{read_checkpoint, tensors_hash, write_checkpoint, CheckpointKind};
use crate::corpus::{BatchStream, TokenCorpus};
use crate::error::{LrcError, Result};
use crate::losses::{lm_loss_graph, objective_graph, parse_layer_bits, CloneMask, LossOptions, LossReport};
use crate::model::{forward_graph, model_forward, LayerParams, ModelConfig, ModelParams, ModelVars, TokenBatch, WeightSet};
use crate::projection::{project_on_graph, ProjectionOptions, ProjectionSet, SharingMode};
use crate::tensor::{Real, Tensor};

pub const METRICS_HEADER: &str = "step,lr,clone,kl,lm,total,grad_norm,tokens,wall_ms";
pub const TRAIN_PRESETS: &[&str] = &["tiny-distill", "lrc-1.5b", "lrc-1.7b", "lrc-4b"];

/// Synthetic corpus recipe used by the desk presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub kind: String,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            kind: "markov".into(),
            size: 400_000,
            seed: 7,
        }
    }
}

/// LM-only pre-training of a random teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            learning_rate: 3e-3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Model preset of the teacher.
    pub teacher: String,
    pub student_hidden: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub tau_squared: bool,
    pub mse_sum: bool,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_tokens: usize,
    pub seq_len: usize,
    /// Sequences per microbatch; 0 runs the whole batch at once.
    pub micro_batch_seqs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub sharing: SharingMode,
    pub alignment_free: bool,
    pub separate_lm: Option<bool>,
    pub stop_grad_targets: bool,
    /// Comma list of disabled clone terms or modules.
    pub clone_mask: String,
    /// `all` or a bit mask over layers.
    pub clone_layers: String,
    pub mask_doc_boundaries: bool,
    pub checkpoint_every: usize,
    /// When false the metrics `wall_ms` column is written as 0, which makes
    /// the CSV a pure function of the seed.
    pub record_wall_time: bool,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            teacher: "tiny-debug".into(),
            student_hidden: 32,
            alpha: 0.5,
            temperature: 40.0,
            tau_squared: true,
            mse_sum: false,
            learning_rate: 1e-4,
            warmup_ratio: 0.005,
            total_steps: 1000,
            batch_tokens: 2048 * 16,
            seq_len: 2048,
            micro_batch_seqs: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
            seed: 0,
            sharing: SharingMode::ALL_ALL,
            alignment_free: true,
            separate_lm: None,
            stop_grad_targets: false,
            clone_mask: String::new(),
            clone_layers: "all".into(),
            mask_doc_boundaries: false,
            checkpoint_every: 0,
            record_wall_time: true,
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

fn steps_for(tokens: f64, batch_tokens: usize) -> usize {
    (tokens / batch_tokens as f64).round() as usize
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = TrainConfig::default();
        Ok(match name {
            "tiny-distill" => TrainConfig {
                teacher: "tiny-debug".into(),
                student_hidden: 32,
                alpha: 0.5,
                learning_rate: 1e-3,
                total_steps: 2000,
                seq_len: 32,
                batch_tokens: 32 * 8,
                seed: 7,
                ..base
            },
            "lrc-1.5b" => TrainConfig {
                teacher: "llama3.2-3b".into(),
                student_hidden: 1536,
                alpha: 0.2,
                learning_rate: 1e-4,
                batch_tokens: 49_152,
                total_steps: steps_for(10e9, 49_152),
                ..base
            },
            "lrc-1.7b" => TrainConfig {
                teacher: "qwen2.5-3b".into(),
                student_hidden: 1200,
                alpha: 0.5,
                learning_rate: 6.7e-5,
                batch_tokens: 32_768,
                total_steps: steps_for(20e9, 32_768),
                ..base
            },
            "lrc-4b" => TrainConfig {
                teacher: "qwen2.5-7b".into(),
                student_hidden: 2048,
                alpha: 0.5,
                learning_rate: 1e-4,
                batch_tokens: 32_768,
                total_steps: steps_for(18e9, 32_768),
                ..base
            },
            other => {
                return Err(LrcError::Config(format!(
                    "unknown training preset {other:?} (known: {})",
                    TRAIN_PRESETS.join(", ")
                )))
            }
        })
    }

    /// Applies the keys of a JSON object on top of `self`.
    pub fn overlay(&self, patch: &Value) -> Result<Self> {
        let Value::Object(patch) = patch else {
            return Err(LrcError::Config("config file must hold a JSON object".into()));
        };
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| LrcError::Config(format!("bad config: {e}")))
    }

    pub fn teacher_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.teacher)
    }

    pub fn projection_options(&self) -> ProjectionOptions {
        ProjectionOptions {
            sharing: self.sharing,
            alignment_free: self.alignment_free,
            separate_lm: self.separate_lm,
        }
    }

    pub fn loss_options(&self, num_layers: usize, separator: Option<u32>) -> Result<LossOptions> {
        let mut mask = CloneMask::parse_disabled(&self.clone_mask, num_layers)?;
        if let Some(bits) = parse_layer_bits(&self.clone_layers)? {
            mask = mask.with_layer_bits(bits)?;
        }
        let opts = LossOptions {
            alpha: self.alpha,
            temperature: self.temperature,
            tau_squared: self.tau_squared,
            mse_sum: self.mse_sum,
            stop_grad_targets: self.stop_grad_targets,
            boundary_separator: if self.mask_doc_boundaries { separator } else { None },
            mask,
        };
        opts.validate()?;
        Ok(opts)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            clip_norm: self.clip_norm,
        }
    }

    pub fn batch_seqs(&self) -> Result<usize> {
        if self.seq_len < 2 || self.batch_tokens < self.seq_len || self.batch_tokens % self.seq_len != 0 {
            return Err(LrcError::Config(format!(
                "batch_tokens {} must be a positive multiple of seq_len {} (≥ 2)",
                self.batch_tokens, self.seq_len
            )));
        }
        Ok(self.batch_tokens / self.seq_len)
    }

    fn micro_rows(&self) -> Result<usize> {
        let seqs = self.batch_seqs()?;
        let micro = if self.micro_batch_seqs == 0 { seqs } else { self.micro_batch_seqs };
        if seqs % micro != 0 {
            return Err(LrcError::Config(format!(
                "micro_batch_seqs {micro} does not divide {seqs} sequences per batch"
            )));
        }
        Ok(micro)
    }

    pub fn validate(&self) -> Result<()> {
        self.batch_seqs()?;
        self.micro_rows()?;
        if !(self.learning_rate >= 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(LrcError::Config("learning rate must be ≥ 0 and warmup ratio in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(LrcError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(LrcError::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: &serde_json::Map<String, Value>) {
    let Value::Object(b) = base else { return };
    for (k, v) in patch {
        match (b.get_mut(k), v) {
            (Some(slot @ Value::Object(_)), Value::Object(p)) => merge(slot, p),
            _ => {
                b.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup_ratio · total` steps, then
/// linear decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup_ratio: f64, peak: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let warm = warmup_ratio * total as f64;
    let s = step as f64;
    if s < warm {
        peak * s / warm
    } else {
        peak * (total as f64 - s) / (total as f64 - warm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update. The global gradient norm is returned
/// before clipping. Non-finite gradients leave everything untouched.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LrcError::Contract(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(LrcError::NonFinite(format!("gradient norm {norm}")));
    }
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (c1, c2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let bc1 = T::lit(1.0 / (1.0 - cfg.beta1.powi(t)));
    let bc2 = T::lit(1.0 / (1.0 - cfg.beta2.powi(t)));
    let (lr, eps, clip) = (T::lit(lr), T::lit(cfg.eps), T::lit(clip));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() {
            return Err(LrcError::shape("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((p, &g), m), v) in it {
            let g = g * clip;
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let mh = *m * bc1;
            let vh = *v * bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(norm)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
    pub grad_norm: f64,
    pub tokens: u64,
    pub wall_ms: u64,
    pub accepted: bool,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.lr, r.clone, r.kl, r.lm, r.total, self.grad_norm, self.tokens, self.wall_ms
        )
    }
}

fn nan_report() -> LossReport {
    LossReport {
        clone: f64::NAN,
        kl: f64::NAN,
        lm: f64::NAN,
        total: f64::NAN,
        terms: Default::default(),
    }
}

/// Runs `f` over equal microbatches and averages losses and gradients in a
/// fixed order.
fn accumulate<T: Real>(
    batch: &TokenBatch,
    micro_rows: usize,
    mut f: impl FnMut(&TokenBatch) -> Result<(LossReport, Vec<Tensor<T>>)>,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let parts = batch.split_rows(micro_rows);
    if parts.len() == 1 {
        return f(&parts[0]);
    }
    let w = 1.0 / parts.len() as f64;
    let wt = T::lit(w);
    let mut acc: Option<(LossReport, Vec<Tensor<T>>)> = None;
    for part in &parts {
        let (r, g) = f(part)?;
        match &mut acc {
            None => {
                let mut r0 = r.clone();
                r0.clone *= w;
                r0.kl *= w;
                r0.lm *= w;
                r0.total *= w;
                r0.terms.values_mut().for_each(|x| *x *= w);
                acc = Some((r0, g.into_iter().map(|t| t.map(|x| x * wt)).collect()));
            }
            Some((ar, ag)) => {
                ar.clone += w * r.clone;
                ar.kl += w * r.kl;
                ar.lm += w * r.lm;
                ar.total += w * r.total;
                for (k, v) in r.terms {
                    *ar.terms.entry(k).or_insert(0.0) += w * v;
                }
                for (a, b) in ag.iter_mut().zip(&g) {
                    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += wt * y;
                    }
                }
            }
        }
    }
    Ok(acc.expect("at least one microbatch"))
}

fn reports_finite<T: Real>(report: &LossReport, grads: &[Tensor<T>]) -> bool {
    report.is_finite() && grads.iter().all(Tensor::is_finite)
}

/// Distillation state: frozen teacher, trainable projections, optimizer.
pub struct Distiller<T: Real> {
    pub cfg: TrainConfig,
    pub teacher_cfg: ModelConfig,
    pub teacher: Arc<WeightSet<T>>,
    pub student_cfg: ModelConfig,
    pub loss: LossOptions,
    pub proj: ProjectionSet<T>,
    pub opt: OptimizerState<T>,
    pub step: usize,
    pub spikes: u64,
    pub tokens_seen: u64,
    teacher_hash: u64,
}

impl<T: Real> Distiller<T> {
    pub fn new(cfg: TrainConfig, teacher_cfg: ModelConfig, teacher: Arc<WeightSet<T>>) -> Result<Self> {
        let proj = ProjectionSet::init(&teacher_cfg, cfg.student_hidden, cfg.projection_options(), cfg.seed)?;
        Self::with_projection(cfg, teacher_cfg, teacher, proj)
    }

    pub fn with_projection(
        cfg: TrainConfig,
        teacher_cfg: ModelConfig,
        teacher: Arc<WeightSet<T>>,
        proj: ProjectionSet<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if teacher.layers.len() != teacher_cfg.num_layers {
            return Err(LrcError::Config("teacher weights do not match teacher config".into()));
        }
        let loss = cfg.loss_options(teacher_cfg.num_layers, Some(teacher_cfg.vocab_size as u32 - 1))?;
        let opt = OptimizerState::new(proj.params());
        let teacher_hash = weights_hash(&teacher);
        Ok(Distiller {
            student_cfg: proj.student_config(),
            cfg,
            teacher_cfg,
            teacher,
            loss,
            proj,
            opt,
            step: 0,
            spikes: 0,
            tokens_seen: 0,
            teacher_hash,
        })
    }

    pub fn teacher_hash(&self) -> u64 {
        self.teacher_hash
    }

    /// Loss report and gradients of every projection parameter on one batch,
    /// without touching any state.
    pub fn gradients(&self, batch: &TokenBatch) -> Result<(LossReport, Vec<Tensor<T>>)> {
        accumulate(batch, self.cfg.micro_rows()?, |mb| {
            distill_gradients(&self.teacher_cfg, &self.teacher, &self.proj, &self.loss, mb)
        })
    }

    pub fn train_step(&mut self, batch: &TokenBatch) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step + 1;
        let lr = lr_schedule(step, self.cfg.total_steps, self.cfg.warmup_ratio, self.cfg.learning_rate);
        let (report, grads) = self.gradients(batch)?;
        let mut accepted = reports_finite(&report, &grads);
        let mut grad_norm = f64::NAN;
        if accepted {
            match adam_step(self.proj.params_mut(), &grads, &mut self.opt, lr, &self.cfg.adam()) {
                Ok(n) => grad_norm = n,
                Err(LrcError::NonFinite(_)) => accepted = false,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            self.spikes += 1;
        }
        self.step = step;
        self.tokens_seen += batch.tokens.len() as u64;
        Ok(StepRecord {
            step,
            lr,
            report: if accepted { report } else { nan_report() },
            grad_norm,
            tokens: self.tokens_seen,
            wall_ms: if self.cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
            accepted,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, &Tensor<T>)> = Vec::new();
        for (n, t) in self.proj.named() {
            named.push((format!("proj.{n}"), t));
        }
        for (n, t) in self.proj.names().iter().zip(&self.opt.m) {
            named.push((format!("adam.m.{n}"), t));
        }
        for (n, t) in self.proj.names().iter().zip(&self.opt.v) {
            named.push((format!("adam.v.{n}"), t));
        }
        let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let config = serde_json::json!({
            "teacher": self.teacher_cfg,
            "student_hidden": self.proj.student_hidden(),
            "projection": self.proj.options(),
            "train": self.cfg,
            "state": {
                "step": self.step,
                "adam_t": self.opt.t,
                "spikes": self.spikes,
                "tokens_seen": self.tokens_seen,
                "teacher_hash": format!("{:016x}", self.teacher_hash),
            },
        });
        write_checkpoint(path, CheckpointKind::Projection, &config, &refs)
    }

    /// Restores a run saved by [`Distiller::save`] against the same teacher.
    pub fn resume(path: &Path, teacher: Arc<WeightSet<T>>) -> Result<Self> {
        let ck = load_projection(path)?;
        let hash = weights_hash(&teacher);
        if format!("{hash:016x}") != ck.teacher_hash {
            return Err(LrcError::Contract(format!(
                "checkpoint was trained against teacher {}, got {hash:016x}",
                ck.teacher_hash
            )));
        }
        let mut d = Distiller::with_projection(ck.train, ck.teacher_cfg, teacher, ck.proj.cast())?;
        d.opt = OptimizerState {
            m: ck.m.iter().map(Tensor::cast).collect(),
            v: ck.v.iter().map(Tensor::cast).collect(),
            t: ck.adam_t,
        };
        d.step = ck.step;
        d.spikes = ck.spikes;
        d.tokens_seen = ck.tokens_seen;
        Ok(d)
    }
}

pub fn weights_hash<T: Real>(w: &WeightSet<T>) -> u64 {
    let named = w.named_tensors();
    tensors_hash(named.iter().map(|(n, t)| (n.as_str(), &**t)))
}

/// Everything a projection checkpoint holds, in f64.
#[derive(Debug, Clone)]
pub struct ProjectionCheckpoint {
    pub teacher_cfg: ModelConfig,
    pub train: TrainConfig,
    pub proj: ProjectionSet<f64>,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub adam_t: u64,
    pub step: usize,
    pub spikes: u64,
    pub tokens_seen: u64,
    pub teacher_hash: String,
    pub dtype: crate::tensor::DType,
}

pub fn load_projection(path: &Path) -> Result<ProjectionCheckpoint> {
    let ck = read_checkpoint(path)?;
    ck.expect_kind(CheckpointKind::Projection)?;
    let bad = |what: &str| LrcError::Input(format!("projection checkpoint: bad or missing {what}"));
    let c = &ck.config;
    let teacher_cfg: ModelConfig =
        serde_json::from_value(c.get("teacher").cloned().ok_or_else(|| bad("teacher"))?).map_err(|_| bad("teacher"))?;
    let train: TrainConfig =
        serde_json::from_value(c.get("train").cloned().ok_or_else(|| bad("train"))?).map_err(|_| bad("train"))?;
    let options: ProjectionOptions = serde_json::from_value(c.get("projection").cloned().ok_or_else(|| bad("projection"))?)
        .map_err(|_| bad("projection"))?;
    let student_hidden = c.get("student_hidden").and_then(Value::as_u64).ok_or_else(|| bad("student_hidden"))? as usize;
    let state = c.get("state").ok_or_else(|| bad("state"))?;
    let num = |k: &str| state.get(k).and_then(Value::as_u64).ok_or_else(|| bad(k));
    let mut proj_t = Vec::new();
    let mut m = std::collections::HashMap::new();
    let mut v = std::collections::HashMap::new();
    for (name, t) in ck.tensors_as::<f64>() {
        if let Some(n) = name.strip_prefix("proj.") {
            proj_t.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix("adam.m.") {
            m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam.v.") {
            v.insert(n.to_string(), t);
        } else {
            return Err(LrcError::Input(format!("unexpected tensor {name} in projection checkpoint")));
        }
    }
    let proj = ProjectionSet::from_named(&teacher_cfg, student_hidden, options, proj_t)?;
    let moments = |map: &mut std::collections::HashMap<String, Tensor<f64>>| -> Vec<Tensor<f64>> {
        proj.names()
            .iter()
            .zip(proj.params())
            .map(|(n, p)| map.remove(n).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    let (m, v) = (moments(&mut m), moments(&mut v));
    Ok(ProjectionCheckpoint {
        teacher_cfg,
        train,
        proj,
        m,
        v,
        adam_t: num("adam_t")?,
        step: num("step")? as usize,
        spikes: num("spikes")?,
        tokens_seen: num("tokens_seen")?,
        teacher_hash: state
            .get("teacher_hash")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("teacher_hash"))?
            .to_string(),
        dtype: ck.dtype().unwrap_or(crate::tensor::DType::F32),
    })
}

/// Loss and projection gradients for one microbatch.
pub fn distill_gradients<T: Real>(
    teacher_cfg: &ModelConfig,
    teacher: &WeightSet<T>,
    proj: &ProjectionSet<T>,
    loss: &LossOptions,
    batch: &TokenBatch,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let teacher_acts = model_forward(batch, teacher, teacher_cfg)?;
    let student_cfg = proj.student_config();
    let mut g = Graph::new();
    let tv = teacher.to_vars(&mut g, false);
    let pv = proj.to_vars(&mut g);
    let sv = project_on_graph(&mut g, &tv, student_cfg.tie_embeddings, &pv)?;
    let sb = forward_graph(&mut g, &student_cfg, &sv, batch)?;
    let vars = objective_graph(&mut g, &sb, &teacher_acts, &pv, batch, loss)?;
    let report = vars.report(&g);
    g.backward(vars.total)?;
    let grads = pv.params.iter().map(|&p| g.grad_or_zeros(p)).collect();
    Ok((report, grads))
}

fn vars_from_ordered(cfg: &ModelConfig, vars: &[crate::autograd::Var]) -> ModelVars {
    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("ordered var count matches config");
    let embed = next();
    let lm_head = if cfg.tie_embeddings { embed } else { next() };
    let final_norm = next();
    let layers = (0..cfg.num_layers)
        .map(|_| LayerParams {
            q: next(),
            k: next(),
            v: next(),
            o: next(),
            gate: next(),
            up: next(),
            down: next(),
            attn_norm: next(),
            ffn_norm: next(),
        })
        .collect();
    ModelParams {
        layers,
        embed,
        lm_head,
        final_norm,
    }
}

/// Ordinary LM training of every weight of a model: used to pre-train desk
/// teachers and as the from-scratch baseline.
pub struct LmTrainer<T: Real> {
    pub model: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub opt: OptimizerState<T>,
    pub adam: AdamConfig,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub micro_rows: usize,
    pub boundary_separator: Option<u32>,
    pub record_wall_time: bool,
    pub step: usize,
    pub spikes: u64,
    pub tokens_seen: u64,
}

impl<T: Real> LmTrainer<T> {
    /// Starts from `weights`, with schedule and optimizer settings from `cfg`.
    pub fn new(model: ModelConfig, weights: &WeightSet<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (names, params): (Vec<String>, Vec<Tensor<T>>) =
            weights.named_tensors().into_iter().map(|(n, t)| (n, (*t).clone())).unzip();
        let opt = OptimizerState::new(&params);
        Ok(LmTrainer {
            boundary_separator: cfg.mask_doc_boundaries.then(|| model.vocab_size as u32 - 1),
            model,
            names,
            params,
            opt,
            adam: cfg.adam(),
            learning_rate: cfg.learning_rate,
            warmup_ratio: cfg.warmup_ratio,
            total_steps: cfg.total_steps,
            micro_rows: cfg.micro_rows()?,
            record_wall_time: cfg.record_wall_time,
            step: 0,
            spikes: 0,
            tokens_seen: 0,
        })
    }

    pub fn weights(&self) -> Result<WeightSet<T>> {
        WeightSet::from_named(&self.model, self.names.iter().cloned().zip(self.params.iter().cloned()).collect())
    }

    pub fn gradients(&self, batch: &TokenBatch) -> Result<(LossReport, Vec<Tensor<T>>)> {
        accumulate(batch, self.micro_rows, |mb| {
            let mut g = Graph::new();
            let vars: Vec<_> = self.params.iter().map(|p| g.param(p.clone())).collect();
            let mv = vars_from_ordered(&self.model, &vars);
            let bundle = forward_graph(&mut g, &self.model, &mv, mb)?;
            let lm = lm_loss_graph(&mut g, bundle.logits, mb, self.boundary_separator)?;
            g.backward(lm)?;
            let value = g.value(lm).item().as_f64();
            let report = LossReport {
                clone: 0.0,
                kl: 0.0,
                lm: value,
                total: value,
                terms: Default::default(),
            };
            Ok((report, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
        })
    }

    pub fn train_step(&mut self, batch: &TokenBatch) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step + 1;
        let lr = lr_schedule(step, self.total_steps, self.warmup_ratio, self.learning_rate);
        let (report, grads) = self.gradients(batch)?;
        let mut accepted = reports_finite(&report, &grads);
        let mut grad_norm = f64::NAN;
        if accepted {
            match adam_step(&mut self.params, &grads, &mut self.opt, lr, &self.adam) {
                Ok(n) => grad_norm = n,
                Err(LrcError::NonFinite(_)) => accepted = false,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            self.spikes += 1;
        }
        self.step = step;
        self.tokens_seen += batch.tokens.len() as u64;
        Ok(StepRecord {
            step,
            lr,
            report: if accepted { report } else { nan_report() },
            grad_norm,
            tokens: self.tokens_seen,
            wall_ms: if self.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
            accepted,
        })
    }
}

/// Pre-trains a random `cfg.teacher` model on `corpus` with LM loss only,
/// using the `pretrain` section of `cfg`.
pub fn pretrain_teacher<T: Real>(corpus: &TokenCorpus, cfg: &TrainConfig) -> Result<(ModelConfig, WeightSet<T>, Vec<StepRecord>)> {
    let model = cfg.teacher_config()?;
    let weights = WeightSet::<T>::random(&model, cfg.pretrain.seed)?;
    let lm_cfg = TrainConfig {
        learning_rate: cfg.pretrain.learning_rate,
        total_steps: cfg.pretrain.steps,
        seed: cfg.pretrain.seed,
        ..cfg.clone()
    };
    let mut trainer = LmTrainer::new(model.clone(), &weights, &lm_cfg)?;
    let mut stream = BatchStream::new(corpus, lm_cfg.seq_len, lm_cfg.batch_seqs()?, lm_cfg.seed)?;
    let mut records = Vec::with_capacity(lm_cfg.total_steps);
    for _ in 0..lm_cfg.total_steps {
        let b = stream.next().expect("endless stream");
        records.push(trainer.train_step(&b)?);
    }
    Ok((model, trainer.weights()?, records))
}

/// Where and how a run persists its outputs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop after this global step (simulates an interrupted run).
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome<T: Real> {
    pub distiller: Distiller<T>,
    pub records: Vec<StepRecord>,
}

fn open_metrics(path: &Path, keep_rows: usize, resuming: bool) -> Result<BufWriter<File>> {
    let io = |e| LrcError::io(path, e);
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    if resuming && path.exists() {
        let old = std::fs::read_to_string(path).map_err(io)?;
        for line in old.lines().skip(1).take(keep_rows) {
            text.push_str(line);
            text.push('\n');
        }
    }
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    f.write_all(text.as_bytes()).map_err(io)?;
    Ok(f)
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:06}.lrck"))
}

/// Full LRC run over packed batches of `corpus`. With an output directory it
/// writes `config.json`, `metrics.csv`, periodic checkpoints and a final
/// `projection.lrck`.
pub fn run_training<T: Real>(
    corpus: &TokenCorpus,
    teacher_cfg: &ModelConfig,
    teacher: Arc<WeightSet<T>>,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome<T>> {
    if corpus.vocab_size as usize != teacher_cfg.vocab_size {
        return Err(LrcError::Config(format!(
            "corpus vocabulary {} differs from teacher vocabulary {}",
            corpus.vocab_size, teacher_cfg.vocab_size
        )));
    }
    let mut d = match &opts.resume {
        Some(p) => Distiller::resume(p, teacher)?,
        None => Distiller::new(cfg.clone(), teacher_cfg.clone(), teacher)?,
    };
    let mut stream = BatchStream::new(corpus, d.cfg.seq_len, d.cfg.batch_seqs()?, d.cfg.seed)?;
    stream.seek(d.step);

    let mut metrics = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| LrcError::io(dir, e))?;
            let cfg_path = dir.join("config.json");
            let text = serde_json::to_string_pretty(&d.cfg).expect("config serializes");
            std::fs::write(&cfg_path, text + "\n").map_err(|e| LrcError::io(&cfg_path, e))?;
            Some(open_metrics(&dir.join("metrics.csv"), d.step, opts.resume.is_some())?)
        }
        None => None,
    };

    let total = d.cfg.total_steps;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut records = Vec::new();
    while d.step < stop {
        let batch = stream.next().expect("endless stream");
        let rec = d.train_step(&batch)?;
        if let (Some(f), Some(dir)) = (&mut metrics, &opts.out_dir) {
            writeln!(f, "{}", rec.csv_row()).map_err(|e| LrcError::io(dir.join("metrics.csv"), e))?;
        }
        records.push(rec);
        if let Some(dir) = &opts.out_dir {
            if d.cfg.checkpoint_every > 0 && d.step % d.cfg.checkpoint_every == 0 {
                if let Some(f) = &mut metrics {
                    f.flush().map_err(|e| LrcError::io(dir.join("metrics.csv"), e))?;
                }
                d.save(&checkpoint_path(dir, d.step))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        if let Some(f) = &mut metrics {
            f.flush().map_err(|e| LrcError::io(dir.join("metrics.csv"), e))?;
        }
        d.save(&dir.join("projection.lrck"))?;
    }
    Ok(TrainOutcome { distiller: d, records })
}

/// Mean LM loss of a standalone model over `batches`.
pub fn evaluate_lm<T: Real>(cfg: &ModelConfig, weights: &WeightSet<T>, batches: &[TokenBatch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let acts = model_forward(b, weights, cfg)?;
        total += crate::losses::lm_loss(&acts.logits, b)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Mean LM loss of the student generated on the fly from teacher and
/// projections.
pub fn evaluate_projected<T: Real>(
    teacher_cfg: &ModelConfig,
    teacher: &WeightSet<T>,
    proj: &ProjectionSet<T>,
    batches: &[TokenBatch],
) -> Result<f64> {
    let student_cfg = proj.student_config();
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::new();
        let tv = teacher.to_vars(&mut g, false);
        let pv = proj.to_vars(&mut g);
        let sv = project_on_graph(&mut g, &tv, student_cfg.tie_embeddings, &pv)?;
        let sb = forward_graph(&mut g, &student_cfg, &sv, b)?;
        let l = lm_loss_graph(&mut g, sb.logits, b, None)?;
        total += g.value(l).item().as_f64();
    }
    let _ = teacher_cfg;
    Ok(total / batches.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic_corpus, SyntheticKind};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            seq_len: 8,
            batch_tokens: 16,
            total_steps: 20,
            learning_rate: 1e-2,
            record_wall_time: false,
            ..TrainConfig::preset("tiny-distill").unwrap()
        }
    }

    fn small_teacher() -> (ModelConfig, Arc<WeightSet<f32>>) {
        let mut cfg = ModelConfig::preset("tiny-debug").unwrap();
        cfg.num_layers = 2;
        let w = WeightSet::random(&cfg, 3).unwrap();
        (cfg, Arc::new(w))
    }

    #[test]
    fn published_training_defaults() {
        let d = TrainConfig::default();
        assert_eq!((d.adam_beta1, d.adam_beta2, d.warmup_ratio, d.seq_len, d.temperature), (0.9, 0.999, 0.005, 2048, 40.0));
        let p = TrainConfig::preset("lrc-1.5b").unwrap();
        assert_eq!((p.batch_tokens, p.learning_rate, p.student_hidden), (49_152, 1e-4, 1536));
        let p = TrainConfig::preset("lrc-1.7b").unwrap();
        assert_eq!((p.batch_tokens, p.learning_rate, p.student_hidden), (32_768, 6.7e-5, 1200));
        assert!(TrainConfig::preset("nope").is_err());
    }

    #[test]
    fn overlay_respects_precedence_and_rejects_typos() {
        let base = TrainConfig::preset("tiny-distill").unwrap();
        let cfg = base.overlay(&serde_json::json!({"alpha": 0.1, "corpus": {"size": 10}})).unwrap();
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.corpus.size, 10);
        assert_eq!(cfg.corpus.kind, "markov");
        assert!(base.overlay(&serde_json::json!({"alpah": 0.1})).is_err());
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(1000, 1000, 0.005, 1e-4), 0.0);
        assert!((lr_schedule(5, 1000, 0.005, 1e-4) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(0, 1000, 0.005, 1e-4), 0.0);
        let mid = lr_schedule(503, 1000, 0.005, 1e-4);
        assert!((mid - 5e-5).abs() / 5e-5 < 0.01, "{mid}");
        assert!((lr_schedule(2, 1000, 0.005, 1e-4) - 4e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_and_zero_grads() {
        let mut p = vec![Tensor::<f64>::scalar(0.5)];
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig {
            clip_norm: None,
            ..Default::default()
        };
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, 0.1, &cfg).unwrap();
        assert!((p[0].item() - (0.5 - 0.1)).abs() < 1e-8);

        let mut q = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64)];
        let before = q[0].clone();
        let mut st = OptimizerState::new(&q);
        adam_step(&mut q, &[Tensor::zeros(&[3])], &mut st, 0.1, &cfg).unwrap();
        assert!(q[0].bit_eq(&before));

        let mut st2 = OptimizerState::new(&q);
        let bad = [Tensor::from_fn(&[3], |i| if i == 1 { f64::NAN } else { 0.0 })];
        assert!(matches!(adam_step(&mut q, &bad, &mut st2, 0.1, &cfg), Err(LrcError::NonFinite(_))));
        assert_eq!(st2.t, 0);
    }

    #[test]
    fn clipping_scales_to_the_norm() {
        let g = vec![Tensor::<f64>::from_fn(&[4], |_| 3.0)];
        assert_eq!(global_norm(&g), 6.0);
        // After clipping to 1, moments see g/6.
        let mut p = vec![Tensor::<f64>::zeros(&[4])];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.0, &AdamConfig::default()).unwrap();
        assert!((st.m[0].data()[0] - 0.1 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_params_and_teacher_is_frozen() {
        let (tcfg, teacher) = small_teacher();
        let before = weights_hash(&teacher);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_cfg()
        };
        let mut d = Distiller::new(cfg, tcfg, Arc::clone(&teacher)).unwrap();
        let p0: Vec<_> = d.proj.params().to_vec();
        let corpus = gen_synthetic_corpus(SyntheticKind::Markov, 4000, 256, 1).unwrap();
        let mut s = BatchStream::new(&corpus, 8, 2, 0).unwrap();
        let rec = d.train_step(&s.next().unwrap()).unwrap();
        assert!(rec.accepted && rec.report.is_finite());
        assert!(d.proj.params().iter().zip(&p0).all(|(a, b)| a.bit_eq(b)));
        assert_eq!(weights_hash(&teacher), before);
        assert_eq!(d.step, 1);
        assert_eq!(d.tokens_seen, 16);
    }

    #[test]
    fn microbatches_match_the_full_batch() {
        let (tcfg, teacher) = small_teacher();
        let cfg = TrainConfig {
            batch_tokens: 32,
            ..small_cfg()
        };
        let full = Distiller::new(cfg.clone(), tcfg.clone(), Arc::clone(&teacher)).unwrap();
        let micro = Distiller::new(
            TrainConfig {
                micro_batch_seqs: 2,
                ..cfg
            },
            tcfg,
            teacher,
        )
        .unwrap();
        let corpus = gen_synthetic_corpus(SyntheticKind::Markov, 4000, 256, 1).unwrap();
        let b = BatchStream::new(&corpus, 8, 4, 0).unwrap().next().unwrap();
        let (r1, g1) = full.gradients(&b).unwrap();
        let (r2, g2) = micro.gradients(&b).unwrap();
        assert!((r1.total - r2.total).abs() < 1e-5 * r1.total.abs());
        for (a, c) in g1.iter().zip(&g2) {
            assert!(a.max_abs_diff(c) <= 1e-5 * a.max_abs().max(1e-3));
        }
    }

    #[test]
    fn nonfinite_teacher_counts_a_spike() {
        let (tcfg, teacher) = small_teacher();
        let mut broken = (*teacher).clone();
        let mut f = (*broken.final_norm).clone();
        f.data_mut()[0] = f32::INFINITY;
        broken.final_norm = Arc::new(f);
        let mut d = Distiller::new(small_cfg(), tcfg, Arc::new(broken)).unwrap();
        let p0: Vec<_> = d.proj.params().to_vec();
        let corpus = gen_synthetic_corpus(SyntheticKind::Markov, 4000, 256, 1).unwrap();
        let rec = d.train_step(&BatchStream::new(&corpus, 8, 2, 0).unwrap().next().unwrap()).unwrap();
        assert!(!rec.accepted);
        assert_eq!(d.spikes, 1);
        assert!(d.proj.params().iter().zip(&p0).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn runs_are_deterministic_and_csv_has_one_row_per_step() {
        let (tcfg, teacher) = small_teacher();
        let corpus = gen_synthetic_corpus(SyntheticKind::Markov, 4000, 256, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let out = dir.path().join(sub);
            run_training(
                &corpus,
                &tcfg,
                Arc::clone(&teacher),
                &small_cfg(),
                &RunOptions {
                    out_dir: Some(out.clone()),
                    ..Default::default()
                },
            )
            .unwrap();
            std::fs::read_to_string(out.join("metrics.csv")).unwrap()
        };
        let a = run("a");
        assert_eq!(a, run("b"));
        assert_eq!(a.lines().count(), 21);
        assert_eq!(a.lines().next().unwrap(), METRICS_HEADER);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let (tcfg, teacher) = small_teacher();
        let corpus = gen_synthetic_corpus(SyntheticKind::Markov, 4000, 256, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 7,
            ..small_cfg()
        };
        let full = dir.path().join("full");
        run_training(&corpus, &tcfg, Arc::clone(&teacher), &cfg, &RunOptions {
            out_dir: Some(full.clone()),
            ..Default::default()
        })
        .unwrap();
        let part = dir.path().join("part");
        run_training(&corpus, &tcfg, Arc::clone(&teacher), &cfg, &RunOptions {
            out_dir: Some(part.clone()),
            stop_after: Some(9),
            ..Default::default()
        })
        .unwrap();
        run_training(&corpus, &tcfg, Arc::clone(&teacher), &cfg, &RunOptions {
            out_dir: Some(part.clone()),
            resume: Some(checkpoint_path(&part, 7)),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(
            std::fs::read(full.join("metrics.csv")).unwrap(),
            std::fs::read(part.join("metrics.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(full.join("projection.lrck")).unwrap(),
            std::fs::read(part.join("projection.lrck")).unwrap()
        );
    }

    #[test]
    fn lm_trainer_lowers_loss() {
        let mut model = ModelConfig::preset("tiny-debug").unwrap();
        model.num_layers = 1;
        let corpus = gen_synthetic_corpus(SyntheticKind::Markov, 20_000, 256, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            total_steps: 60,
            ..small_cfg()
        };
        let w = WeightSet::<f32>::random(&model, 1).unwrap();
        let mut t = LmTrainer::new(model, &w, &cfg).unwrap();
        let mut s = BatchStream::new(&corpus, 8, 2, 0).unwrap();
        let first = t.train_step(&s.next().unwrap()).unwrap().report.lm;
        let mut last = 0.0;
        for _ in 1..60 {
            last = t.train_step(&s.next().unwrap()).unwrap().report.lm;
        }
        assert!(last < first - 0.5, "{first} → {last}");
    }
}
