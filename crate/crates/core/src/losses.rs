//! Distillation objective: activation clone loss, KL on tempered logits,
//! next-token cross-entropy and their weighted total.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{LrcError, Result};
use crate::model::{ActivationBundle, CloneTerm, TokenBatch};
use crate::projection::{ProjectionSet, ProjectionVars};
use crate::tensor::{log_softmax_rows, Real, Tensor};

/// Which clone terms, layers and modules take part in the clone loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloneMask {
    /// Indexed like [`CloneTerm::ALL`].
    pub terms: [bool; 7],
    pub layers: Vec<bool>,
    pub attn_all: bool,
    pub ffn_all: bool,
}

impl CloneMask {
    pub fn all(num_layers: usize) -> Self {
        CloneMask {
            terms: [true; 7],
            layers: vec![true; num_layers],
            attn_all: true,
            ffn_all: true,
        }
    }

    pub fn none(num_layers: usize) -> Self {
        CloneMask {
            terms: [false; 7],
            ..Self::all(num_layers)
        }
    }

    /// Drops the gate, up and FFN-output terms.
    pub fn without_ffn(num_layers: usize) -> Self {
        CloneMask {
            ffn_all: false,
            ..Self::all(num_layers)
        }
    }

    pub fn term(&self, t: CloneTerm) -> bool {
        self.terms[t as usize]
    }

    pub fn enabled(&self, layer: usize, t: CloneTerm) -> bool {
        let module = if t.is_ffn() { self.ffn_all } else { self.attn_all };
        module && self.term(t) && self.layers.get(layer).copied().unwrap_or(false)
    }

    pub fn any(&self) -> bool {
        (0..self.layers.len()).any(|i| CloneTerm::ALL.iter().any(|&t| self.enabled(i, t)))
    }

    /// Parses a comma list of disabled terms (`q,k,v,o_attn,gate,up,o_ffn`),
    /// modules (`attn`, `ffn`), `none` or `all`. Everything not listed stays on.
    pub fn parse_disabled(spec: &str, num_layers: usize) -> Result<Self> {
        let mut mask = Self::all(num_layers);
        for tok in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match tok {
                "none" => {}
                "all" => mask.terms = [false; 7],
                "attn" => mask.attn_all = false,
                "ffn" => mask.ffn_all = false,
                other => mask.terms[CloneTerm::parse(other)? as usize] = false,
            }
        }
        Ok(mask)
    }

    /// Restricts to the layers set in `bits` (bit i = layer i).
    pub fn with_layer_bits(mut self, bits: u64) -> Result<Self> {
        let l = self.layers.len();
        if l < 64 && bits >> l != 0 {
            return Err(LrcError::Config(format!("clone layer mask {bits:#x} names layers beyond {l}")));
        }
        for (i, on) in self.layers.iter_mut().enumerate() {
            *on = i < 64 && bits >> i & 1 == 1;
        }
        Ok(self)
    }
}

/// Parses `all`, a decimal integer, or a `0x`/`0b` prefixed bit mask.
pub fn parse_layer_bits(s: &str) -> Result<Option<u64>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    let parsed = if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(h, 16)
    } else if let Some(b) = s.strip_prefix("0b").or_else(|| s.strip_prefix("0B")) {
        u64::from_str_radix(b, 2)
    } else {
        s.parse()
    };
    parsed
        .map(Some)
        .map_err(|_| LrcError::Config(format!("bad layer mask {s:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub alpha: f64,
    pub temperature: f64,
    /// Multiply KL by τ².
    pub tau_squared: bool,
    /// Element sum instead of element mean inside each clone term.
    pub mse_sum: bool,
    /// Detach the projected clone targets.
    pub stop_grad_targets: bool,
    /// Drop LM targets that follow this separator token.
    #[serde(default)]
    pub boundary_separator: Option<u32>,
    pub mask: CloneMask,
}

impl LossOptions {
    pub fn new(num_layers: usize) -> Self {
        LossOptions {
            alpha: 0.5,
            temperature: 40.0,
            tau_squared: true,
            mse_sum: false,
            stop_grad_targets: false,
            boundary_separator: None,
            mask: CloneMask::all(num_layers),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(LrcError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.alpha >= 0.0) {
            return Err(LrcError::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub clone: f64,
    pub kl: f64,
    pub lm: f64,
    pub total: f64,
    /// Clone loss per term name, summed over layers.
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.clone.is_finite() && self.kl.is_finite() && self.lm.is_finite()
    }
}

/// `kl + lm + α·clone`, summed in that order.
pub fn total_loss(clone: f64, kl: f64, lm: f64, alpha: f64, terms: BTreeMap<String, f64>) -> LossReport {
    LossReport {
        clone,
        kl,
        lm,
        total: kl + lm + alpha * clone,
        terms,
    }
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LrcError::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over all elements of `(a − b)²`.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(mse_sum(a, b)? / a.numel().max(1) as f64)
}

pub fn mse_sum<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum())
}

/// Graph handles of one objective evaluation.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub clone: Var,
    pub kl: Var,
    pub lm: Var,
    pub total: Var,
    pub terms: Vec<(usize, CloneTerm, Var)>,
}

impl LossVars {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).item().as_f64();
        let mut terms: BTreeMap<String, f64> = CloneTerm::ALL.iter().map(|t| (t.name().to_string(), 0.0)).collect();
        for &(_, t, x) in &self.terms {
            *terms.get_mut(t.name()).expect("known term") += v(x);
        }
        LossReport {
            clone: v(self.clone),
            kl: v(self.kl),
            lm: v(self.lm),
            total: v(self.total),
            terms,
        }
    }
}

fn check_bundles<X, Y>(student: &ActivationBundle<X>, teacher: &ActivationBundle<Y>) -> Result<()> {
    if student.layers.len() != teacher.layers.len() || student.batch != teacher.batch || student.seq != teacher.seq {
        return Err(LrcError::Contract(format!(
            "student bundle ({} layers, {}×{}) does not match teacher bundle ({} layers, {}×{})",
            student.layers.len(),
            student.batch,
            student.seq,
            teacher.layers.len(),
            teacher.batch,
            teacher.seq
        )));
    }
    Ok(())
}

/// Records the clone loss on `g`. Teacher activations enter as constants;
/// the output-module targets are multiplied by the trainable maps in `proj`
/// so gradients reach them unless `stop_grad_targets` is set.
pub fn clone_loss_graph<T: Real>(
    g: &mut Graph<T>,
    student: &ActivationBundle<Var>,
    teacher: &ActivationBundle<Arc<Tensor<T>>>,
    proj: &ProjectionVars,
    opts: &LossOptions,
) -> Result<(Var, Vec<(usize, CloneTerm, Var)>)> {
    check_bundles(student, teacher)?;
    let mut terms = Vec::new();
    for (i, (sl, tl)) in student.layers.iter().zip(&teacher.layers).enumerate() {
        for t in CloneTerm::ALL {
            if !opts.mask.enabled(i, t) {
                continue;
            }
            let s = *sl.get(t);
            let mut target = g.constant(Arc::clone(tl.get(t)));
            let map = match t {
                CloneTerm::AttnOut => Some(proj.attn_target_map(i)),
                CloneTerm::FfnOut => Some(proj.ffn_target_map(i)),
                _ => None,
            };
            if let Some(map) = map {
                let map = if opts.stop_grad_targets { g.detach(map) } else { map };
                target = g.matmul(target, map)?;
            }
            let scale = if opts.mse_sum {
                T::one()
            } else {
                T::one() / T::lit(g.value(s).numel().max(1) as f64)
            };
            terms.push((i, t, g.mse_scaled(s, target, scale)?));
        }
    }
    let clone = if terms.is_empty() {
        g.constant_owned(Tensor::scalar(T::zero()))
    } else {
        let weighted: Vec<(Var, T)> = terms.iter().map(|&(_, _, v)| (v, T::one())).collect();
        g.weighted_sum(&weighted)?
    };
    Ok((clone, terms))
}

/// Tempered teacher log-distribution, row-wise, computed exactly like the
/// student side so equal logits give zero divergence.
pub fn teacher_log_probs<T: Real>(teacher_logits: &Tensor<T>, tau: f64) -> Tensor<T> {
    let tau = T::lit(tau);
    log_softmax_rows(&teacher_logits.map(|x| x / tau))
}

fn kl_coef(rows: usize, tau: f64, tau_squared: bool) -> f64 {
    let scale = if tau_squared { tau * tau } else { 1.0 };
    scale / rows.max(1) as f64
}

pub fn kl_loss_graph<T: Real>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    tau: f64,
    tau_squared: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(LrcError::Config(format!("temperature must be positive, got {tau}")));
    }
    let log_probs = teacher_log_probs(teacher_logits, tau);
    let coef = kl_coef(log_probs.rows(), tau, tau_squared);
    g.kl_div(student_logits, &log_probs, T::lit(tau), T::lit(coef))
}

/// `τ²·mean_positions KL(softmax(teacher/τ) ‖ softmax(student/τ))`; the τ²
/// factor is dropped when `tau_squared` is false.
pub fn kl_loss<T: Real>(teacher_logits: &Tensor<T>, student_logits: &Tensor<T>, tau: f64, tau_squared: bool) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant_owned(student_logits.clone());
    let kl = kl_loss_graph(&mut g, s, teacher_logits, tau, tau_squared)?;
    Ok(g.value(kl).item().as_f64())
}

/// Next-token targets: row `b·seq + t` predicts token `t+1` of sequence `b`.
/// Rows whose input is `separator` get no target when one is given.
pub fn next_token_targets(batch: &TokenBatch, separator: Option<u32>) -> Vec<Option<usize>> {
    (0..batch.batch * batch.seq)
        .map(|r| {
            let crosses = separator == Some(batch.tokens[r]);
            (r % batch.seq + 1 < batch.seq && !crosses).then(|| batch.tokens[r + 1] as usize)
        })
        .collect()
}

pub fn lm_loss_graph<T: Real>(g: &mut Graph<T>, logits: Var, batch: &TokenBatch, separator: Option<u32>) -> Result<Var> {
    g.cross_entropy(logits, &next_token_targets(batch, separator))
}

/// Mean shifted next-token cross-entropy.
pub fn lm_loss<T: Real>(logits: &Tensor<T>, batch: &TokenBatch) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant_owned(logits.clone());
    let v = lm_loss_graph(&mut g, l, batch, None)?;
    Ok(g.value(v).item().as_f64())
}

/// Records the full objective `kl + lm + α·clone` on `g`.
pub fn objective_graph<T: Real>(
    g: &mut Graph<T>,
    student: &ActivationBundle<Var>,
    teacher: &ActivationBundle<Arc<Tensor<T>>>,
    proj: &ProjectionVars,
    batch: &TokenBatch,
    opts: &LossOptions,
) -> Result<LossVars> {
    opts.validate()?;
    let (clone, terms) = clone_loss_graph(g, student, teacher, proj, opts)?;
    let kl = kl_loss_graph(g, student.logits, &teacher.logits, opts.temperature, opts.tau_squared)?;
    let lm = lm_loss_graph(g, student.logits, batch, opts.boundary_separator)?;
    let total = g.weighted_sum(&[(kl, T::one()), (lm, T::one()), (clone, T::lit(opts.alpha))])?;
    Ok(LossVars {
        clone,
        kl,
        lm,
        total,
        terms,
    })
}

/// Value-level clone loss with its per-term breakdown.
pub fn clone_loss<T: Real>(
    student: &ActivationBundle<Arc<Tensor<T>>>,
    teacher: &ActivationBundle<Arc<Tensor<T>>>,
    proj: &ProjectionSet<T>,
    opts: &LossOptions,
) -> Result<(f64, BTreeMap<String, f64>)> {
    check_bundles(student, teacher)?;
    let mut g = Graph::new();
    let pv = proj.to_vars(&mut g);
    let sb = ActivationBundle {
        batch: student.batch,
        seq: student.seq,
        layers: student
            .layers
            .iter()
            .map(|l| crate::model::LayerActivations {
                q: g.constant(Arc::clone(&l.q)),
                k: g.constant(Arc::clone(&l.k)),
                v: g.constant(Arc::clone(&l.v)),
                gate: g.constant(Arc::clone(&l.gate)),
                up: g.constant(Arc::clone(&l.up)),
                attn_out: g.constant(Arc::clone(&l.attn_out)),
                ffn_out: g.constant(Arc::clone(&l.ffn_out)),
            })
            .collect(),
        logits: g.constant(Arc::clone(&student.logits)),
    };
    let (clone, terms) = clone_loss_graph(&mut g, &sb, teacher, &pv, opts)?;
    let vars = LossVars {
        clone,
        kl: clone,
        lm: clone,
        total: clone,
        terms,
    };
    let report = vars.report(&g);
    Ok((report.clone, report.terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_graph, model_forward, LayerActivations, ModelConfig, WeightSet};
    use crate::projection::{project_on_graph, ProjectionOptions};
    use crate::tensor::matmul_nn;
    use crate::tensor::softmax_rows;
    use proptest::prelude::*;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn mse_cases() {
        let x = t(&[2], &[1.5, -2.0]);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mse(&t(&[2], &[0.0, 0.0]), &t(&[2], &[2.0, 2.0])).unwrap(), 4.0);
        let y = t(&[2], &[0.25, 3.0]);
        assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
        assert!(mse(&x, &t(&[1, 2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn kl_two_logit_oracle() {
        let teacher = t(&[1, 2], &[0.0, 3f64.ln()]);
        let student = t(&[1, 2], &[0.0, 0.0]);
        let oracle = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((oracle - 0.130812).abs() < 1e-6);
        let kl = kl_loss(&teacher, &student, 1.0, true).unwrap();
        assert!((kl - oracle).abs() < 1e-12, "{kl}");
        assert_eq!(kl_loss(&teacher, &teacher, 40.0, true).unwrap(), 0.0);
        assert!(matches!(kl_loss(&teacher, &student, 0.0, true), Err(LrcError::Config(_))));
        assert!(matches!(kl_loss(&teacher, &student, -1.0, true), Err(LrcError::Config(_))));
    }

    #[test]
    fn kl_temperature_scaling() {
        let teacher = t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 1.0]);
        let student = t(&[2, 3], &[0.0, 1.0, 2.0, -1.0, 3.0, 0.0]);
        let tau = 2.0;
        let plain = kl_loss(&teacher, &student, tau, false).unwrap();
        let scaled = kl_loss(&teacher, &student, tau, true).unwrap();
        assert!((scaled - tau * tau * plain).abs() < 1e-12);
        // independent per-row oracle, averaged over rows
        let mut sum = 0.0;
        for r in 0..2 {
            let p = softmax_rows(&t(&[1, 3], &teacher.data()[3 * r..3 * r + 3]).map(|x| x / tau));
            let q = softmax_rows(&t(&[1, 3], &student.data()[3 * r..3 * r + 3]).map(|x| x / tau));
            sum += (0..3).map(|j| p.data()[j] * (p.data()[j] / q.data()[j]).ln()).sum::<f64>();
        }
        assert!((plain - sum / 2.0).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_cases() {
        let batch = TokenBatch::new(1, 4, vec![3, 7, 1, 9]).unwrap();
        let uniform = Tensor::<f64>::zeros(&[4, 256]);
        assert!((lm_loss(&uniform, &batch).unwrap() - 256f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::<f64>::zeros(&[4, 256]);
        for (r, &next) in [7usize, 1, 9].iter().enumerate() {
            sharp.data_mut()[r * 256 + next] = 50.0;
        }
        assert!(lm_loss(&sharp, &batch).unwrap() < 1e-8);

        // direct −log softmax summation
        let batch = TokenBatch::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let logits = t(&[4, 3], &[0.1, 0.7, -0.2, 1.0, 0.0, 0.0, 0.3, -1.0, 2.0, 0.0, 0.0, 0.0]);
        let nll = |row: usize, target: usize| {
            let r = &logits.data()[3 * row..3 * row + 3];
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            -(r[target].exp() / z).ln()
        };
        let oracle = (nll(0, 1) + nll(2, 0)) / 2.0;
        assert!((lm_loss(&logits, &batch).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn boundary_targets_can_be_masked() {
        let batch = TokenBatch::new(1, 4, vec![3, 255, 9, 4]).unwrap();
        assert_eq!(next_token_targets(&batch, None), vec![Some(255), Some(9), Some(4), None]);
        assert_eq!(next_token_targets(&batch, Some(255)), vec![Some(255), None, Some(4), None]);
    }

    #[test]
    fn total_arithmetic() {
        let r = total_loss(3.0, 1.0, 2.0, 0.5, BTreeMap::new());
        assert_eq!(r.total, 4.5);
        let r = total_loss(3.0, 1.0, 2.0, 0.0, BTreeMap::new());
        assert_eq!(r.total, r.kl + r.lm);
    }

    #[test]
    fn preset_alphas() {
        use crate::train::TrainConfig;
        assert_eq!(TrainConfig::preset("lrc-1.5b").unwrap().alpha, 0.2);
        assert_eq!(TrainConfig::preset("lrc-1.7b").unwrap().alpha, 0.5);
        assert_eq!(TrainConfig::preset("lrc-4b").unwrap().alpha, 0.5);
    }

    #[test]
    fn mask_parsing() {
        let m = CloneMask::parse_disabled("gate,o_ffn", 2).unwrap();
        assert_eq!(m.terms, [true, true, true, true, false, true, false]);
        assert!(!CloneMask::parse_disabled("ffn", 2).unwrap().enabled(0, CloneTerm::Up));
        assert!(!CloneMask::parse_disabled("all", 2).unwrap().any());
        assert_eq!(CloneMask::parse_disabled("", 2).unwrap(), CloneMask::all(2));
        assert!(CloneMask::parse_disabled("q,zz", 2).is_err());
        assert_eq!(parse_layer_bits("0b101").unwrap(), Some(5));
        assert_eq!(parse_layer_bits("0x3").unwrap(), Some(3));
        assert_eq!(parse_layer_bits("6").unwrap(), Some(6));
        assert_eq!(parse_layer_bits("all").unwrap(), None);
        let m = CloneMask::all(3).with_layer_bits(0b101).unwrap();
        assert_eq!(m.layers, vec![true, false, true]);
        assert!(CloneMask::all(3).with_layer_bits(0b1000).is_err());
        assert!(!CloneMask::none(3).any());
        assert!(!CloneMask::without_ffn(2).enabled(0, CloneTerm::Up));
        assert!(CloneMask::without_ffn(2).enabled(1, CloneTerm::V));
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn toy_bundle(cfg: &ModelConfig, rows: usize, hidden: usize, seed: u64) -> ActivationBundle<Arc<Tensor<f64>>> {
        let r = |shape: &[usize], k: u64| Arc::new(rand_tensor(shape, seed * 100 + k));
        ActivationBundle {
            batch: 1,
            seq: rows,
            layers: (0..cfg.num_layers as u64)
                .map(|i| LayerActivations {
                    q: r(&[rows, cfg.q_dim()], 10 * i),
                    k: r(&[rows, cfg.kv_dim()], 10 * i + 1),
                    v: r(&[rows, cfg.kv_dim()], 10 * i + 2),
                    gate: r(&[rows, cfg.ffn_size], 10 * i + 3),
                    up: r(&[rows, cfg.ffn_size], 10 * i + 4),
                    attn_out: r(&[rows, hidden], 10 * i + 5),
                    ffn_out: r(&[rows, hidden], 10 * i + 6),
                })
                .collect(),
            logits: r(&[rows, cfg.vocab_size], 99),
        }
    }

    #[test]
    fn clone_loss_matches_term_by_term_sum() {
        let mut cfg = ModelConfig::preset("tiny-debug").unwrap();
        cfg.num_layers = 1;
        let proj = ProjectionSet::<f64>::init(&cfg, 32, ProjectionOptions::default(), 2).unwrap();
        let teacher = toy_bundle(&cfg, 2, 64, 1);
        let student = toy_bundle(&cfg, 2, 32, 2);
        let opts = LossOptions::new(1);
        let (value, terms) = clone_loss(&student, &teacher, &proj, &opts).unwrap();

        let (s, te) = (&student.layers[0], &teacher.layers[0]);
        let slots = &proj.layout().layers[0];
        let wo = &proj.params()[slots.o];
        let wd = &proj.params()[slots.down];
        let project = |x: &Tensor<f64>, w: &Tensor<f64>| {
            Tensor::new(vec![2, 32], matmul_nn(x.data(), w.data(), 2, 64, 32)).unwrap()
        };
        let brute = mse(&s.q, &te.q).unwrap()
            + mse(&s.k, &te.k).unwrap()
            + mse(&s.v, &te.v).unwrap()
            + mse(&s.gate, &te.gate).unwrap()
            + mse(&s.up, &te.up).unwrap()
            + mse(&s.attn_out, &project(&te.attn_out, wo)).unwrap()
            + mse(&s.ffn_out, &project(&te.ffn_out, wd)).unwrap();
        assert!((value - brute).abs() < 1e-12 * brute.max(1.0), "{value} vs {brute}");
        assert!((terms.values().sum::<f64>() - value).abs() < 1e-12);

        let none = LossOptions {
            mask: CloneMask::none(1),
            ..opts.clone()
        };
        assert_eq!(clone_loss(&student, &teacher, &proj, &none).unwrap().0, 0.0);

        let mut deep = cfg.clone();
        deep.num_layers = 2;
        let other = toy_bundle(&deep, 2, 32, 3);
        assert!(matches!(
            clone_loss(&other, &teacher, &proj, &opts),
            Err(LrcError::Contract(_))
        ));
    }

    #[test]
    fn identity_student_has_zero_clone_and_kl() {
        let cfg = ModelConfig::preset("tiny-debug").unwrap();
        let teacher = WeightSet::<f64>::random(&cfg, 17).unwrap();
        let proj = ProjectionSet::identity(&cfg, &teacher, ProjectionOptions::default()).unwrap();
        let batch = TokenBatch::new(2, 6, (0..12).map(|i| i * 13 % 250).collect()).unwrap();
        let tb = model_forward(&batch, &teacher, &cfg).unwrap();
        let mut g = Graph::new();
        let tv = teacher.to_vars(&mut g, false);
        let pv = proj.to_vars(&mut g);
        let sv = project_on_graph(&mut g, &tv, true, &pv).unwrap();
        let sb = forward_graph(&mut g, &cfg, &sv, &batch).unwrap();
        let loss = objective_graph(&mut g, &sb, &tb, &pv, &batch, &LossOptions::new(cfg.num_layers)).unwrap();
        let r = loss.report(&g);
        assert!(r.clone < 1e-20, "{}", r.clone);
        assert!(r.kl.abs() < 1e-12, "{}", r.kl);
        assert!((r.total - (r.kl + r.lm + 0.5 * r.clone)).abs() <= f64::EPSILON * r.total);
    }

    fn objective_grads(alpha: f64, mask: CloneMask) -> Vec<Tensor<f64>> {
        let mut cfg = ModelConfig::preset("tiny-debug").unwrap();
        cfg.num_layers = 2;
        let teacher = WeightSet::<f64>::random(&cfg, 5).unwrap();
        let proj = ProjectionSet::<f64>::init(&cfg, 32, ProjectionOptions::default(), 6).unwrap();
        let batch = TokenBatch::new(1, 6, vec![1, 5, 9, 200, 3, 4]).unwrap();
        let tb = model_forward(&batch, &teacher, &cfg).unwrap();
        let mut g = Graph::new();
        let tv = teacher.to_vars(&mut g, false);
        let pv = proj.to_vars(&mut g);
        let sv = project_on_graph(&mut g, &tv, true, &pv).unwrap();
        let student_cfg = proj.student_config();
        let sb = forward_graph(&mut g, &student_cfg, &sv, &batch).unwrap();
        let opts = LossOptions {
            alpha,
            temperature: 2.0,
            mask,
            ..LossOptions::new(2)
        };
        let loss = objective_graph(&mut g, &sb, &tb, &pv, &batch, &opts).unwrap();
        g.backward(loss.total).unwrap();
        pv.params.iter().map(|&p| g.grad_or_zeros(p)).collect()
    }

    #[test]
    fn zero_alpha_matches_disabled_clone() {
        let a = objective_grads(0.0, CloneMask::all(2));
        let b = objective_grads(0.3, CloneMask::none(2));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) <= 1e-14);
        }
    }

    #[test]
    fn masked_term_contributes_no_gradient() {
        // With only the q term active in layer 1, every other clone path is
        // off: the difference from a clone-free run is confined to blocks that
        // feed layer-1 q.
        let mut only_q = CloneMask::none(2);
        only_q.terms[CloneTerm::Q as usize] = true;
        only_q.layers = vec![false, true];
        let base = objective_grads(1.0, CloneMask::none(2));
        let with_q = objective_grads(1.0, only_q);
        let mut cfg = ModelConfig::preset("tiny-debug").unwrap();
        cfg.num_layers = 2;
        let set = ProjectionSet::<f64>::init(&cfg, 32, ProjectionOptions::default(), 6).unwrap();
        for (slot, name) in set.names().iter().enumerate() {
            let changed = base[slot].max_abs_diff(&with_q[slot]) > 0.0;
            let downstream = name.starts_with("layers.1.") && !name.ends_with(".q") && !name.ends_with("attn_norm");
            if downstream {
                assert!(!changed, "{name} received clone gradient");
            }
        }
        assert!(base[set.layout().layers[1].q].max_abs_diff(&with_q[set.layout().layers[1].q]) > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ffn_associativity(seed in 0u64..1_000_000, rows in 1usize..5, mid in 1usize..24, dt in 2usize..20, ds in 1usize..20) {
            let up = rand_tensor(&[rows, mid], seed);
            let gate = rand_tensor(&[rows, mid], seed + 1);
            let wd = rand_tensor(&[mid, dt], seed + 2);
            let wp = rand_tensor(&[dt, ds], seed + 3);
            let act = crate::model::swiglu(&up, &gate).unwrap();
            let student = act.matmul(&wd.matmul(&wp).unwrap()).unwrap();
            let teacher = act.matmul(&wd).unwrap().matmul(&wp).unwrap();
            prop_assert!(mse(&student, &teacher).unwrap() <= 1e-10);
        }

        #[test]
        fn attention_associativity(seed in 0u64..1_000_000, seq in 1usize..6, ds in 1usize..24) {
            use crate::autograd::AttentionSpec;
            let spec = AttentionSpec { batch: 1, seq, n_q_heads: 4, n_kv_heads: 2, head_dim: 8, rope_base: Some(10000.0) };
            let q = rand_tensor(&[seq, 32], seed);
            let k = rand_tensor(&[seq, 16], seed + 1);
            let v = rand_tensor(&[seq, 16], seed + 2);
            let wo = rand_tensor(&[32, 40], seed + 3);
            let wp = rand_tensor(&[40, ds], seed + 4);
            let pos: Vec<usize> = (0..seq).collect();
            let a = crate::model::attention_forward(&q, &k, &v, &pos, spec).unwrap();
            let student = a.matmul(&wo.matmul(&wp).unwrap()).unwrap();
            let teacher = a.matmul(&wo).unwrap().matmul(&wp).unwrap();
            prop_assert!(mse(&student, &teacher).unwrap() <= 1e-10);
        }

        #[test]
        fn clone_and_kl_nonnegative(seed in 0u64..1_000_000) {
            let mut cfg = ModelConfig::preset("tiny-debug").unwrap();
            cfg.num_layers = 1;
            let proj = ProjectionSet::<f64>::init(&cfg, 32, ProjectionOptions::default(), seed).unwrap();
            let teacher = toy_bundle(&cfg, 3, 64, seed);
            let student = toy_bundle(&cfg, 3, 32, seed + 7);
            prop_assert!(clone_loss(&student, &teacher, &proj, &LossOptions::new(1)).unwrap().0 >= 0.0);
            let kl = kl_loss(&teacher.logits, &student.logits, 1.5, true).unwrap();
            prop_assert!(kl >= -1e-12);
        }
    }
}
