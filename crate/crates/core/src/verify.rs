//! Executable checks of the exactly checkable properties of the method. Backs
//! the `verify` subcommand.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{grad_check, AttentionSpec, GradCheckOptions, Graph};
use crate::error::{LrcError, Result};
use crate::losses::{mse, objective_graph, CloneMask, LossOptions};
use crate::model::{forward_graph, model_forward, swiglu, attention_forward, CloneTerm, ModelConfig, TokenBatch, WeightSet};
use crate::projection::{count_trainable_params, project_on_graph, ProjectionOptions, ProjectionSet, SharingMode, Sharing};
use crate::tensor::{Real, Tensor};
use crate::train::distill_gradients;

pub const SUITES: &[&str] = &["all", "lemma1", "identity", "params", "gradients"];

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: &'static str,
    pub value: f64,
    pub tol: f64,
    pub ms: u64,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    /// Records `value ≤ tol` as a pass.
    pub fn record(&mut self, name: impl Into<String>, value: f64, tol: f64, started: Instant, detail: impl Into<String>) {
        self.record_status(name, value <= tol, value, tol, started, detail);
    }

    pub fn record_status(
        &mut self,
        name: impl Into<String>,
        ok: bool,
        value: f64,
        tol: f64,
        started: Instant,
        detail: impl Into<String>,
    ) {
        self.checks.push(CheckResult {
            name: name.into(),
            status: if ok { "pass" } else { "fail" },
            value,
            tol,
            ms: started.elapsed().as_millis() as u64,
            detail: detail.into(),
        });
    }

    pub fn extend(&mut self, other: VerifyReport) {
        self.checks.extend(other.checks);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn human(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = write!(s, "[{}] {:<40} value={:<12.6e} tol={:<10.3e} {:>6} ms", c.status.to_uppercase(), c.name, c.value, c.tol, c.ms);
            if !c.detail.is_empty() {
                let _ = write!(s, "  {}", c.detail);
            }
            s.push('\n');
        }
        let failed = self.checks.iter().filter(|c| !c.passed()).count();
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), failed);
        s
    }

    pub fn jsonl(&self) -> String {
        self.checks
            .iter()
            .map(|c| serde_json::to_string(c).expect("check serializes") + "\n")
            .collect()
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

fn associativity_trial<T: Real>(rng: &mut ChaCha8Rng, zero: bool) -> Result<(f64, f64)> {
    let rows = rng.random_range(1..=16);
    let mid = rng.random_range(1..=64);
    let dt = rng.random_range(2..=64);
    let ds = rng.random_range(1..=dt);
    let scale = if zero { T::zero() } else { T::one() };
    let up = uniform::<T>(rng, &[rows, mid]).map(|x| x * scale);
    let gate = uniform::<T>(rng, &[rows, mid]).map(|x| x * scale);
    let wd = uniform::<T>(rng, &[mid, dt]);
    let wp = uniform::<T>(rng, &[dt, ds]);
    let act = swiglu(&up, &gate)?;
    let ffn = mse(&act.matmul(&wd.matmul(&wp)?)?, &act.matmul(&wd)?.matmul(&wp)?)?;

    let heads = [(1, 1), (2, 1), (4, 2), (4, 4)][rng.random_range(0..4)];
    let head_dim = 2 * rng.random_range(1..=8);
    let seq = rng.random_range(1..=8);
    let spec = AttentionSpec {
        batch: 1,
        seq,
        n_q_heads: heads.0,
        n_kv_heads: heads.1,
        head_dim,
        rope_base: Some(10_000.0),
    };
    // identical q/k/v on both sides, so only the output projection differs
    let q = uniform::<T>(rng, &[seq, heads.0 * head_dim]).map(|x| x * scale);
    let k = uniform::<T>(rng, &[seq, heads.1 * head_dim]).map(|x| x * scale);
    let v = uniform::<T>(rng, &[seq, heads.1 * head_dim]).map(|x| x * scale);
    let wo = uniform::<T>(rng, &[heads.0 * head_dim, dt]);
    let pos: Vec<usize> = (0..seq).collect();
    let a = attention_forward(&q, &k, &v, &pos, spec)?;
    let attn = mse(&a.matmul(&wo.matmul(&wp)?)?, &a.matmul(&wo)?.matmul(&wp)?)?;
    Ok((ffn, attn))
}

/// FFN output cloning through the projected down matrix equals projecting
/// the teacher output, and likewise for attention given equal q/k/v.
pub fn check_lemma1(seed: u64, trials: usize) -> Result<VerifyReport> {
    if trials == 0 {
        return Err(LrcError::Config("lemma1 needs at least one trial".into()));
    }
    let mut report = VerifyReport::default();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ffn, mut attn) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (f, a) = associativity_trial::<f64>(&mut rng, false)?;
        ffn = ffn.max(f);
        attn = attn.max(a);
    }
    report.record("lemma1.ffn", ffn, 1e-10, started, format!("max MSE over {trials} f64 trials"));
    report.record("lemma1.attn", attn, 1e-10, started, format!("max MSE over {trials} f64 trials"));

    let started = Instant::now();
    let (f0, a0) = associativity_trial::<f64>(&mut rng, true)?;
    report.record("lemma1.zero", f0.max(a0), 0.0, started, "zero activations");

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf32);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (f, a) = associativity_trial::<f32>(&mut rng, false)?;
        worst = worst.max(f).max(a);
    }
    report.record("lemma1.f32", worst, 1e-4, started, format!("max MSE over {trials} f32 trials"));
    Ok(report)
}

fn random_batch(vocab: usize, batch: usize, seq: usize, seed: u64) -> Result<TokenBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..batch * seq).map(|_| rng.random_range(0..vocab as u32)).collect();
    TokenBatch::new(batch, seq, tokens)
}

struct IdentityOutcome {
    max_logit_diff: f64,
    clone: f64,
    kl: f64,
    perturbed_clone: f64,
    perturbed_kl: f64,
}

fn identity_run<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<IdentityOutcome> {
    let teacher = WeightSet::<T>::random(cfg, seed)?;
    let batch = random_batch(cfg.vocab_size, 2, 12, seed)?;
    let teacher_acts = model_forward(&batch, &teacher, cfg)?;
    let mut proj = ProjectionSet::identity(cfg, &teacher, ProjectionOptions::default())?;
    let eval = |proj: &ProjectionSet<T>| -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let tv = teacher.to_vars(&mut g, false);
        let pv = proj.to_vars(&mut g);
        let student_cfg = proj.student_config();
        let sv = project_on_graph(&mut g, &tv, student_cfg.tie_embeddings, &pv)?;
        let sb = forward_graph(&mut g, &student_cfg, &sv, &batch)?;
        let diff = g.value(sb.logits).max_abs_diff(&teacher_acts.logits);
        let vars = objective_graph(&mut g, &sb, &teacher_acts, &pv, &batch, &LossOptions::new(cfg.num_layers))?;
        let r = vars.report(&g);
        Ok((diff, r.clone, r.kl))
    };
    let (max_logit_diff, clone, kl) = eval(&proj)?;
    let slot = proj.layout().layers[0].q;
    let x = &mut proj.params_mut()[slot].data_mut()[1];
    *x += T::lit(1e-3);
    let (_, perturbed_clone, perturbed_kl) = eval(&proj)?;
    Ok(IdentityOutcome {
        max_logit_diff,
        clone,
        kl,
        perturbed_clone,
        perturbed_kl,
    })
}

/// With `d_student = d_teacher`, identity projections and copied gains the
/// student is the teacher.
pub fn check_identity_equivalence(preset: &str, seed: u64) -> Result<VerifyReport> {
    let cfg = ModelConfig::preset(preset)?;
    let mut report = VerifyReport::default();
    let started = Instant::now();
    let r = identity_run::<f64>(&cfg, seed)?;
    report.record("identity.logits.f64", r.max_logit_diff, 1e-10, started, preset);
    report.record_status("identity.clone", r.clone == 0.0, r.clone, 0.0, started, "must be exactly 0");
    report.record_status("identity.kl", r.kl == 0.0, r.kl, 0.0, started, "must be exactly 0");
    report.record_status(
        "identity.perturbed",
        r.perturbed_clone > 0.0 && r.perturbed_kl > 0.0,
        r.perturbed_clone.min(r.perturbed_kl),
        0.0,
        started,
        "one projection entry +1e-3 must make clone and KL positive",
    );
    let started = Instant::now();
    let r = identity_run::<f32>(&cfg, seed)?;
    report.record("identity.logits.f32", r.max_logit_diff, 1e-5, started, preset);
    Ok(report)
}

/// Published trainable-parameter counts (billions) for the LRC-1.5B
/// geometry, keyed by (attention, FFN) sharing.
pub const PUBLISHED_COUNTS: [(SharingMode, f64); 4] = [
    (SharingMode { attn: Sharing::All, ffn: Sharing::All }, 0.93),
    (SharingMode { attn: Sharing::Io, ffn: Sharing::All }, 0.67),
    (SharingMode { attn: Sharing::All, ffn: Sharing::Io }, 0.80),
    (SharingMode { attn: Sharing::Io, ffn: Sharing::Io }, 0.53),
];

/// Trainable count of the two-layer toy: seven projections per layer, one
/// embedding projection, two gains per layer and the final gain.
pub fn toy_hand_count(layers: u64, dt: u64, ds: u64) -> u64 {
    7 * layers * dt * ds + dt * ds + (2 * layers + 1) * ds
}

pub fn check_param_counts() -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let teacher = ModelConfig::preset("llama3.2-3b")?;
    let mut counts = Vec::new();
    for (mode, published) in PUBLISHED_COUNTS {
        let started = Instant::now();
        let n = count_trainable_params(&teacher, 1536, mode, teacher.tie_embeddings);
        let rel = (n as f64 / 1e9 - published).abs() / published;
        report.record(
            format!("params.lrc-1.5b.{mode}"),
            rel,
            0.02,
            started,
            format!("{n} = {:.3}B vs {published}B", n as f64 / 1e9),
        );
        counts.push(n);
    }
    let started = Instant::now();
    let monotone = counts[0] >= counts[1] && counts[1] >= counts[3] && counts[0] >= counts[2] && counts[2] >= counts[3];
    report.record_status("params.monotone", monotone, 0.0, 0.0, started, format!("{counts:?}"));

    let started = Instant::now();
    let mut toy = ModelConfig::preset("tiny-debug")?;
    toy.num_layers = 2;
    let n = count_trainable_params(&toy, 32, SharingMode::ALL_ALL, true);
    let hand = toy_hand_count(2, 64, 32);
    report.record_status(
        "params.tiny-debug.2-layer",
        n == hand,
        n as f64,
        hand as f64,
        started,
        "exact hand count",
    );
    let started = Instant::now();
    let full = ModelConfig::preset("tiny-debug")?;
    let n = count_trainable_params(&full, 32, SharingMode::ALL_ALL, true);
    let hand = toy_hand_count(full.num_layers as u64, 64, 32);
    report.record_status("params.tiny-debug", n == hand, n as f64, hand as f64, started, "exact hand count");
    Ok(report)
}

struct GradCase {
    name: &'static str,
    options: ProjectionOptions,
    mask: CloneMask,
}

fn toy_gradient_setup(preset: &str, seed: u64) -> Result<(ModelConfig, WeightSet<f64>, TokenBatch)> {
    let cfg = ModelConfig::preset(preset)?;
    let teacher = WeightSet::<f64>::random(&cfg, seed)?;
    let batch = random_batch(cfg.vocab_size, 2, 5, seed ^ 0xbeef)?;
    Ok((cfg, teacher, batch))
}

fn student_hidden_for(cfg: &ModelConfig) -> usize {
    (cfg.hidden_size / 2).max(1)
}

/// Central finite differences against autodiff on every trainable block of
/// the full objective, for several structural variants.
pub fn check_gradients(preset: &str, seed: u64) -> Result<VerifyReport> {
    let (cfg, teacher, batch) = toy_gradient_setup(preset, seed)?;
    let ds = student_hidden_for(&cfg);
    let l = cfg.num_layers;
    let mut no_gate = CloneMask::all(l);
    no_gate.terms[CloneTerm::Gate as usize] = false;
    let cases = [
        GradCase {
            name: "full",
            options: ProjectionOptions::default(),
            mask: CloneMask::all(l),
        },
        GradCase {
            name: "no-alignment-free",
            options: ProjectionOptions {
                alignment_free: false,
                ..Default::default()
            },
            mask: CloneMask::all(l),
        },
        GradCase {
            name: "io-sharing",
            options: ProjectionOptions {
                sharing: SharingMode::IO_IO,
                ..Default::default()
            },
            mask: CloneMask::all(l),
        },
        GradCase {
            name: "mask-gate",
            options: ProjectionOptions::default(),
            mask: no_gate.clone(),
        },
    ];
    let mut report = VerifyReport::default();
    let teacher_acts = model_forward(&batch, &teacher, &cfg)?;
    for case in cases {
        let started = Instant::now();
        let proj = ProjectionSet::<f64>::init(&cfg, ds, case.options, seed.wrapping_add(1))?;
        let loss = LossOptions {
            mask: case.mask.clone(),
            ..LossOptions::new(l)
        };
        let names = proj.names().to_vec();
        let mut f = |theta: &[Tensor<f64>], want: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
            let mut p = proj.clone();
            for (dst, src) in p.params_mut().iter_mut().zip(theta) {
                *dst = src.clone();
            }
            let mut g = Graph::new();
            let tv = teacher.to_vars(&mut g, false);
            let pv = p.to_vars(&mut g);
            let scfg = p.student_config();
            let sv = project_on_graph(&mut g, &tv, scfg.tie_embeddings, &pv)?;
            let sb = forward_graph(&mut g, &scfg, &sv, &batch)?;
            let vars = objective_graph(&mut g, &sb, &teacher_acts, &pv, &batch, &loss)?;
            let value = g.value(vars.total).item();
            if !want {
                return Ok((value, None));
            }
            g.backward(vars.total)?;
            Ok((value, Some(pv.params.iter().map(|&v| g.grad_or_zeros(v)).collect())))
        };
        let opts = GradCheckOptions {
            samples_per_block: Some(6),
            seed,
            ..Default::default()
        };
        let gc = grad_check(&mut f, proj.params(), &names, &opts)?;
        let worst = gc
            .blocks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .map(|b| b.name.clone())
            .unwrap_or_default();
        report.record(
            format!("gradients.{}", case.name),
            gc.max_rel_error(),
            gc.tolerance,
            started,
            format!("{} blocks, worst {worst}", gc.blocks.len()),
        );
    }

    // A masked term's gradient contribution is exactly what the mask removes:
    // G(all) − G(all∖gate) = G(gate only) − G(none).
    let started = Instant::now();
    let proj = ProjectionSet::<f64>::init(&cfg, ds, ProjectionOptions::default(), seed.wrapping_add(1))?;
    let grads = |mask: CloneMask| -> Result<Vec<Tensor<f64>>> {
        let loss = LossOptions {
            alpha: 1.0,
            mask,
            ..LossOptions::new(l)
        };
        Ok(distill_gradients(&cfg, &teacher, &proj, &loss, &batch)?.1)
    };
    let mut gate_only = CloneMask::none(l);
    gate_only.terms[CloneTerm::Gate as usize] = true;
    let (all, rest, only, none) = (
        grads(CloneMask::all(l))?,
        grads(no_gate)?,
        grads(gate_only)?,
        grads(CloneMask::none(l))?,
    );
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..all.len() {
        for j in 0..all[i].numel() {
            let lhs = all[i].data()[j] - rest[i].data()[j];
            let rhs = only[i].data()[j] - none[i].data()[j];
            worst = worst.max((lhs - rhs).abs());
            scale = scale.max(rhs.abs());
        }
    }
    report.record(
        "gradients.masked-term-zero",
        worst / scale.max(1e-300),
        1e-6,
        started,
        "relative to the gate term's own gradient",
    );

    let started = Instant::now();
    let a0 = {
        let loss = LossOptions {
            alpha: 0.0,
            ..LossOptions::new(l)
        };
        distill_gradients(&cfg, &teacher, &proj, &loss, &batch)?.1
    };
    let off = grads(CloneMask::none(l))?;
    let diff = a0.iter().zip(&off).fold(0.0f64, |m, (a, b)| m.max(a.max_abs_diff(b)));
    report.record("gradients.alpha-zero", diff, 1e-12, started, "α = 0 against clone mask off");
    Ok(report)
}

/// Runs one named suite.
pub fn run_suite(suite: &str, seed: u64, preset: &str) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let all = suite == "all";
    if !SUITES.contains(&suite) {
        return Err(LrcError::Config(format!("unknown suite {suite:?} (known: {})", SUITES.join(", "))));
    }
    if all || suite == "lemma1" {
        report.extend(check_lemma1(seed, 100)?);
    }
    if all || suite == "identity" {
        report.extend(check_identity_equivalence(preset, seed)?);
    }
    if all || suite == "params" {
        report.extend(check_param_counts()?);
    }
    if all || suite == "gradients" {
        report.extend(check_gradients(preset, seed)?);
    }
    Ok(report)
}

/// Singular values in descending order by one-sided Jacobi rotations.
pub fn singular_values<T: Real>(a: &Tensor<T>) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    // work on the taller orientation so columns ≤ rows
    let (rows, cols, get): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if m >= n {
        (m, n, Box::new(|i, j| a.data()[i * n + j].as_f64()))
    } else {
        (n, m, Box::new(|i, j| a.data()[j * n + i].as_f64()))
    };
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| get(i, j)).collect()).collect();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    alpha += u[p][i] * u[p][i];
                    beta += u[q][i] * u[q][i];
                    gamma += u[p][i] * u[q][i];
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = c * x - s * y;
                    u[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}
