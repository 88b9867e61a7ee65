//! The `lrc` command line.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::checkpoint::{load_model, load_teacher, save_student, save_teacher};
use crate::corpus::{gen_synthetic_corpus, load_token_file, write_token_file, BatchStream, SyntheticKind, TokenCorpus};
use crate::error::{LrcError, Result};
use crate::model::{ModelConfig, TokenBatch, WeightSet};
use crate::projection::{count_trainable_params_with, materialize_student, SharingMode};
use crate::tensor::Real;
use crate::train::{
    evaluate_lm, evaluate_projected, load_projection, pretrain_teacher, run_training, RunOptions, TrainConfig, TRAIN_PRESETS,
};
use crate::verify::run_suite;

#[derive(Debug, Parser)]
#[command(name = "lrc", version, about = "Low-rank clone distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Random teacher from a model preset, optionally pre-trained on a synthetic corpus.
    GenTeacher(GenTeacherArgs),
    /// Seeded synthetic token corpus.
    GenCorpus(GenCorpusArgs),
    /// Full distillation run.
    Train(Box<TrainArgs>),
    /// Applies trained projections once and writes a standalone student.
    Materialize(MaterializeArgs),
    /// Held-out LM loss and perplexity of a model or a teacher+projection pair.
    Eval(EvalArgs),
    /// Runs the oracle checks; exits 2 when any fails.
    Verify(VerifyArgs),
    /// Trainable-parameter counts per sharing mode.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
struct GenTeacherArgs {
    #[arg(long, default_value = "tiny-debug")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pre-training steps; 0 keeps the random initialization.
    #[arg(long, default_value_t = 0)]
    steps: usize,
    /// Token file to pre-train on; a seeded markov corpus otherwise.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    f64: bool,
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    #[arg(long, default_value = "markov")]
    kind: String,
    /// Approximate number of tokens.
    #[arg(long, default_value_t = 400_000)]
    size: usize,
    #[arg(long, default_value_t = 256)]
    vocab: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "tiny-distill")]
    preset: String,
    /// JSON object overlaid on the preset before flags apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Teacher checkpoint; a random teacher from the preset otherwise.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Token file; the configured synthetic corpus otherwise.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    student_hidden: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    sharing: Option<SharingMode>,
    /// Comma list of disabled terms among q,k,v,o_attn,gate,up,o_ffn (or attn, ffn).
    #[arg(long)]
    clone_mask: Option<String>,
    /// `all` or a layer bit mask.
    #[arg(long)]
    clone_layers: Option<String>,
    #[arg(long)]
    no_alignment_free: bool,
    #[arg(long)]
    stop_grad_targets: bool,
    /// Global gradient-norm bound, or `none`.
    #[arg(long)]
    clip_norm: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Projection checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this global step.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    f64: bool,
}

#[derive(Debug, Args)]
struct MaterializeArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    projection: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    f64: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Teacher or student checkpoint.
    #[arg(long, conflicts_with = "projection")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "projection")]
    teacher: Option<PathBuf>,
    #[arg(long, requires = "teacher")]
    projection: Option<PathBuf>,
    /// Held-out token file; a seeded markov corpus otherwise.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    f64: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value = "tiny-debug")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Training preset naming the teacher and student width.
    #[arg(long, default_value = "lrc-1.5b")]
    preset: String,
    /// One mode; all four otherwise.
    #[arg(long)]
    sharing: Option<SharingMode>,
    #[arg(long)]
    student_hidden: Option<usize>,
    #[arg(long)]
    no_alignment_free: bool,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 usage or runtime error, 2 failed verification.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("LRC_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenTeacher(a) if a.f64 => gen_teacher::<f64>(&a),
        Command::GenTeacher(a) => gen_teacher::<f32>(&a),
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::Train(a) if a.f64 => train::<f64>(&a),
        Command::Train(a) => train::<f32>(&a),
        Command::Materialize(a) if a.f64 => materialize::<f64>(&a),
        Command::Materialize(a) => materialize::<f32>(&a),
        Command::Eval(a) if a.f64 => eval::<f64>(&a),
        Command::Eval(a) => eval::<f32>(&a),
        Command::Verify(a) => verify(&a),
        Command::Params(a) => params(&a),
    }
}

fn markov(size: usize, vocab: usize, seed: u64) -> Result<TokenCorpus> {
    gen_synthetic_corpus(SyntheticKind::Markov, size, vocab as u32, seed)
}

fn gen_teacher<T: Real>(a: &GenTeacherArgs) -> Result<i32> {
    let model = ModelConfig::preset(&a.preset)?;
    let weights = if a.steps == 0 {
        WeightSet::<T>::random(&model, a.seed)?
    } else {
        let base = TrainConfig::preset("tiny-distill")?;
        let mut cfg = TrainConfig {
            teacher: a.preset.clone(),
            seq_len: a.seq_len.unwrap_or(base.seq_len),
            batch_tokens: a.batch_tokens.unwrap_or(base.batch_tokens),
            ..base
        };
        cfg.pretrain.steps = a.steps;
        cfg.pretrain.seed = a.seed;
        if let Some(lr) = a.lr {
            cfg.pretrain.learning_rate = lr;
        }
        let corpus = match &a.corpus {
            Some(p) => load_token_file(p)?,
            None => markov(cfg.corpus.size, model.vocab_size, cfg.corpus.seed)?,
        };
        let (_, w, records) = pretrain_teacher::<T>(&corpus, &cfg)?;
        if let Some(last) = records.last() {
            println!("pretrained {} steps, final LM loss {:.4}", last.step, last.report.lm);
        }
        w
    };
    save_teacher(&a.out, &model, &weights)?;
    println!("wrote {} teacher ({} parameters) to {}", a.preset, model.num_parameters(), a.out.display());
    Ok(0)
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<i32> {
    let kind: SyntheticKind = a.kind.parse()?;
    let corpus = gen_synthetic_corpus(kind, a.size, a.vocab, a.seed)?;
    write_token_file(&a.out, &corpus)?;
    println!(
        "wrote {} documents, {} tokens to {}",
        corpus.docs.len(),
        corpus.num_tokens(),
        a.out.display()
    );
    Ok(0)
}

/// Preset defaults, then the config file, then flags.
fn effective_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| LrcError::io(path, e))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| LrcError::Config(format!("{}: {e}", path.display())))?;
        cfg = cfg.overlay(&patch)?;
    }
    macro_rules! set {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag.clone() {
                cfg.$field = v;
            }
        };
    }
    set!(a.steps, total_steps);
    set!(a.seq_len, seq_len);
    set!(a.batch_tokens, batch_tokens);
    set!(a.student_hidden, student_hidden);
    set!(a.alpha, alpha);
    set!(a.temperature, temperature);
    set!(a.lr, learning_rate);
    set!(a.warmup_ratio, warmup_ratio);
    set!(a.sharing, sharing);
    set!(a.clone_mask, clone_mask);
    set!(a.clone_layers, clone_layers);
    set!(a.seed, seed);
    set!(a.checkpoint_every, checkpoint_every);
    if a.no_alignment_free {
        cfg.alignment_free = false;
    }
    if a.stop_grad_targets {
        cfg.stop_grad_targets = true;
    }
    if let Some(c) = &a.clip_norm {
        cfg.clip_norm = match c.as_str() {
            "none" | "off" => None,
            s => Some(s.parse().map_err(|_| LrcError::Config(format!("bad --clip-norm {s:?}")))?),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train<T: Real>(a: &TrainArgs) -> Result<i32> {
    let cfg = effective_config(a)?;
    let (teacher_cfg, teacher) = match &a.teacher {
        Some(p) => load_teacher::<T>(p)?,
        None => {
            let m = cfg.teacher_config()?;
            let w = WeightSet::<T>::random(&m, cfg.seed)?;
            (m, w)
        }
    };
    let corpus = match &a.corpus {
        Some(p) => load_token_file(p)?,
        None => {
            let kind: SyntheticKind = cfg.corpus.kind.parse()?;
            gen_synthetic_corpus(kind, cfg.corpus.size, teacher_cfg.vocab_size as u32, cfg.corpus.seed)?
        }
    };
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume.clone(),
        stop_after: a.stop_after,
    };
    let outcome = run_training(&corpus, &teacher_cfg, Arc::new(teacher), &cfg, &opts)?;
    let d = &outcome.distiller;
    match outcome.records.last() {
        Some(r) => println!(
            "step {} total {:.5} clone {:.5} kl {:.5} lm {:.5} ({} rejected steps)",
            r.step, r.report.total, r.report.clone, r.report.kl, r.report.lm, d.spikes
        ),
        None => println!("no steps run (step {})", d.step),
    }
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn materialize<T: Real>(a: &MaterializeArgs) -> Result<i32> {
    let (teacher_cfg, teacher) = load_teacher::<T>(&a.teacher)?;
    let ck = load_projection(&a.projection)?;
    if ck.teacher_cfg != teacher_cfg {
        return Err(LrcError::Contract("projection was trained against a different teacher geometry".into()));
    }
    let proj = ck.proj.cast::<T>();
    let student = materialize_student(&teacher, &proj, ck.step as u64)?;
    if student.provenance.teacher_hash != ck.teacher_hash {
        eprintln!(
            "warning: teacher hash {} differs from the one the projection was trained on ({})",
            student.provenance.teacher_hash, ck.teacher_hash
        );
    }
    save_student(&a.out, &student)?;
    println!(
        "wrote student (hidden {}, {} parameters) to {}",
        student.config.hidden_size,
        student.config.num_parameters(),
        a.out.display()
    );
    Ok(0)
}

fn eval_batches(a: &EvalArgs, vocab: usize) -> Result<Vec<TokenBatch>> {
    let corpus = match &a.corpus {
        Some(p) => load_token_file(p)?,
        None => markov(a.seq_len * a.batch * a.batches * 2, vocab, a.seed.wrapping_add(1_000_003))?,
    };
    if corpus.vocab_size as usize != vocab {
        return Err(LrcError::Config(format!(
            "corpus vocabulary {} differs from model vocabulary {vocab}",
            corpus.vocab_size
        )));
    }
    let stream = BatchStream::new(&corpus, a.seq_len, a.batch, a.seed)?;
    let n = a.batches.min(stream.batches_per_epoch()).max(1);
    Ok(stream.take(n).collect())
}

fn eval<T: Real>(a: &EvalArgs) -> Result<i32> {
    let (what, loss) = match (&a.checkpoint, &a.teacher, &a.projection) {
        (Some(p), None, None) => {
            let (kind, cfg, w) = load_model::<T>(p)?;
            let batches = eval_batches(a, cfg.vocab_size)?;
            (kind.to_string(), evaluate_lm(&cfg, &w, &batches)?)
        }
        (None, Some(t), Some(p)) => {
            let (tcfg, tw) = load_teacher::<T>(t)?;
            let ck = load_projection(p)?;
            let batches = eval_batches(a, tcfg.vocab_size)?;
            ("teacher+projection".to_string(), evaluate_projected(&tcfg, &tw, &ck.proj.cast::<T>(), &batches)?)
        }
        _ => return Err(LrcError::Config("give --checkpoint, or --teacher with --projection".into())),
    };
    println!("{what} loss {loss:.9} ppl {:.6}", loss.exp());
    Ok(0)
}

fn verify(a: &VerifyArgs) -> Result<i32> {
    let report = run_suite(&a.suite, a.seed, &a.preset)?;
    print!("{}", report.human());
    if let Some(path) = &a.out {
        std::fs::write(path, report.jsonl()).map_err(|e| LrcError::io(path, e))?;
    }
    Ok(if report.passed() { 0 } else { 2 })
}

fn params(a: &ParamsArgs) -> Result<i32> {
    let cfg = TrainConfig::preset(&a.preset).map_err(|_| {
        LrcError::Config(format!("unknown preset {:?} (known: {})", a.preset, TRAIN_PRESETS.join(", ")))
    })?;
    let teacher = cfg.teacher_config()?;
    let ds = a.student_hidden.unwrap_or(cfg.student_hidden);
    let modes = match a.sharing {
        Some(m) => vec![m],
        None => SharingMode::every().to_vec(),
    };
    let tie = teacher.tie_embeddings;
    for m in modes {
        let n = count_trainable_params_with(&teacher, ds, m, tie, !a.no_alignment_free);
        println!("{} {} {} {:.2}B", a.preset, m, n, n as f64 / 1e9);
    }
    Ok(0)
}
