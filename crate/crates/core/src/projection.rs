//! Trainable low-rank projections that turn a frozen teacher into a student.
//!
//! Every student matrix is `W_teacher · P` with `P` of shape `[d_teacher,
//! d_student]`, so the teacher's row dimension (heads, FFN width, vocabulary)
//! is kept and only the hidden size shrinks. Projections plus fresh student
//! RMSNorm gains are the only trainable parameters.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::tensors_hash;
use crate::error::{LrcError, Result};
use crate::model::{LayerParams, ModelConfig, ModelParams, ModelVars, WeightSet};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// Independent projection per weight matrix.
    All,
    /// Input projections tied: q/k/v share one matrix, gate/up share one.
    Io,
}

/// Projection sharing for the attention and FFN blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SharingMode {
    pub attn: Sharing,
    pub ffn: Sharing,
}

impl SharingMode {
    pub const ALL_ALL: SharingMode = SharingMode {
        attn: Sharing::All,
        ffn: Sharing::All,
    };
    pub const IO_IO: SharingMode = SharingMode {
        attn: Sharing::Io,
        ffn: Sharing::Io,
    };

    pub fn every() -> [SharingMode; 4] {
        [
            SharingMode::ALL_ALL,
            SharingMode {
                attn: Sharing::Io,
                ffn: Sharing::All,
            },
            SharingMode {
                attn: Sharing::All,
                ffn: Sharing::Io,
            },
            SharingMode::IO_IO,
        ]
    }
}

impl Default for SharingMode {
    fn default() -> Self {
        SharingMode::ALL_ALL
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |x: Sharing| match x {
            Sharing::All => "all",
            Sharing::Io => "io",
        };
        write!(f, "{},{}", s(self.attn), s(self.ffn))
    }
}

impl FromStr for SharingMode {
    type Err = LrcError;

    fn from_str(s: &str) -> Result<Self> {
        let one = |x: &str| match x.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Sharing::All),
            "io" => Ok(Sharing::Io),
            other => Err(LrcError::Config(format!("unknown sharing {other:?}, expected all or io"))),
        };
        let (a, f) = s
            .split_once(',')
            .ok_or_else(|| LrcError::Config(format!("sharing {s:?} must look like all,io")))?;
        Ok(SharingMode {
            attn: one(a)?,
            ffn: one(f)?,
        })
    }
}

/// Structural choices fixed at projection-set creation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionOptions {
    pub sharing: SharingMode,
    /// When false, extra matrices align teacher module outputs inside the
    /// clone loss instead of reusing the output projections.
    pub alignment_free: bool,
    /// Separate LM-head projection. `None` follows the teacher: untied
    /// teachers get one, tied teachers share the embedding projection.
    pub separate_lm: Option<bool>,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            sharing: SharingMode::ALL_ALL,
            alignment_free: true,
            separate_lm: None,
        }
    }
}

impl ProjectionOptions {
    pub fn has_lm_projection(&self, teacher: &ModelConfig) -> bool {
        self.separate_lm.unwrap_or(!teacher.tie_embeddings)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub gate: usize,
    pub up: usize,
    pub down: usize,
    pub attn_norm: usize,
    pub ffn_norm: usize,
    pub align_o: Option<usize>,
    pub align_down: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionLayout {
    pub layers: Vec<LayerSlots>,
    pub embed: usize,
    pub lm_head: Option<usize>,
    pub final_norm: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

impl ProjectionLayout {
    fn build(teacher: &ModelConfig, student_hidden: usize, opts: &ProjectionOptions) -> Self {
        let (dt, ds) = (teacher.hidden_size, student_hidden);
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let embed = add("embed".into(), vec![dt, ds]);
        let lm_head = opts
            .has_lm_projection(teacher)
            .then(|| add("lm_head".into(), vec![dt, ds]));
        let final_norm = add("final_norm".into(), vec![ds]);
        let mut layers = Vec::with_capacity(teacher.num_layers);
        for i in 0..teacher.num_layers {
            let mut p = |m: &str| add(format!("layers.{i}.{m}"), vec![dt, ds]);
            let (q, k, v) = match opts.sharing.attn {
                Sharing::All => (p("q"), p("k"), p("v")),
                Sharing::Io => {
                    let qkv = p("qkv");
                    (qkv, qkv, qkv)
                }
            };
            let o = p("o");
            let (gate, up) = match opts.sharing.ffn {
                Sharing::All => (p("gate"), p("up")),
                Sharing::Io => {
                    let gu = p("gate_up");
                    (gu, gu)
                }
            };
            let down = p("down");
            let (align_o, align_down) = if opts.alignment_free {
                (None, None)
            } else {
                (Some(p("align_o")), Some(p("align_down")))
            };
            let attn_norm = add(format!("layers.{i}.attn_norm"), vec![ds]);
            let ffn_norm = add(format!("layers.{i}.ffn_norm"), vec![ds]);
            layers.push(LayerSlots {
                q,
                k,
                v,
                o,
                gate,
                up,
                down,
                attn_norm,
                ffn_norm,
                align_o,
                align_down,
            });
        }
        ProjectionLayout {
            layers,
            embed,
            lm_head,
            final_norm,
            names,
            shapes,
        }
    }

    /// Slots holding `[d_teacher, d_student]` matrices (not gains).
    pub fn is_matrix(&self, slot: usize) -> bool {
        self.shapes[slot].len() == 2
    }
}

/// Trainable projections and student gains for one teacher.
#[derive(Debug, Clone)]
pub struct ProjectionSet<T> {
    teacher: ModelConfig,
    student_hidden: usize,
    options: ProjectionOptions,
    layout: ProjectionLayout,
    params: Vec<Tensor<T>>,
}

impl<T: Real> ProjectionSet<T> {
    fn check_dims(teacher: &ModelConfig, student_hidden: usize) -> Result<()> {
        teacher.validate()?;
        if student_hidden == 0 || student_hidden > teacher.hidden_size {
            return Err(LrcError::Config(format!(
                "student hidden size {student_hidden} must be in 1..={}",
                teacher.hidden_size
            )));
        }
        Ok(())
    }

    /// Projections i.i.d. N(0, 1/d_teacher); gains one. Deterministic in `seed`.
    pub fn init(teacher: &ModelConfig, student_hidden: usize, options: ProjectionOptions, seed: u64) -> Result<Self> {
        Self::check_dims(teacher, student_hidden)?;
        let layout = ProjectionLayout::build(teacher, student_hidden, &options);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (teacher.hidden_size as f64).sqrt()).expect("finite std");
        let params = layout
            .shapes
            .iter()
            .map(|shape| {
                if shape.len() == 2 {
                    Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
                } else {
                    Tensor::ones(shape)
                }
            })
            .collect();
        Ok(ProjectionSet {
            teacher: teacher.clone(),
            student_hidden,
            options,
            layout,
            params,
        })
    }

    /// Identity projections with the teacher's gains copied: the student is
    /// the teacher. Needs `d_student == d_teacher`.
    pub fn identity(teacher_cfg: &ModelConfig, teacher: &WeightSet<T>, options: ProjectionOptions) -> Result<Self> {
        let mut set = Self::init(teacher_cfg, teacher_cfg.hidden_size, options, 0)?;
        let d = teacher_cfg.hidden_size;
        for slot in 0..set.params.len() {
            if set.layout.is_matrix(slot) {
                set.params[slot] = Tensor::eye(d);
            }
        }
        set.params[set.layout.final_norm] = (*teacher.final_norm).clone();
        for (slots, lw) in set.layout.layers.clone().iter().zip(&teacher.layers) {
            set.params[slots.attn_norm] = (*lw.attn_norm).clone();
            set.params[slots.ffn_norm] = (*lw.ffn_norm).clone();
        }
        Ok(set)
    }

    /// Rebuilds a set from stored `(name, tensor)` pairs.
    pub fn from_named(
        teacher: &ModelConfig,
        student_hidden: usize,
        options: ProjectionOptions,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        Self::check_dims(teacher, student_hidden)?;
        let layout = ProjectionLayout::build(teacher, student_hidden, &options);
        let mut map: std::collections::HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut params = Vec::with_capacity(layout.names.len());
        for (name, shape) in layout.names.iter().zip(&layout.shapes) {
            let t = map
                .remove(name)
                .ok_or_else(|| LrcError::Input(format!("missing projection tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(LrcError::shape(
                    "projection",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            params.push(t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(LrcError::Input(format!("unexpected projection tensor {extra}")));
        }
        Ok(ProjectionSet {
            teacher: teacher.clone(),
            student_hidden,
            options,
            layout,
            params,
        })
    }

    pub fn teacher_config(&self) -> &ModelConfig {
        &self.teacher
    }

    pub fn student_hidden(&self) -> usize {
        self.student_hidden
    }

    pub fn options(&self) -> &ProjectionOptions {
        &self.options
    }

    pub fn sharing(&self) -> SharingMode {
        self.options.sharing
    }

    pub fn layout(&self) -> &ProjectionLayout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.layout.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_trainable(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    /// Architecture of the generated student.
    pub fn student_config(&self) -> ModelConfig {
        let mut cfg = self.teacher.with_hidden(self.student_hidden);
        cfg.tie_embeddings = self.teacher.tie_embeddings && self.layout.lm_head.is_none();
        cfg
    }

    pub fn fingerprint(&self) -> u64 {
        tensors_hash(self.named())
    }

    pub fn cast<U: Real>(&self) -> ProjectionSet<U> {
        ProjectionSet {
            teacher: self.teacher.clone(),
            student_hidden: self.student_hidden,
            options: self.options,
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every parameter on `g` as a trainable leaf.
    pub fn to_vars(&self, g: &mut Graph<T>) -> ProjectionVars {
        ProjectionVars {
            params: self.params.iter().map(|p| g.param(p.clone())).collect(),
            layout: self.layout.clone(),
        }
    }

    fn check_teacher(&self, teacher: &WeightSet<T>) -> Result<()> {
        let vocab = teacher.embed.shape()[0];
        if vocab != self.teacher.vocab_size {
            return Err(LrcError::Config(format!(
                "teacher vocabulary {vocab} differs from projection vocabulary {}",
                self.teacher.vocab_size
            )));
        }
        if teacher.layers.len() != self.teacher.num_layers || teacher.embed.shape()[1] != self.teacher.hidden_size {
            return Err(LrcError::Config("teacher weights do not match projection config".into()));
        }
        Ok(())
    }
}

/// Graph handles for a [`ProjectionSet`]; index-aligned with its params.
#[derive(Debug, Clone)]
pub struct ProjectionVars {
    pub params: Vec<Var>,
    pub layout: ProjectionLayout,
}

impl ProjectionVars {
    pub fn layer(&self, i: usize) -> LayerParams<Var> {
        let s = &self.layout.layers[i];
        let p = |slot: usize| self.params[slot];
        LayerParams {
            q: p(s.q),
            k: p(s.k),
            v: p(s.v),
            o: p(s.o),
            gate: p(s.gate),
            up: p(s.up),
            down: p(s.down),
            attn_norm: p(s.attn_norm),
            ffn_norm: p(s.ffn_norm),
        }
    }

    /// Matrix that maps teacher attention output into student space for the
    /// clone target.
    pub fn attn_target_map(&self, i: usize) -> Var {
        let s = &self.layout.layers[i];
        self.params[s.align_o.unwrap_or(s.o)]
    }

    pub fn ffn_target_map(&self, i: usize) -> Var {
        let s = &self.layout.layers[i];
        self.params[s.align_down.unwrap_or(s.down)]
    }
}

/// Records `W_teacher · P` for every student weight on `g`. `teacher` holds
/// the frozen teacher leaves.
pub fn project_on_graph<T: Real>(
    g: &mut Graph<T>,
    teacher: &ModelVars,
    tied_student: bool,
    proj: &ProjectionVars,
) -> Result<ModelVars> {
    let mut layers = Vec::with_capacity(teacher.layers.len());
    for (i, tl) in teacher.layers.iter().enumerate() {
        let p = proj.layer(i);
        layers.push(LayerParams {
            q: g.matmul(tl.q, p.q)?,
            k: g.matmul(tl.k, p.k)?,
            v: g.matmul(tl.v, p.v)?,
            o: g.matmul(tl.o, p.o)?,
            gate: g.matmul(tl.gate, p.gate)?,
            up: g.matmul(tl.up, p.up)?,
            down: g.matmul(tl.down, p.down)?,
            attn_norm: p.attn_norm,
            ffn_norm: p.ffn_norm,
        });
    }
    let embed = g.matmul(teacher.embed, proj.params[proj.layout.embed])?;
    let lm_head = if tied_student {
        embed
    } else {
        let lm_proj = proj.params[proj.layout.lm_head.unwrap_or(proj.layout.embed)];
        g.matmul(teacher.lm_head, lm_proj)?
    };
    Ok(ModelParams {
        layers,
        embed,
        lm_head,
        final_norm: proj.params[proj.layout.final_norm],
    })
}

/// Student weights of layer `i`: `W_m · P_m` for the seven matrices plus the
/// student gains.
pub fn project_layer_weights<T: Real>(
    teacher: &WeightSet<T>,
    proj: &ProjectionSet<T>,
    layer: usize,
) -> Result<LayerParams<Arc<Tensor<T>>>> {
    proj.check_teacher(teacher)?;
    let tl = teacher
        .layers
        .get(layer)
        .ok_or_else(|| LrcError::Input(format!("layer {layer} out of range")))?;
    let s = &proj.layout.layers[layer];
    let pr = |slot: usize| &proj.params[slot];
    let mm = |w: &Arc<Tensor<T>>, slot: usize| w.matmul(pr(slot)).map(Arc::new);
    Ok(LayerParams {
        q: mm(&tl.q, s.q)?,
        k: mm(&tl.k, s.k)?,
        v: mm(&tl.v, s.v)?,
        o: mm(&tl.o, s.o)?,
        gate: mm(&tl.gate, s.gate)?,
        up: mm(&tl.up, s.up)?,
        down: mm(&tl.down, s.down)?,
        attn_norm: Arc::new(pr(s.attn_norm).clone()),
        ffn_norm: Arc::new(pr(s.ffn_norm).clone()),
    })
}

/// Student embedding and LM head. The head aliases the embedding when the
/// student is tied.
pub fn project_embeddings<T: Real>(
    teacher: &WeightSet<T>,
    proj: &ProjectionSet<T>,
) -> Result<(Arc<Tensor<T>>, Arc<Tensor<T>>)> {
    proj.check_teacher(teacher)?;
    let embed = Arc::new(teacher.embed.matmul(&proj.params[proj.layout.embed])?);
    let lm_head = if proj.student_config().tie_embeddings {
        Arc::clone(&embed)
    } else {
        let slot = proj.layout.lm_head.unwrap_or(proj.layout.embed);
        Arc::new(teacher.lm_head.matmul(&proj.params[slot])?)
    };
    Ok((embed, lm_head))
}

/// Exact trainable-parameter count for a projection layout.
pub fn count_trainable_params(teacher: &ModelConfig, student_hidden: usize, sharing: SharingMode, tie: bool) -> u64 {
    count_trainable_params_with(teacher, student_hidden, sharing, tie, true)
}

/// As [`count_trainable_params`], with the extra alignment matrices of the
/// non-alignment-free variant when `alignment_free` is false.
pub fn count_trainable_params_with(
    teacher: &ModelConfig,
    student_hidden: usize,
    sharing: SharingMode,
    tie: bool,
    alignment_free: bool,
) -> u64 {
    let matrix = (teacher.hidden_size * student_hidden) as u64;
    let attn = match sharing.attn {
        Sharing::All => 4,
        Sharing::Io => 2,
    };
    let ffn = match sharing.ffn {
        Sharing::All => 3,
        Sharing::Io => 2,
    };
    let align = if alignment_free { 0 } else { 2 };
    let per_layer = (attn + ffn + align) * matrix + 2 * student_hidden as u64;
    let embeddings = if tie { matrix } else { 2 * matrix };
    teacher.num_layers as u64 * per_layer + embeddings + student_hidden as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_hash: String,
    pub projection_hash: String,
    pub steps: u64,
}

/// A standalone student: plain weights plus where they came from.
#[derive(Debug, Clone)]
pub struct StudentCheckpoint<T> {
    pub config: ModelConfig,
    pub weights: WeightSet<T>,
    pub provenance: Provenance,
}

/// Applies every projection once and returns teacher-free student weights.
pub fn materialize_student<T: Real>(
    teacher: &WeightSet<T>,
    proj: &ProjectionSet<T>,
    steps: u64,
) -> Result<StudentCheckpoint<T>> {
    let layers = (0..proj.teacher.num_layers)
        .map(|i| project_layer_weights(teacher, proj, i))
        .collect::<Result<Vec<_>>>()?;
    let (embed, lm_head) = project_embeddings(teacher, proj)?;
    let weights = ModelParams {
        layers,
        embed,
        lm_head,
        final_norm: Arc::new(proj.params[proj.layout.final_norm].clone()),
    };
    let teacher_named = teacher.named_tensors();
    Ok(StudentCheckpoint {
        config: proj.student_config(),
        weights,
        provenance: Provenance {
            teacher_hash: format!("{:016x}", tensors_hash(teacher_named.iter().map(|(n, t)| (n.as_str(), &**t)))),
            projection_hash: format!("{:016x}", proj.fingerprint()),
            steps,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_forward, TokenBatch};

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny-debug").unwrap()
    }

    #[test]
    fn sharing_mode_parse_and_display() {
        for m in SharingMode::every() {
            assert_eq!(m.to_string().parse::<SharingMode>().unwrap(), m);
        }
        assert!("all".parse::<SharingMode>().is_err());
        assert!("all,some".parse::<SharingMode>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_rejects_wide_students() {
        let a = ProjectionSet::<f32>::init(&tiny(), 32, ProjectionOptions::default(), 3).unwrap();
        let b = ProjectionSet::<f32>::init(&tiny(), 32, ProjectionOptions::default(), 3).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.bit_eq(y)));
        assert!(matches!(
            ProjectionSet::<f32>::init(&tiny(), 65, ProjectionOptions::default(), 3),
            Err(LrcError::Config(_))
        ));
    }

    #[test]
    fn io_sharing_ties_input_projections() {
        let mut cfg = tiny();
        cfg.num_layers = 2;
        let opts = ProjectionOptions {
            sharing: SharingMode::IO_IO,
            ..Default::default()
        };
        let set = ProjectionSet::<f32>::init(&cfg, 32, opts, 0).unwrap();
        for s in &set.layout().layers {
            assert!(s.q == s.k && s.k == s.v);
            assert_eq!(s.gate, s.up);
            let distinct: std::collections::BTreeSet<usize> = [s.q, s.o, s.gate, s.down].into();
            assert_eq!(distinct.len(), 4);
        }
        assert_eq!(set.num_trainable(), count_trainable_params(&cfg, 32, SharingMode::IO_IO, true));
    }

    #[test]
    fn column_norms_are_near_one() {
        let mut cfg = tiny();
        cfg.hidden_size = 512;
        cfg.num_layers = 1;
        let set = ProjectionSet::<f64>::init(&cfg, 64, ProjectionOptions::default(), 11).unwrap();
        let p = &set.params()[set.layout().layers[0].q];
        let (rows, cols) = (p.shape()[0], p.shape()[1]);
        let mean: f64 = (0..cols)
            .map(|j| (0..rows).map(|i| p.at2(i, j).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / cols as f64;
        assert!((mean - 1.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn counts_match_layouts_in_every_mode() {
        let mut untied = tiny();
        untied.tie_embeddings = false;
        for cfg in [tiny(), untied] {
            for sharing in SharingMode::every() {
                for alignment_free in [true, false] {
                    let opts = ProjectionOptions {
                        sharing,
                        alignment_free,
                        separate_lm: None,
                    };
                    let set = ProjectionSet::<f32>::init(&cfg, 32, opts, 0).unwrap();
                    let count =
                        count_trainable_params_with(&cfg, 32, sharing, cfg.tie_embeddings, alignment_free);
                    assert_eq!(set.num_trainable(), count, "{sharing} af={alignment_free}");
                }
            }
        }
    }

    #[test]
    fn two_layer_hand_count() {
        // 7 matrices × 2 layers × (64·32) + embedding 64·32 + gains (2·2 + 1)·32
        let hand = 7 * 2 * (64 * 32) + 64 * 32 + (2 * 2 + 1) * 32;
        assert_eq!(hand, 30_880);
        let mut cfg = tiny();
        cfg.num_layers = 2;
        assert_eq!(count_trainable_params(&cfg, 32, SharingMode::ALL_ALL, true), hand);
    }

    #[test]
    fn untied_preset_declares_two_projections() {
        let cfg = ModelConfig::preset("qwen2.5-7b").unwrap();
        let layout = ProjectionLayout::build(&cfg, 2048, &ProjectionOptions::default());
        assert!(layout.lm_head.is_some());
        let tied = ModelConfig::preset("llama3.2-3b").unwrap();
        assert!(ProjectionLayout::build(&tied, 1536, &ProjectionOptions::default()).lm_head.is_none());
    }

    #[test]
    fn identity_and_zero_projection() {
        let cfg = tiny();
        let teacher = WeightSet::<f64>::random(&cfg, 4).unwrap();
        let id = ProjectionSet::identity(&cfg, &teacher, ProjectionOptions::default()).unwrap();
        let layer = project_layer_weights(&teacher, &id, 1).unwrap();
        assert!(layer.gate.bit_eq(&teacher.layers[1].gate));
        assert!(layer.o.bit_eq(&teacher.layers[1].o));
        let (e, lm) = project_embeddings(&teacher, &id).unwrap();
        assert!(e.bit_eq(&teacher.embed));
        assert!(Arc::ptr_eq(&e, &lm));

        let mut zero = ProjectionSet::<f64>::init(&cfg, 32, ProjectionOptions::default(), 0).unwrap();
        for p in zero.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let layer = project_layer_weights(&teacher, &zero, 0).unwrap();
        assert!(layer.q.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projected_weights_have_bounded_rank() {
        // Gram-matrix eigenvalues of a rank-deficient product: all beyond
        // d_student are roundoff.
        let mut cfg = tiny();
        cfg.hidden_size = 48;
        cfg.num_layers = 1;
        let teacher = WeightSet::<f64>::random(&cfg, 8).unwrap();
        let set = ProjectionSet::<f64>::init(&cfg, 8, ProjectionOptions::default(), 8).unwrap();
        let w = project_layer_weights(&teacher, &set, 0).unwrap().q;
        let sv = crate::verify::singular_values(&w);
        assert!(sv[0] > 0.1);
        assert!(sv[8..].iter().all(|&s| s <= 1e-8), "{:?}", &sv[6..12]);
    }

    #[test]
    fn vocab_mismatch_is_config_error() {
        let cfg = tiny();
        let mut other = cfg.clone();
        other.vocab_size = 128;
        let teacher = WeightSet::<f32>::random(&other, 1).unwrap();
        let set = ProjectionSet::<f32>::init(&cfg, 32, ProjectionOptions::default(), 0).unwrap();
        assert!(matches!(project_embeddings(&teacher, &set), Err(LrcError::Config(_))));
    }

    #[test]
    fn materialized_student_matches_on_the_fly_forward() {
        let cfg = tiny();
        let teacher = WeightSet::<f32>::random(&cfg, 21).unwrap();
        let set = ProjectionSet::<f32>::init(&cfg, 32, ProjectionOptions::default(), 5).unwrap();
        let student = materialize_student(&teacher, &set, 0).unwrap();
        let batch = TokenBatch::new(2, 8, (0..16).map(|i| (i * 29 % 255) as u32).collect()).unwrap();

        let mut g = Graph::new();
        let tv = teacher.to_vars(&mut g, false);
        let pv = set.to_vars(&mut g);
        let sv = project_on_graph(&mut g, &tv, student.config.tie_embeddings, &pv).unwrap();
        let fly = crate::model::forward_graph(&mut g, &student.config, &sv, &batch).unwrap();
        let direct = model_forward(&batch, &student.weights, &student.config).unwrap();
        assert!(g.value(fly.logits).max_abs_diff(&direct.logits) <= 1e-6);
    }

    #[test]
    fn provenance_tracks_projection_changes() {
        let cfg = tiny();
        let teacher = WeightSet::<f32>::random(&cfg, 21).unwrap();
        let mut set = ProjectionSet::<f32>::init(&cfg, 32, ProjectionOptions::default(), 5).unwrap();
        let a = materialize_student(&teacher, &set, 0).unwrap().provenance;
        set.params_mut()[3].data_mut()[7] += 1e-3;
        let b = materialize_student(&teacher, &set, 0).unwrap().provenance;
        assert_eq!(a.teacher_hash, b.teacher_hash);
        assert_ne!(a.projection_hash, b.projection_hash);
    }
}
