//! Joint search for edit directions and the distinction classifier.
//!
//! Every training step draws a fresh latent, renders the original and a
//! random subset of edits, and takes one Adam step on the directions and one
//! on the classifier. No latent is ever revisited.

use std::path::Path;

use diffcore::{AdamConfig, AdamState, Graph, Tensor, Var};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomp::{Decomposer, DecomposerKind};
use crate::losses::{Batch, EditedSample, LossReport, LossWeights, Mode, Objective, ObjectiveConfig};
use crate::percept::pool_to;
use crate::rng::{self, stream};
use crate::scenegen::{Generator, GeneratorConfig, LatentZ, StyleCode};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of directions.
    pub m: usize,
    /// Number of generated samples, each seen once.
    pub n_samples: usize,
    pub lr_dirs: f64,
    /// Direction step size reached at the last sample by cosine annealing;
    /// `None` keeps `lr_dirs` constant.
    pub lr_dirs_final: Option<f64>,
    pub lr_clf: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Rows are projected back onto this norm ball after every step.
    pub max_norm: f64,
    /// Directions rendered per sample; defaults to `min(m, 8)`.
    pub dirs_per_step: Option<usize>,
    pub decomposer: DecomposerKind,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n_samples: 512,
            lr_dirs: 0.01,
            lr_dirs_final: Some(1e-4),
            lr_clf: 2e-3,
            weights: LossWeights::default(),
            seed: 1,
            max_norm: 3.0,
            dirs_per_step: None,
            decomposer: DecomposerKind::Oracle,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn subset_size(&self) -> usize {
        self.dirs_per_step.unwrap_or(self.m.min(8))
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("train.m must be >= 2, got {}", self.m)));
        }
        let k = self.subset_size();
        if k < 2 || k > self.m {
            return Err(Error::Config(format!("train.dirs_per_step must be in 2..={}, got {k}", self.m)));
        }
        if !(self.max_norm > 0.0) {
            return Err(Error::Config(format!("train.max_norm must be > 0, got {}", self.max_norm)));
        }
        if !(self.lr_dirs > 0.0 && self.lr_clf > 0.0 && self.lr_dirs_final.is_none_or(|f| f > 0.0)) {
            return Err(Error::Config("train learning rates must be > 0".into()));
        }
        self.weights.validate()
    }

    /// Direction step size at `step`.
    pub fn lr_dirs_at(&self, step: usize) -> f64 {
        match self.lr_dirs_final {
            Some(f) if self.n_samples > 1 => {
                let t = step as f64 / (self.n_samples - 1) as f64;
                f + (self.lr_dirs - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.lr_dirs,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("train config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectionMeta {
    pub generator_seed: u64,
    pub config_hash: String,
    pub n_samples: usize,
    pub decomposer: String,
}

/// `M` directions in flattened `w+` space.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    dirs: Tensor,
    pub mode: Mode,
    pub l: usize,
    pub d: usize,
    pub seed: u64,
    pub meta: DirectionMeta,
}

#[derive(Serialize, Deserialize)]
struct DirectionFile {
    version: u32,
    mode: Mode,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "M")]
    m: usize,
    seed: u64,
    dirs: Vec<Vec<f64>>,
    #[serde(default)]
    meta: DirectionMeta,
}

impl DirectionSet {
    pub fn new(dirs: Tensor, mode: Mode, l: usize, d: usize, seed: u64) -> Result<Self> {
        if dirs.shape().len() != 2 || dirs.shape()[1] != l * d {
            return Err(Error::dims("direction matrix", format!("[M, {}]", l * d), dirs.shape()));
        }
        Ok(Self { dirs, mode, l, d, seed, meta: DirectionMeta::default() })
    }

    /// Unit-norm Gaussian rows.
    pub fn random(m: usize, l: usize, d: usize, norm: f64, mode: Mode, seed: u64, stream: u64) -> Self {
        let mut r = rng::seeded(seed, stream);
        let data = (0..m).flat_map(|_| rng::random_direction(&mut r, l * d, norm)).collect();
        Self::new(Tensor::new([m, l * d], data).expect("rows"), mode, l, d, seed).expect("shape")
    }

    pub fn len(&self) -> usize {
        self.dirs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dirs(&self) -> &Tensor {
        &self.dirs
    }

    pub fn direction(&self, i: usize) -> Result<&[f64]> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { what: "directions", index: i, len: self.len() });
        }
        Ok(self.dirs.row(i))
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.dirs.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
    }

    /// Checks that the set fits a generator's style space.
    pub fn check_generator(&self, cfg: &GeneratorConfig) -> Result<()> {
        if (self.l, self.d) != (cfg.l, cfg.d) {
            return Err(Error::dims("direction style shape (L, D)", (cfg.l, cfg.d), (self.l, self.d)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DirectionFile {
            version: FORMAT_VERSION,
            mode: self.mode,
            l: self.l,
            d: self.d,
            m: self.len(),
            seed: self.seed,
            dirs: (0..self.len()).map(|i| self.dirs.row(i).to_vec()).collect(),
            meta: self.meta.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: DirectionFile = serde_json::from_str(s)?;
        if f.version != FORMAT_VERSION {
            return Err(Error::Version { found: f.version, expected: FORMAT_VERSION });
        }
        if f.dirs.len() != f.m {
            return Err(Error::dims("direction count M", f.m, f.dirs.len()));
        }
        for row in &f.dirs {
            if row.len() != f.l * f.d {
                return Err(Error::dims("direction length L*D", f.l * f.d, row.len()));
            }
        }
        let data = f.dirs.into_iter().flatten().collect();
        let mut set = Self::new(Tensor::new([f.m, f.l * f.d], data)?, f.mode, f.l, f.d, f.seed)?;
        set.meta = f.meta;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `w+ + scale * reshape(d_i, [L, D])`.
pub fn apply_direction(w_plus: &StyleCode, set: &DirectionSet, i: usize, scale: f64) -> Result<StyleCode> {
    if (w_plus.layers(), w_plus.dim()) != (set.l, set.d) {
        return Err(Error::dims("style code shape", (set.l, set.d), (w_plus.layers(), w_plus.dim())));
    }
    w_plus.offset_by(set.direction(i)?, scale)
}

/// Side length of the classifier's downsampled inputs.
pub const CLASSIFIER_RES: usize = 16;
pub const CLASSIFIER_HIDDEN: usize = 128;
const CLASSIFIER_LEAK: f64 = 0.2;

/// MLP predicting which direction turned `original` into `edited`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    version: u32,
    input: usize,
    hidden: usize,
    outputs: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Classifier {
    pub const INPUT: usize = 2 * 3 * CLASSIFIER_RES * CLASSIFIER_RES;

    pub fn new(m: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed, stream::CLASSIFIER_INIT);
        let (n_in, h) = (Self::INPUT, CLASSIFIER_HIDDEN);
        let s1 = (1.0 / n_in as f64).sqrt();
        let s2 = (1.0 / h as f64).sqrt();
        let w1 = rng::normal_vec(&mut r, h * n_in).into_iter().map(|x| x * s1).collect();
        let w2 = rng::normal_vec(&mut r, m * h).into_iter().map(|x| x * s2).collect();
        Self {
            w1: Tensor::new([h, n_in], w1).expect("w1"),
            b1: Tensor::zeros([h, 1]),
            w2: Tensor::new([m, h], w2).expect("w2"),
            b2: Tensor::zeros([m, 1]),
        }
    }

    pub fn outputs(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Adds the weights to the graph, trainable or frozen.
    pub fn vars(&self, g: &mut Graph, trainable: bool) -> ClassifierVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        ClassifierVars { w1: leaf(&self.w1), b1: leaf(&self.b1), w2: leaf(&self.w2), b2: leaf(&self.b2) }
    }

    /// Logits `[M]` for a pair of `[3, H, W]` images.
    pub fn forward(g: &mut Graph, vars: &ClassifierVars, original: Var, edited: Var) -> Result<Var> {
        if g.shape(original) != g.shape(edited) {
            return Err(Error::dims("classifier pair resolution", g.shape(original), g.shape(edited)));
        }
        let a = pool_to(g, original, CLASSIFIER_RES)?;
        let b = pool_to(g, edited, CLASSIFIER_RES)?;
        let x = g.concat(&[a, b])?;
        let x = g.reshape(x, [Self::INPUT, 1])?;
        let h = g.matmul(vars.w1, x)?;
        let h = g.add(h, vars.b1)?;
        let h = g.leaky_relu(h, CLASSIFIER_LEAK)?;
        let o = g.matmul(vars.w2, h)?;
        let o = g.add(o, vars.b2)?;
        let m = g.shape(o)[0];
        Ok(g.reshape(o, [m])?)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ClassifierFile {
            version: FORMAT_VERSION,
            input: Self::INPUT,
            hidden: CLASSIFIER_HIDDEN,
            outputs: self.outputs(),
            w1: self.w1.data().to_vec(),
            b1: self.b1.data().to_vec(),
            w2: self.w2.data().to_vec(),
            b2: self.b2.data().to_vec(),
        };
        let mut s = serde_json::to_string(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ClassifierFile = serde_json::from_str(s)?;
        if f.version != FORMAT_VERSION {
            return Err(Error::Version { found: f.version, expected: FORMAT_VERSION });
        }
        if (f.input, f.hidden) != (Self::INPUT, CLASSIFIER_HIDDEN) {
            return Err(Error::dims("classifier layout", (Self::INPUT, CLASSIFIER_HIDDEN), (f.input, f.hidden)));
        }
        Ok(Self {
            w1: Tensor::new([f.hidden, f.input], f.w1)?,
            b1: Tensor::new([f.hidden, 1], f.b1)?,
            w2: Tensor::new([f.outputs, f.hidden], f.w2)?,
            b2: Tensor::new([f.outputs, 1], f.b2)?,
        })
    }
}

/// Logits of the classifier on a pair of rendered images.
pub fn classify_pair(f: &Classifier, original: &Tensor, edited: &Tensor) -> Result<Vec<f64>> {
    if original.shape() != edited.shape() {
        return Err(Error::dims("classifier pair resolution", original.shape(), edited.shape()));
    }
    let mut g = Graph::new();
    let vars = f.vars(&mut g, false);
    let a = g.constant(original.clone());
    let b = g.constant(edited.clone());
    let logits = Classifier::forward(&mut g, &vars, a, b)?;
    Ok(g.value(logits).data().to_vec())
}

pub struct TrainOutcome {
    pub directions: DirectionSet,
    pub classifier: Classifier,
    pub log: Vec<LossReport>,
    /// Latents drawn from the training stream; equals `n_samples`.
    pub samples_drawn: usize,
}

/// Overall loss for one latent and a subset of directions, built on
/// caller-provided direction and classifier nodes.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph,
    gen: &Generator,
    decomposer: &dyn Decomposer,
    objective: &Objective,
    dirs: Var,
    classifier: &ClassifierVars,
    w_plus: &StyleCode,
    subset: &[usize],
) -> Result<(Var, LossReport)> {
    let (l, d) = (gen.config().l, gen.config().d);
    let base = g.constant(w_plus.tensor().clone());
    let orig_scene = gen.synthesize_graph(g, base)?;
    let original = decomposer.decompose(g, &orig_scene)?;
    let use_clf = objective.weights.lambda_dist > 0.0;
    let mut edits = Vec::with_capacity(subset.len());
    for &i in subset {
        let row = g.row(dirs, i)?;
        let delta = g.reshape(row, [l, d])?;
        let w = g.add(base, delta)?;
        let scene = gen.synthesize_graph(g, w)?;
        let triple = decomposer.decompose(g, &scene)?;
        let logits =
            if use_clf { Some(Classifier::forward(g, classifier, orig_scene.pixels, scene.pixels)?) } else { None };
        edits.push(EditedSample { index: i, pixels: scene.pixels, triple, logits });
    }
    objective.total(g, &Batch { original, edits })
}

struct StepGraph {
    graph: Graph,
    dirs: Var,
    classifier: ClassifierVars,
    loss: Var,
    report: LossReport,
}

fn step_graph(
    gen: &Generator,
    decomposer: &dyn Decomposer,
    objective: &Objective,
    dirs: &Tensor,
    classifier: &Classifier,
    w_plus: &StyleCode,
    subset: &[usize],
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let dv = g.param(dirs.clone());
    let cv = classifier.vars(&mut g, true);
    let (loss, report) = batch_loss(&mut g, gen, decomposer, objective, dv, &cv, w_plus, subset)?;
    Ok(StepGraph { graph: g, dirs: dv, classifier: cv, loss, report })
}

fn project_rows(dirs: &mut Tensor, max_norm: f64) {
    let m = dirs.shape()[0];
    for i in 0..m {
        let row = dirs.row_mut(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > max_norm {
            row.iter_mut().for_each(|x| *x *= max_norm / n);
        }
    }
}

/// Trains `cfg.m` directions and the classifier on a stream of fresh samples.
pub fn train_directions(cfg: &TrainConfig, gen: &Generator) -> Result<TrainOutcome> {
    cfg.validate()?;
    let gcfg = gen.config();
    let mode = cfg.weights.mode;
    let decomposer = cfg.decomposer.build(gcfg.resolution);
    let objective = Objective::new(&cfg.objective, cfg.weights, gcfg.resolution)?;

    let mut set = DirectionSet::random(cfg.m, gcfg.l, gcfg.d, 1.0, mode, cfg.seed, stream::DIRECTION_INIT);
    set.meta = DirectionMeta {
        generator_seed: gcfg.seed,
        config_hash: cfg.hash(),
        n_samples: cfg.n_samples,
        decomposer: decomposer.name().to_string(),
    };
    let mut classifier = Classifier::new(cfg.m, cfg.seed);
    let mut adam_dirs = AdamState::new(AdamConfig::with_lr(cfg.lr_dirs), &[&set.dirs]);
    let mut adam_clf = AdamState::new(AdamConfig::with_lr(cfg.lr_clf), &classifier.params());

    let mut latents = rng::seeded(cfg.seed, stream::TRAIN_LATENTS);
    let mut subsets = rng::seeded(cfg.seed, stream::TRAIN_SUBSETS);
    let k = cfg.subset_size();
    let mut log = Vec::with_capacity(cfg.n_samples);
    let mut drawn = 0;

    for step in 0..cfg.n_samples {
        let z = LatentZ::sample(&mut latents, gcfg.dz);
        drawn += 1;
        let w_plus = gen.map_latent(&z)?;
        let mut subset = index::sample(&mut subsets, cfg.m, k).into_vec();
        subset.sort_unstable();

        let mut sg = step_graph(gen, decomposer.as_ref(), &objective, &set.dirs, &classifier, &w_plus, &subset)?;
        if !sg.report.is_finite() {
            return Err(Error::NonFiniteLoss { step, breakdown: sg.report.to_string() });
        }
        sg.graph.backward(sg.loss)?;
        let gd = sg.graph.grad_or_zeros(sg.dirs);
        let c = sg.classifier;
        let gc = [c.w1, c.b1, c.w2, c.b2].map(|v| sg.graph.grad_or_zeros(v));
        if !gd.is_finite() || gc.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { step, breakdown: format!("non-finite gradient; {}", sg.report) });
        }
        adam_dirs.config.lr = cfg.lr_dirs_at(step);
        adam_dirs.step(&mut [&mut set.dirs], &[gd])?;
        adam_clf.step(&mut classifier.params_mut(), &gc)?;
        project_rows(&mut set.dirs, cfg.max_norm);

        if step % 50 == 0 || step + 1 == cfg.n_samples {
            log::info!("step {step}: {}", sg.report);
        } else {
            log::debug!("step {step}: {}", sg.report);
        }
        log.push(sg.report);
    }
    Ok(TrainOutcome { directions: set, classifier, log, samples_drawn: drawn })
}
