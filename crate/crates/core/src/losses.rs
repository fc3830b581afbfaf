//! Loss terms for the direction search and their weighted combination.
//!
//! In relight mode the albedo is the persistent map and shading plus gloss
//! are transient. Recolor mode swaps the roles in every term and drops the
//! decorrelation term.

use diffcore::{AdError, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decomp::TripleVars;
use crate::percept::{self, FeaturePyramid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Relight,
    Recolor,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Relight => "relight",
            Mode::Recolor => "recolor",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relight" => Ok(Mode::Relight),
            "recolor" => Ok(Mode::Recolor),
            other => Err(format!("unknown mode {other:?} (expected relight or recolor)")),
        }
    }
}

/// Sign convention of the decorrelation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoSign {
    /// `+cos`: similarity between albedo lightness and the relit image is penalized.
    #[default]
    Penalty,
    /// `-cos`, the formula taken literally.
    Printed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_const: f64,
    pub lambda_per: f64,
    pub lambda_div: f64,
    pub lambda_dist: f64,
    pub lambda_deco: f64,
    /// Huber threshold of the consistency term.
    pub delta: f64,
    pub mode: Mode,
    pub deco_sign: DecoSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_const: 1.0,
            lambda_per: 1.0,
            lambda_div: 0.05,
            lambda_dist: 0.1,
            lambda_deco: 0.02,
            delta: 0.1,
            mode: Mode::Relight,
            deco_sign: DecoSign::Penalty,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_const, self.lambda_per, self.lambda_div, self.lambda_dist, self.lambda_deco];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }

    /// Weights actually applied: recoloring never uses decorrelation.
    pub fn effective(&self) -> LossWeights {
        let mut w = *self;
        if w.mode == Mode::Recolor && w.lambda_deco != 0.0 {
            log::warn!("recolor mode ignores lambda_deco = {}; using 0", w.lambda_deco);
            w.lambda_deco = 0.0;
        }
        w
    }
}

/// Per-term values of one evaluation of the overall loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub consistency: f64,
    pub perceptual: f64,
    pub diversity: f64,
    pub distinction: f64,
    pub decorrelation: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "consistency,perceptual,diversity,distinction,decorrelation,total";

    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda_const * self.consistency
            + w.lambda_per * self.perceptual
            + w.lambda_div * self.diversity
            + w.lambda_dist * self.distinction
            + w.lambda_deco * self.decorrelation
    }

    pub fn is_finite(&self) -> bool {
        [self.consistency, self.perceptual, self.diversity, self.distinction, self.decorrelation, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.consistency, self.perceptual, self.diversity, self.distinction, self.decorrelation, self.total
        )
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "const={:.6e} per={:.6e} div={:.6e} dist={:.6e} deco={:.6e} total={:.6e}",
            self.consistency, self.perceptual, self.diversity, self.distinction, self.decorrelation, self.total
        )
    }
}

/// Mean elementwise Huber penalty between two same-shape maps.
pub fn const_loss(g: &mut Graph, original: Var, edited: Var, delta: f64) -> Result<Var> {
    let d = g.sub(original, edited)?;
    let h = g.huber(d, delta)?;
    Ok(g.mean(h)?)
}

/// Sum over levels of the feature-space L2 distance divided by the square
/// root of the level's feature count (an RMS distance per level).
pub fn perceptual_loss(g: &mut Graph, pyramid: &FeaturePyramid, a: Var, b: Var, levels: &[usize]) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(AdError::ShapeMismatch {
            op: "perceptual_loss",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        }
        .into());
    }
    let fa = pyramid.extract(g, a, levels)?;
    let fb = pyramid.extract(g, b, levels)?;
    let mut total = g.scalar(0.0);
    for (x, y) in fa.into_iter().zip(fb) {
        let n = g.value(x).numel() as f64;
        let d = g.sub(x, y)?;
        let norm = g.l2_norm(d)?;
        let term = g.scale(norm, 1.0 / n.sqrt())?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// `-log det(N + jitter I)` for the Gram matrix of the given vectors.
///
/// A Gram that is not numerically positive definite yields the constant
/// `clamp_max` (no gradient).
pub fn diversity_loss(g: &mut Graph, vectors: &[Var], jitter: f64, clamp_max: f64) -> Result<Var> {
    if vectors.len() < 2 {
        return Err(Error::Config(format!("diversity needs at least 2 vectors, got {}", vectors.len())));
    }
    let n = g.value(vectors[0]).numel();
    let mut rows = Vec::with_capacity(vectors.len());
    for &v in vectors {
        rows.push(g.reshape(v, [1, n])?);
    }
    let m = rows.len();
    let t = g.concat(&rows)?;
    let tt = g.transpose(t)?;
    let gram = g.matmul(t, tt)?;
    let eye = g.constant(Tensor::new([m, m], Tensor::identity(m).data().iter().map(|x| x * jitter).collect())?);
    let gram = g.add(gram, eye)?;
    match g.logdet_psd(gram) {
        Ok(ld) => {
            let loss = g.neg(ld)?;
            if g.item(loss)? > clamp_max {
                log::warn!("diversity loss {} exceeds clamp {clamp_max}", g.item(loss)?);
                return Ok(g.scalar(clamp_max));
            }
            Ok(loss)
        }
        Err(AdError::DegenerateGram) => {
            log::warn!("degenerate transient Gram matrix; diversity loss clamped to {clamp_max}");
            Ok(g.scalar(clamp_max))
        }
        Err(e) => Err(e.into()),
    }
}

/// Cross-entropy of `softmax(logits)` against class `index`, with the
/// log-probability floored at -30.
pub fn distinction_loss(g: &mut Graph, logits: Var, index: usize) -> Result<Var> {
    let m = g.value(logits).numel();
    if index >= m {
        return Err(Error::IndexOutOfRange { what: "classes", index, len: m });
    }
    let flat = g.reshape(logits, [m])?;
    let lp = g.log_softmax(flat)?;
    let lpi = g.select(lp, index)?;
    let lpi = g.clamp_min(lpi, -30.0)?;
    Ok(g.neg(lpi)?)
}

/// Cosine similarity of two flattened maps.
pub fn cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = g.value(a).numel();
    let nb = g.value(b).numel();
    if na != nb {
        return Err(AdError::ShapeMismatch { op: "cosine", lhs: g.shape(a).to_vec(), rhs: g.shape(b).to_vec() }.into());
    }
    let fa = g.reshape(a, [na])?;
    let fb = g.reshape(b, [nb])?;
    let la = g.l2_norm(fa)?;
    let lb = g.l2_norm(fb)?;
    if g.item(la)? == 0.0 || g.item(lb)? == 0.0 {
        return Err(Error::ZeroNorm("lightness map"));
    }
    let d = g.dot(fa, fb)?;
    let den = g.mul(la, lb)?;
    Ok(g.div(d, den)?)
}

/// Cosine between the long-scale lightness of the persistent map and of the
/// relit image, signed per `sign`.
/// Flattened `x` minus its mean. Lightness maps are positive, so their raw
/// cosine sits near 1 whatever the lighting; centering makes it a correlation.
fn centered(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).numel();
    let flat = g.reshape(x, [n])?;
    let m = g.mean(flat)?;
    let m = g.reshape(m, [1])?;
    let m = g.repeat(m, n)?;
    Ok(g.sub(flat, m)?)
}

pub fn decorrelation_loss(g: &mut Graph, persistent: Var, relit: Var, sigma_l: f64, sign: DecoSign) -> Result<Var> {
    if g.shape(persistent)[1..] != g.shape(relit)[1..] {
        return Err(Error::dims("decorrelation spatial dims", g.shape(persistent), g.shape(relit)));
    }
    let la = percept::lightness_map(g, persistent, sigma_l)?;
    let la = centered(g, la)?;
    let lr = percept::lightness_map(g, relit, sigma_l)?;
    let lr = centered(g, lr)?;
    let c = cosine(g, la, lr)?;
    match sign {
        DecoSign::Penalty => Ok(c),
        DecoSign::Printed => Ok(g.neg(c)?),
    }
}

/// Tunables of the objective that are not loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Transient smoothing scale; defaults to resolution / 16.
    pub sigma_t: Option<f64>,
    /// Side of the pooled transient map.
    pub transient_res: usize,
    /// Lightness smoothing scale; defaults to resolution / 4.
    pub sigma_l: Option<f64>,
    /// Feature levels of the perceptual term.
    pub levels: Vec<usize>,
    pub gram_jitter: f64,
    pub diversity_clamp: f64,
    pub percept_seed: u64,
}

impl ObjectiveConfig {
    pub fn sigma_t_for(&self, resolution: usize) -> f64 {
        self.sigma_t.unwrap_or(resolution as f64 / 16.0)
    }

    pub fn sigma_l_for(&self, resolution: usize) -> f64 {
        self.sigma_l.unwrap_or(resolution as f64 / 4.0)
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            sigma_t: None,
            transient_res: 8,
            sigma_l: None,
            levels: vec![0, 1, 2],
            gram_jitter: 1e-6,
            diversity_clamp: 1e4,
            percept_seed: 0,
        }
    }
}

/// One edited sample in a batch.
#[derive(Clone, Copy, Debug)]
pub struct EditedSample {
    pub index: usize,
    pub pixels: Var,
    pub triple: TripleVars,
    pub logits: Option<Var>,
}

/// Original image decomposition plus its edits.
#[derive(Clone, Debug)]
pub struct Batch {
    pub original: TripleVars,
    pub edits: Vec<EditedSample>,
}

/// Resolved objective: weights, smoothing scales and feature extractors.
#[derive(Clone, Debug)]
pub struct Objective {
    pub weights: LossWeights,
    pub sigma_t: f64,
    pub sigma_l: f64,
    pub transient_res: usize,
    pub levels: Vec<usize>,
    pub jitter: f64,
    pub clamp: f64,
    rgb: FeaturePyramid,
    stacked: FeaturePyramid,
}

impl Objective {
    pub fn new(cfg: &ObjectiveConfig, weights: LossWeights, resolution: usize) -> Result<Self> {
        weights.validate()?;
        let depth = resolution.max(2).ilog2() as usize;
        Ok(Self {
            weights: weights.effective(),
            sigma_t: cfg.sigma_t_for(resolution),
            sigma_l: cfg.sigma_l_for(resolution),
            transient_res: cfg.transient_res,
            levels: cfg.levels.clone(),
            jitter: cfg.gram_jitter,
            clamp: cfg.diversity_clamp,
            rgb: FeaturePyramid::new(cfg.percept_seed, 3, depth)?,
            stacked: FeaturePyramid::new(cfg.percept_seed, 4, depth)?,
        })
    }

    pub fn mode(&self) -> Mode {
        self.weights.mode
    }

    /// Extractor for 3-channel images.
    pub fn rgb_pyramid(&self) -> &FeaturePyramid {
        &self.rgb
    }

    /// The component that must stay fixed: albedo, or stacked `(S, G)`.
    pub fn persistent_map(&self, g: &mut Graph, t: &TripleVars) -> Result<Var> {
        match self.mode() {
            Mode::Relight => Ok(t.albedo),
            Mode::Recolor => Ok(g.concat(&[t.shading, t.gloss])?),
        }
    }

    /// Unit vector of the component that should vary across directions.
    pub fn diversity_vector(&self, g: &mut Graph, t: &TripleVars) -> Result<Var> {
        match self.mode() {
            Mode::Relight => percept::transient_vector(g, t.shading, t.gloss, self.sigma_t, self.transient_res),
            Mode::Recolor => percept::smoothed_unit_vector(g, t.albedo, self.sigma_t, self.transient_res),
        }
    }

    fn pyramid_for(&self, channels: usize) -> &FeaturePyramid {
        if channels == 3 {
            &self.rgb
        } else {
            &self.stacked
        }
    }

    /// Overall weighted loss over a batch. Per-edit terms are averaged over the
    /// edits; diversity is computed once over all edits.
    pub fn total(&self, g: &mut Graph, batch: &Batch) -> Result<(Var, LossReport)> {
        let w = &self.weights;
        let k = batch.edits.len();
        if k == 0 {
            return Err(Error::Config("loss batch has no edits".into()));
        }
        let inv_k = 1.0 / k as f64;
        let orig = self.persistent_map(g, &batch.original)?;
        let pyramid = self.pyramid_for(g.shape(orig)[0]).clone();

        let mut cons = g.scalar(0.0);
        let mut per = g.scalar(0.0);
        let mut dist = g.scalar(0.0);
        let mut deco = g.scalar(0.0);
        let mut div_vectors = Vec::with_capacity(k);
        for e in &batch.edits {
            let edited = self.persistent_map(g, &e.triple)?;
            let c = const_loss(g, orig, edited, w.delta)?;
            cons = g.add(cons, c)?;
            let p = perceptual_loss(g, &pyramid, orig, edited, &self.levels)?;
            per = g.add(per, p)?;
            if let Some(logits) = e.logits {
                let d = distinction_loss(g, logits, e.index)?;
                dist = g.add(dist, d)?;
            }
            if self.mode() == Mode::Relight {
                let d = decorrelation_loss(g, batch.original.albedo, e.pixels, self.sigma_l, w.deco_sign)?;
                deco = g.add(deco, d)?;
            }
            div_vectors.push(self.diversity_vector(g, &e.triple)?);
        }
        let cons = g.scale(cons, inv_k)?;
        let per = g.scale(per, inv_k)?;
        let dist = g.scale(dist, inv_k)?;
        let deco = g.scale(deco, inv_k)?;
        let div = if div_vectors.len() >= 2 {
            diversity_loss(g, &div_vectors, self.jitter, self.clamp)?
        } else {
            g.scalar(0.0)
        };

        let mut total = g.scalar(0.0);
        for (term, lambda) in [
            (cons, w.lambda_const),
            (per, w.lambda_per),
            (div, w.lambda_div),
            (dist, w.lambda_dist),
            (deco, w.lambda_deco),
        ] {
            let t = g.scale(term, lambda)?;
            total = g.add(total, t)?;
        }
        let report = LossReport {
            consistency: g.item(cons)?,
            perceptual: g.item(per)?,
            diversity: g.item(div)?,
            distinction: g.item(dist)?,
            decorrelation: g.item(deco)?,
            total: g.item(total)?,
        };
        Ok((total, report))
    }
}
