//! Intrinsic decomposition `image = A * S + G`.
//!
//! Two implementations share the [`Decomposer`] interface: an oracle that
//! returns the generator's ground truth, and an image-only Retinex-style
//! estimator. Both are differentiable graph functions so the direction search
//! can backpropagate through either.

use diffcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::percept::{blur, channel_mean};
use crate::scenegen::{SceneImage, SceneVars};
use crate::{Error, Result};

const MIN_SHADING: f64 = 0.02;

/// Albedo `[3,H,W]`, shading `[1,H,W]`, gloss `[3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionTriple {
    pub albedo: Tensor,
    pub shading: Tensor,
    pub gloss: Tensor,
}

impl DecompositionTriple {
    /// `A * S + G`, elementwise with `S` broadcast over channels.
    pub fn reconstruct(&self) -> Tensor {
        let hw = self.shading.numel();
        let data = self
            .albedo
            .data()
            .iter()
            .zip(self.gloss.data())
            .enumerate()
            .map(|(k, (a, g))| a * self.shading.data()[k % hw] + g)
            .collect();
        Tensor::new(self.albedo.shape().to_vec(), data).expect("albedo shape")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TripleVars {
    pub albedo: Var,
    pub shading: Var,
    pub gloss: Var,
}

impl TripleVars {
    pub fn collect(&self, g: &Graph) -> DecompositionTriple {
        DecompositionTriple {
            albedo: g.value(self.albedo).clone(),
            shading: g.value(self.shading).clone(),
            gloss: g.value(self.gloss).clone(),
        }
    }
}

pub trait Decomposer: Send + Sync {
    fn name(&self) -> &'static str;

    fn decompose(&self, g: &mut Graph, scene: &SceneVars) -> Result<TripleVars>;
}

/// Returns the renderer's own decomposition.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleDecomposer;

impl Decomposer for OracleDecomposer {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn decompose(&self, _g: &mut Graph, scene: &SceneVars) -> Result<TripleVars> {
        Ok(TripleVars { albedo: scene.albedo, shading: scene.shading, gloss: scene.gloss })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetinexDecomposer {
    pub sigma_s: f64,
    pub gloss_quantile: f64,
}

impl RetinexDecomposer {
    pub fn for_resolution(resolution: usize) -> Self {
        Self { sigma_s: resolution as f64 / 8.0, gloss_quantile: 0.95 }
    }
}

impl Decomposer for RetinexDecomposer {
    fn name(&self) -> &'static str {
        "retinex"
    }

    fn decompose(&self, g: &mut Graph, scene: &SceneVars) -> Result<TripleVars> {
        retinex_graph(g, scene.pixels, self.sigma_s, self.gloss_quantile)
    }
}

/// Config-level choice of decomposer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DecomposerKind {
    #[default]
    Oracle,
    Retinex {
        /// Defaults to resolution / 8.
        #[serde(default)]
        sigma_s: Option<f64>,
        #[serde(default = "default_quantile")]
        gloss_quantile: f64,
    },
}

fn default_quantile() -> f64 {
    0.95
}

impl DecomposerKind {
    pub fn build(&self, resolution: usize) -> Box<dyn Decomposer> {
        match self {
            DecomposerKind::Oracle => Box::new(OracleDecomposer),
            DecomposerKind::Retinex { sigma_s, gloss_quantile } => Box::new(RetinexDecomposer {
                sigma_s: sigma_s.unwrap_or(resolution as f64 / 8.0),
                gloss_quantile: *gloss_quantile,
            }),
        }
    }
}

pub fn oracle_decompose(img: &SceneImage) -> Result<DecompositionTriple> {
    let gt = img.ground_truth.as_ref().ok_or(Error::MissingGroundTruth)?;
    Ok(DecompositionTriple { albedo: gt.albedo.clone(), shading: gt.shading.clone(), gloss: gt.gloss.clone() })
}

pub fn retinex_decompose(img: &SceneImage, sigma_s: f64, gloss_quantile: f64) -> Result<DecompositionTriple> {
    let mut g = Graph::new();
    let px = g.constant(img.pixels.clone());
    let t = retinex_graph(&mut g, px, sigma_s, gloss_quantile)?;
    Ok(t.collect(&g))
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q.clamp(0.0, 1.0)) * (v.len() - 1) as f64).floor() as usize;
    v[idx]
}

/// Image-only decomposition.
///
/// Gloss is the positive high-pass of luminance above its `gloss_quantile`,
/// colored by the pixel's chroma. Shading is the blurred remaining luminance
/// floored at 0.02, and albedo is the residual `(I - G) / S` clamped to
/// `[0, 1]`. The gloss mask is held constant under differentiation.
pub fn retinex_graph(g: &mut Graph, pixels: Var, sigma_s: f64, gloss_quantile: f64) -> Result<TripleVars> {
    let s = g.shape(pixels).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dims("retinex input", "[3, H, W]", s));
    }
    let lum = channel_mean(g, pixels)?;
    let smooth = blur(g, lum, sigma_s)?;
    let detail = g.sub(lum, smooth)?;
    let highpass = g.relu(detail)?;
    let hp = g.value(highpass).data();
    let threshold = quantile(hp, gloss_quantile);
    let mask: Vec<f64> = hp.iter().map(|&x| if x > threshold { 1.0 } else { 0.0 }).collect();
    let mask = g.constant(Tensor::new(g.shape(highpass).to_vec(), mask)?);
    let gloss_lum = g.mul(highpass, mask)?;

    let safe_lum = g.clamp_min(lum, 1e-6)?;
    let safe_lum3 = g.repeat(safe_lum, 3)?;
    let chroma = g.div(pixels, safe_lum3)?;
    let gloss_lum3 = g.repeat(gloss_lum, 3)?;
    let gloss = g.mul(chroma, gloss_lum3)?;

    let diffuse = g.sub(lum, gloss_lum)?;
    let shading = blur(g, diffuse, sigma_s)?;
    let shading = g.clamp_min(shading, MIN_SHADING)?;
    let shading3 = g.repeat(shading, 3)?;
    let residual = g.sub(pixels, gloss)?;
    let albedo = g.div(residual, shading3)?;
    let albedo = g.clamp(albedo, 0.0, 1.0)?;
    Ok(TripleVars { albedo, shading, gloss })
}
