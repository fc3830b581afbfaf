//! Synthetic differentiable scene generator.
//!
//! A seeded mapping MLP turns a latent `z` into a style vector that is
//! broadcast to `L` layers. The synthesis network mixes the flattened style
//! stack through two fixed random matrices: `W_P` drives the persistent scene
//! (albedo patch colors and heightfield weights) and `W_Q` drives lighting
//! (light direction, diffuse, ambient and gloss strength). Images are rendered
//! as `clamp01(A * S + G)` with Lambertian shading and a Phong-style lobe, so
//! every image carries an exact intrinsic decomposition. Albedo is a patch
//! grid darkened in the heightfield's hollows, so geometry edits show up in
//! the albedo just as moving objects would in a real image.
//!
//! Because the persistent parameters are a linear function of the style stack,
//! `null(W_P)` is exactly the set of edits that leave albedo and geometry
//! untouched. It is exposed for evaluation only.

use std::f64::consts::PI;
use std::sync::Arc;

use diffcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::rng::{self, stream};
use crate::{Error, Result};

pub const LIGHTING_PARAMS: usize = 5;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Latent dimension.
    pub dz: usize,
    /// Style dimension per layer.
    pub d: usize,
    /// Number of synthesis layers.
    pub l: usize,
    /// Square image side.
    pub resolution: usize,
    /// Albedo is a `K x K` grid of constant patches.
    pub n_albedo_patches: usize,
    pub n_height_basis: usize,
    pub gloss_exponent: f64,
    /// Amplitude of heightfield slopes.
    pub relief: f64,
    /// Largest light zenith angle in radians (below the horizon is unreachable).
    pub max_zenith: f64,
    /// Fraction of albedo lost in the deepest hollows; 0 gives flat patches.
    pub weathering: f64,
    /// Gain applied after both mixing matrices. The mapping output is shrunk
    /// by the same factor, so sampled scenes are unaffected while a fixed-norm
    /// edit moves the scene parameters `mix_gain` times further.
    pub mix_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dz: 32,
            d: 32,
            l: 4,
            resolution: 64,
            n_albedo_patches: 4,
            n_height_basis: 8,
            gloss_exponent: 16.0,
            relief: 0.6,
            max_zenith: 1.3,
            weathering: 0.9,
            mix_gain: 5.0,
        }
    }
}

impl GeneratorConfig {
    pub fn style_len(&self) -> usize {
        self.l * self.d
    }

    pub fn albedo_params(&self) -> usize {
        3 * self.n_albedo_patches * self.n_albedo_patches
    }

    pub fn persistent_params(&self) -> usize {
        self.albedo_params() + self.n_height_basis
    }
}

/// Latent noise vector fed to the mapping network.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentZ(pub Vec<f64>);

impl LatentZ {
    pub fn sample(rng: &mut rand_chacha::ChaCha8Rng, dz: usize) -> Self {
        LatentZ(rng::normal_vec(rng, dz))
    }
}

/// Per-layer style stack `w+`, shape `[L, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode(Tensor);

impl StyleCode {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 || !t.is_finite() {
            return Err(Error::dims("style code", "finite [L, D]", t.shape()));
        }
        Ok(StyleCode(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// `self + scale * delta`, with `delta` flattened row-major.
    pub fn offset_by(&self, delta: &[f64], scale: f64) -> Result<StyleCode> {
        if delta.len() != self.0.numel() {
            return Err(Error::dims("direction length", self.0.numel(), delta.len()));
        }
        let data = self.0.data().iter().zip(delta).map(|(w, d)| w + scale * d).collect();
        StyleCode::new(Tensor::new(self.0.shape().to_vec(), data)?)
    }
}

/// Scene parameters behind a rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// Patch colors, channel-major `[3, K*K]`.
    pub albedo_colors: Vec<f64>,
    pub height_weights: Vec<f64>,
    pub zenith: f64,
    pub azimuth: f64,
    pub diffuse: f64,
    pub ambient: f64,
    pub gloss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `[3, H, W]`
    pub albedo: Tensor,
    /// `[1, H, W]`
    pub shading: Tensor,
    /// `[3, H, W]`
    pub gloss: Tensor,
    /// `A * S + G` before clamping.
    pub unclamped: Tensor,
    pub params: SceneParams,
}

/// Rendered image in `[3, H, W]` layout with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub pixels: Tensor,
    pub ground_truth: Option<GroundTruth>,
}

impl SceneImage {
    pub fn from_pixels(pixels: Tensor) -> Self {
        Self { pixels, ground_truth: None }
    }

    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Graph handles for one synthesized scene.
#[derive(Clone, Copy, Debug)]
pub struct SceneVars {
    pub pixels: Var,
    pub unclamped: Var,
    pub albedo: Var,
    pub shading: Var,
    pub gloss: Var,
    /// Sigmoid of the persistent parameters.
    pub persistent: Var,
    /// Sigmoid of the lighting parameters.
    pub lighting: Var,
}

struct Dense {
    weight: Tensor,
    bias: Tensor,
}

/// Immutable generator built from a [`GeneratorConfig`].
pub struct Generator {
    cfg: GeneratorConfig,
    mapping: Vec<Dense>,
    w_p: Tensor,
    w_q: Tensor,
    albedo_index: Vec<usize>,
    basis_dx: Tensor,
    basis_dy: Tensor,
    basis_h: Tensor,
    null_basis: Tensor,
}

/// Slope of the sigmoid turning unit-amplitude height into hollowness.
const WEATHER_GAIN: f64 = 3.0;

fn unit_rows(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let data = (0..rows).flat_map(|_| rng::random_direction(rng, cols, 1.0)).collect();
    Ok(Tensor::new([rows, cols], data)?)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormalizes `v` against `basis` (two passes), returning the residual norm.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for q in basis {
            let c = dot(v, q);
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
        }
    }
    dot(v, v).sqrt()
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        let GeneratorConfig { seed, dz, d, l, resolution: res, n_albedo_patches: k, n_height_basis: nb, .. } = cfg;
        if dz == 0 || d == 0 || l == 0 || k == 0 || nb == 0 {
            return Err(Error::Config("generator dims must be positive".into()));
        }
        if res % k != 0 {
            return Err(Error::Config(format!("resolution {res} not divisible by albedo grid {k}")));
        }
        if cfg.gloss_exponent < 1.0 {
            return Err(Error::Config("gloss_exponent must be >= 1".into()));
        }
        if !(cfg.mix_gain > 0.0 && cfg.mix_gain.is_finite()) {
            return Err(Error::Config(format!("mix_gain must be positive, got {}", cfg.mix_gain)));
        }
        if !(0.0..1.0).contains(&cfg.weathering) {
            return Err(Error::Config(format!("weathering must be in [0, 1), got {}", cfg.weathering)));
        }
        let ld = cfg.style_len();
        let np = cfg.persistent_params();
        if np + LIGHTING_PARAMS >= ld || ld - np < 4 {
            return Err(Error::Config(format!(
                "style stack of {ld} dims cannot host {np} persistent + {LIGHTING_PARAMS} lighting rows with a 4-dim relighting null space"
            )));
        }

        let mut mrng = rng::seeded(seed, stream::MAPPING);
        let gain = (2.0 / (1.0 + LEAK * LEAK)).sqrt();
        let mut mapping = Vec::new();
        for (i, (fan_in, fan_out)) in [(dz, d), (d, d), (d, d)].into_iter().enumerate() {
            let out_scale = if i == 2 { 1.0 / cfg.mix_gain } else { 1.0 };
            let std = gain / (fan_in as f64).sqrt() * out_scale;
            let w = rng::normal_vec(&mut mrng, fan_in * fan_out).into_iter().map(|x| x * std).collect();
            let b = rng::normal_vec(&mut mrng, fan_out).into_iter().map(|x| 0.1 * out_scale * x).collect();
            mapping.push(Dense { weight: Tensor::new([fan_out, fan_in], w)?, bias: Tensor::new([fan_out, 1], b)? });
        }

        let w_p = unit_rows(&mut rng::seeded(seed, stream::MIX_PERSISTENT), np, ld)?;
        let w_q = unit_rows(&mut rng::seeded(seed, stream::MIX_LIGHTING), LIGHTING_PARAMS, ld)?;

        let mut row_space: Vec<Vec<f64>> = Vec::with_capacity(np);
        for i in 0..np {
            let mut v = w_p.row(i).to_vec();
            let norm = orthogonalize(&mut v, &row_space);
            if norm < 1e-8 {
                return Err(Error::Config("persistent mixing matrix is rank deficient".into()));
            }
            v.iter_mut().for_each(|x| *x /= norm);
            row_space.push(v);
        }
        let nullity = ld - np;
        let mut all = row_space;
        for j in 0..ld {
            if all.len() == ld {
                break;
            }
            let mut e = vec![0.0; ld];
            e[j] = 1.0;
            let norm = orthogonalize(&mut e, &all);
            if norm > 1e-3 {
                e.iter_mut().for_each(|x| *x /= norm);
                all.push(e);
            }
        }
        let cols = &all[np..];
        let mut null = vec![0.0; ld * nullity];
        for (c, v) in cols.iter().enumerate() {
            for (r, x) in v.iter().enumerate() {
                null[r * nullity + c] = *x;
            }
        }
        let null_basis = Tensor::new([ld, nullity], null)?;

        let patch = res / k;
        let mut albedo_index = Vec::with_capacity(3 * res * res);
        for c in 0..3 {
            for y in 0..res {
                for x in 0..res {
                    albedo_index.push(c * k * k + (y / patch) * k + x / patch);
                }
            }
        }

        // Height basis b(u,v) = sin(2 pi f.(u,v) + phase) / (2 pi |f|). Its
        // gradient has unit amplitude; weathering uses the unit sine itself.
        let mut hrng = rng::seeded(seed, stream::HEIGHT_BASIS);
        let mut dx = Vec::with_capacity(nb * res * res);
        let mut dy = Vec::with_capacity(nb * res * res);
        let mut hs = Vec::with_capacity(nb * res * res);
        for _ in 0..nb {
            use rand::Rng;
            let fu = hrng.random_range(-3i32..=3) as f64;
            let mut fv = hrng.random_range(-3i32..=3) as f64;
            if fu == 0.0 && fv == 0.0 {
                fv = 1.0;
            }
            let phase = hrng.random_range(0.0..2.0 * PI);
            let fnorm = (fu * fu + fv * fv).sqrt();
            for y in 0..res {
                for x in 0..res {
                    let u = (x as f64 + 0.5) / res as f64;
                    let v = (y as f64 + 0.5) / res as f64;
                    let arg = 2.0 * PI * (fu * u + fv * v) + phase;
                    let c = arg.cos();
                    hs.push(arg.sin());
                    dx.push(fu / fnorm * c);
                    dy.push(fv / fnorm * c);
                }
            }
        }
        let basis_dx = Tensor::new([nb, res * res], dx)?;
        let basis_dy = Tensor::new([nb, res * res], dy)?;
        let basis_h = Tensor::new([nb, res * res], hs)?;

        Ok(Self { cfg, mapping, w_p, w_q, albedo_index, basis_dx, basis_dy, basis_h, null_basis })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Persistent mixing matrix `W_P`, `[albedo + height rows, L*D]`.
    pub fn persistent_mixing(&self) -> &Tensor {
        &self.w_p
    }

    /// Lighting mixing matrix `W_Q`, `[5, L*D]`.
    pub fn lighting_mixing(&self) -> &Tensor {
        &self.w_q
    }

    /// Orthonormal basis of `null(W_P)` as columns, `[L*D, L*D - rows(W_P)]`.
    pub fn lighting_null_basis(&self) -> &Tensor {
        &self.null_basis
    }

    /// Mapping network in the graph: `z [Dz] -> w [D]`.
    pub fn map_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let dz = self.cfg.dz;
        if g.value(z).numel() != dz {
            return Err(Error::dims("latent length", dz, g.shape(z)));
        }
        let mut h = g.reshape(z, [dz, 1])?;
        for (i, layer) in self.mapping.iter().enumerate() {
            let w = g.constant(layer.weight.clone());
            let b = g.constant(layer.bias.clone());
            h = g.matmul(w, h)?;
            h = g.add(h, b)?;
            if i + 1 < self.mapping.len() {
                h = g.leaky_relu(h, LEAK)?;
            }
        }
        Ok(g.reshape(h, [self.cfg.d])?)
    }

    /// `M(z)` broadcast to all layers, as a graph node `[L, D]`.
    pub fn map_broadcast_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let w = self.map_graph(g, z)?;
        let w = g.reshape(w, [1, self.cfg.d])?;
        Ok(g.repeat(w, self.cfg.l)?)
    }

    pub fn map_latent(&self, z: &LatentZ) -> Result<StyleCode> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::vector(z.0.clone()));
        let w = self.map_broadcast_graph(&mut g, zv)?;
        StyleCode::new(g.value(w).clone())
    }

    pub fn sample_style(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Result<StyleCode> {
        self.map_latent(&LatentZ::sample(rng, self.cfg.dz))
    }

    /// Differentiable synthesis of `w_plus` (`[L, D]`).
    pub fn synthesize_graph(&self, g: &mut Graph, w_plus: Var) -> Result<SceneVars> {
        let cfg = &self.cfg;
        let (ld, res, nb) = (cfg.style_len(), cfg.resolution, cfg.n_height_basis);
        let hw = res * res;
        if g.shape(w_plus) != [cfg.l, cfg.d] {
            return Err(Error::dims("style code shape", [cfg.l, cfg.d], g.shape(w_plus)));
        }
        let wv = g.reshape(w_plus, [ld, 1])?;
        let wp = g.constant(self.w_p.clone());
        let p = g.matmul(wp, wv)?;
        let p = g.scale(p, cfg.mix_gain)?;
        let persistent = g.sigmoid(p)?;
        let wq = g.constant(self.w_q.clone());
        let q = g.matmul(wq, wv)?;
        let q = g.scale(q, cfg.mix_gain)?;
        let lighting = g.sigmoid(q)?;

        let patches = g.gather(persistent, Arc::new(self.albedo_index.clone()), [3, res, res])?;

        let heights = g.slice(persistent, cfg.albedo_params(), nb)?;
        let heights = g.offset(heights, -0.5)?;
        let heights = g.scale(heights, 2.0 * cfg.relief)?;
        let heights = g.reshape(heights, [1, nb])?;

        // Hollows (low height) collect dirt: A = patches * (1 - weathering * sigmoid(-gain * h)).
        let bh = g.constant(self.basis_h.clone());
        let h = g.matmul(heights, bh)?;
        let h = g.scale(h, -WEATHER_GAIN)?;
        let hollow = g.sigmoid(h)?;
        let keep = g.scale(hollow, -cfg.weathering)?;
        let keep = g.offset(keep, 1.0)?;
        let keep = g.reshape(keep, [1, res, res])?;
        let keep = g.repeat(keep, 3)?;
        let albedo = g.mul(patches, keep)?;
        let bx = g.constant(self.basis_dx.clone());
        let by = g.constant(self.basis_dy.clone());
        let gx = g.matmul(heights, bx)?;
        let gy = g.matmul(heights, by)?;
        let gx2 = g.square(gx)?;
        let gy2 = g.square(gy)?;
        let slope = g.add(gx2, gy2)?;
        let slope = g.offset(slope, 1.0)?;
        let nz = g.powf(slope, -0.5)?;
        let nx = g.mul(gx, nz)?;
        let nx = g.neg(nx)?;
        let ny = g.mul(gy, nz)?;
        let ny = g.neg(ny)?;

        let s0 = g.select(lighting, 0)?;
        let zenith = g.scale(s0, cfg.max_zenith)?;
        let s1 = g.select(lighting, 1)?;
        let azimuth = g.scale(s1, 2.0 * PI)?;
        let azimuth = g.offset(azimuth, -PI)?;
        let sin_z = g.sin(zenith)?;
        let lz = g.cos(zenith)?;
        let cos_a = g.cos(azimuth)?;
        let sin_a = g.sin(azimuth)?;
        let lx = g.mul(sin_z, cos_a)?;
        let ly = g.mul(sin_z, sin_a)?;
        let s2 = g.select(lighting, 2)?;
        let kd = g.scale(s2, 1.5)?;
        let s3 = g.select(lighting, 3)?;
        let ka = g.scale(s3, 0.45)?;
        let ka = g.offset(ka, 0.05)?;
        let s4 = g.select(lighting, 4)?;
        let kg = g.scale(s4, 0.5)?;

        let t1 = g.mul(nx, lx)?;
        let t2 = g.mul(ny, ly)?;
        let t3 = g.mul(nz, lz)?;
        let ndl = g.add(t1, t2)?;
        let ndl = g.add(ndl, t3)?;
        let lambert = g.relu(ndl)?;
        let diffuse = g.mul(kd, lambert)?;
        let shading = g.add(ka, diffuse)?;
        let shading = g.reshape(shading, [1, res, res])?;

        // Reflected light direction r = 2 (n.l) n - l against view v = (0, 0, 1).
        let rz = g.mul(ndl, nz)?;
        let rz = g.scale(rz, 2.0)?;
        let rz = g.sub(rz, lz)?;
        let rz = g.relu(rz)?;
        let lobe = g.powf(rz, cfg.gloss_exponent)?;
        let gloss = g.mul(kg, lobe)?;
        let gloss = g.reshape(gloss, [1, res, res])?;
        let gloss = g.repeat(gloss, 3)?;

        let shading3 = g.repeat(shading, 3)?;
        let lit = g.mul(albedo, shading3)?;
        let unclamped = g.add(lit, gloss)?;
        let pixels = g.clamp(unclamped, 0.0, 1.0)?;
        debug_assert_eq!(g.value(pixels).numel(), 3 * hw);
        Ok(SceneVars { pixels, unclamped, albedo, shading, gloss, persistent, lighting })
    }

    /// Renders `w_plus` with ground truth attached.
    pub fn synthesize(&self, w_plus: &StyleCode) -> Result<SceneImage> {
        let mut g = Graph::new();
        let w = g.constant(w_plus.tensor().clone());
        let v = self.synthesize_graph(&mut g, w)?;
        Ok(self.collect_scene(&g, &v))
    }

    /// Copies a synthesized scene out of a graph.
    pub fn collect_scene(&self, g: &Graph, v: &SceneVars) -> SceneImage {
        let cfg = &self.cfg;
        let sp = g.value(v.persistent).data();
        let sq = g.value(v.lighting).data();
        let params = SceneParams {
            albedo_colors: sp[..cfg.albedo_params()].to_vec(),
            height_weights: sp[cfg.albedo_params()..].iter().map(|h| (h - 0.5) * 2.0 * cfg.relief).collect(),
            zenith: sq[0] * cfg.max_zenith,
            azimuth: sq[1] * 2.0 * PI - PI,
            diffuse: 1.5 * sq[2],
            ambient: 0.05 + 0.45 * sq[3],
            gloss: 0.5 * sq[4],
        };
        SceneImage {
            pixels: g.value(v.pixels).clone(),
            ground_truth: Some(GroundTruth {
                albedo: g.value(v.albedo).clone(),
                shading: g.value(v.shading).clone(),
                gloss: g.value(v.gloss).clone(),
                unclamped: g.value(v.unclamped).clone(),
                params,
            }),
        }
    }
}
