//! Quantitative evaluation of direction sets.
//!
//! Every metric synthesizes its own scenes from a dedicated random stream, so
//! results depend only on the evaluation seed and never on the training run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use diffcore::{AdamConfig, AdamState, Graph, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dirsearch::{apply_direction, classify_pair, Classifier, DirectionSet};
use crate::losses::{self, DecoSign, Mode, ObjectiveConfig};
use crate::percept::{self, FeaturePyramid};
use crate::rng::{self, stream};
use crate::scenegen::{Generator, GroundTruth, LatentZ, SceneImage, StyleCode};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// Scenes for consistency, Gram and decorrelation metrics.
    pub n_scenes: usize,
    /// Held-out scenes for classifier accuracy.
    pub n_distinction: usize,
    /// Images per set in the distribution-shift comparison.
    pub n_shift: usize,
    pub inversion_restarts: usize,
    pub inversion_steps: usize,
    /// Number of self-inversion targets.
    pub inversion_targets: usize,
    pub inversion_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 1000,
            n_scenes: 100,
            n_distinction: 200,
            n_shift: 256,
            inversion_restarts: 8,
            inversion_steps: 2000,
            inversion_targets: 4,
            inversion_lr: 0.05,
        }
    }
}

fn gt(img: &SceneImage) -> Result<&GroundTruth> {
    img.ground_truth.as_ref().ok_or(Error::MissingGroundTruth)
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fresh evaluation style codes from one stream.
pub fn eval_styles(gen: &Generator, seed: u64, stream: u64, n: usize) -> Result<Vec<StyleCode>> {
    let mut r = rng::seeded(seed, stream);
    (0..n).map(|_| gen.sample_style(&mut r)).collect()
}

/// Random directions with the same row norms as `set`.
pub fn random_like(set: &DirectionSet, seed: u64) -> DirectionSet {
    let mut out = DirectionSet::random(set.len(), set.l, set.d, 1.0, set.mode, seed, stream::RANDOM_BASELINE);
    let norms = set.row_norms();
    let mut data = out.dirs().data().to_vec();
    let n = set.l * set.d;
    for (i, norm) in norms.iter().enumerate() {
        data[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= norm);
    }
    out = DirectionSet::new(Tensor::new([set.len(), n], data).expect("shape"), set.mode, set.l, set.d, seed)
        .expect("shape");
    out
}

/// Per-direction mean absolute change of the ground-truth persistent maps:
/// albedo in relight mode, shading and gloss in recolor mode.
pub fn consistency_error(set: &DirectionSet, gen: &Generator, styles: &[StyleCode]) -> Result<Vec<f64>> {
    set.check_generator(gen.config())?;
    let mut err = vec![0.0; set.len()];
    for w in styles {
        let orig = gen.synthesize(w)?;
        let o = gt(&orig)?;
        for (i, e) in err.iter_mut().enumerate() {
            let edited = gen.synthesize(&apply_direction(w, set, i, 1.0)?)?;
            let r = gt(&edited)?;
            *e += match set.mode {
                Mode::Relight => mean_abs_diff(o.albedo.data(), r.albedo.data()),
                Mode::Recolor => {
                    let ns = o.shading.numel() as f64;
                    let ng = o.gloss.numel() as f64;
                    (mean_abs_diff(o.shading.data(), r.shading.data()) * ns
                        + mean_abs_diff(o.gloss.data(), r.gloss.data()) * ng)
                        / (ns + ng)
                }
            };
        }
    }
    Ok(err.into_iter().map(|e| e / styles.len() as f64).collect())
}

/// Per-direction `|W_P d| / |d|`; zero for pure-lighting directions.
pub fn subspace_alignment(set: &DirectionSet, gen: &Generator) -> Result<Vec<f64>> {
    set.check_generator(gen.config())?;
    let wp = gen.persistent_mixing();
    let (rows, cols) = (wp.shape()[0], wp.shape()[1]);
    (0..set.len())
        .map(|i| {
            let d = set.direction(i)?;
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm("direction"));
            }
            let proj: f64 = (0..rows)
                .map(|r| {
                    let s: f64 = wp.data()[r * cols..(r + 1) * cols].iter().zip(d).map(|(a, b)| a * b).sum();
                    s * s
                })
                .sum();
            Ok(proj.sqrt() / norm)
        })
        .collect()
}

/// Unit vector of the maps a direction is meant to vary.
fn varying_vector(mode: Mode, gt: &GroundTruth, sigma_t: f64, out_res: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v = match mode {
        Mode::Relight => {
            let s = g.constant(gt.shading.clone());
            let gl = g.constant(gt.gloss.clone());
            percept::transient_vector(&mut g, s, gl, sigma_t, out_res)?
        }
        Mode::Recolor => {
            let a = g.constant(gt.albedo.clone());
            percept::smoothed_unit_vector(&mut g, a, sigma_t, out_res)?
        }
    };
    Ok(g.value(v).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GramSummary {
    /// Ascending eigenvalues of the mean Gram matrix.
    pub eigenvalues: Vec<f64>,
    /// Mean Gram matrix, row-major.
    pub gram: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

impl GramSummary {
    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Largest `|cos|` between the transients of two different directions.
    pub fn max_pairwise_cos(&self) -> f64 {
        let m = self.m;
        let mut best: f64 = 0.0;
        for i in 0..m {
            for j in 0..i {
                let c = self.gram[i * m + j] / (self.gram[i * m + i] * self.gram[j * m + j]).sqrt();
                best = best.max(c.abs());
            }
        }
        best
    }
}

/// Ascending eigenvalues of a symmetric matrix given row-major.
pub fn symmetric_eigenvalues(m: usize, data: &[f64]) -> Vec<f64> {
    let mat = DMatrix::from_row_slice(m, m, data);
    let sym = (&mat + mat.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Gram matrix of the edited transients, averaged over scenes.
pub fn gram_spectrum(
    set: &DirectionSet,
    gen: &Generator,
    styles: &[StyleCode],
    obj: &ObjectiveConfig,
) -> Result<GramSummary> {
    set.check_generator(gen.config())?;
    let res = gen.config().resolution;
    let sigma_t = obj.sigma_t_for(res);
    let m = set.len();
    let mut gram = vec![0.0; m * m];
    for w in styles {
        let mut ts = Vec::with_capacity(m);
        for i in 0..m {
            let img = gen.synthesize(&apply_direction(w, set, i, 1.0)?)?;
            ts.push(varying_vector(set.mode, gt(&img)?, sigma_t, obj.transient_res)?);
        }
        for i in 0..m {
            for j in 0..m {
                gram[i * m + j] += ts[i].iter().zip(&ts[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    let n = styles.len();
    gram.iter_mut().for_each(|x| *x /= n as f64);
    Ok(GramSummary { eigenvalues: symmetric_eigenvalues(m, &gram), gram, m, n })
}

/// Per-direction held-out accuracy of the classifier.
pub fn distinction_accuracy(
    set: &DirectionSet,
    clf: &Classifier,
    gen: &Generator,
    styles: &[StyleCode],
) -> Result<Vec<f64>> {
    set.check_generator(gen.config())?;
    if clf.outputs() != set.len() {
        return Err(Error::dims("classifier outputs", set.len(), clf.outputs()));
    }
    let mut hits = vec![0usize; set.len()];
    for w in styles {
        let orig = gen.synthesize(w)?;
        for (i, h) in hits.iter_mut().enumerate() {
            let edited = gen.synthesize(&apply_direction(w, set, i, 1.0)?)?;
            let logits = classify_pair(clf, &orig.pixels, &edited.pixels)?;
            let best = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap_or(0);
            if best == i {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / styles.len() as f64).collect())
}

/// Per-direction mean cosine between the original albedo lightness and the
/// relit image lightness.
pub fn decorrelation_coeff(
    set: &DirectionSet,
    gen: &Generator,
    styles: &[StyleCode],
    obj: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    set.check_generator(gen.config())?;
    let sigma_l = obj.sigma_l_for(gen.config().resolution);
    let mut acc = vec![0.0; set.len()];
    for w in styles {
        let orig = gen.synthesize(w)?;
        for (i, a) in acc.iter_mut().enumerate() {
            let edited = gen.synthesize(&apply_direction(w, set, i, 1.0)?)?;
            let mut g = Graph::new();
            let alb = g.constant(gt(&orig)?.albedo.clone());
            let px = g.constant(edited.pixels);
            let c = losses::decorrelation_loss(&mut g, alb, px, sigma_l, DecoSign::Penalty)?;
            *a += g.item(c)?;
        }
    }
    Ok(acc.into_iter().map(|a| a / styles.len() as f64).collect())
}

/// Gaussian summary of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`, symmetric.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Config(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let dim = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
            return Err(Error::dims("feature dimension", dim, bad.len()));
        }
        let mut mean = vec![0.0; dim];
        for s in samples {
            mean.iter_mut().zip(s).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; dim * dim];
        for s in samples {
            for i in 0..dim {
                let di = s[i] - mean[i];
                for j in 0..=i {
                    cov[i * dim + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in 0..=i {
                let v = cov[i * dim + j] / (n - 1) as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Ok(Self { mean, cov, n })
    }
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The cross term is evaluated as `Tr((sqrt(S1) S2 sqrt(S1))^(1/2))`, which is
/// symmetric, and negative eigenvalues are clipped to zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let dim = a.dim();
    if b.dim() != dim {
        return Err(Error::dims("feature dimension", dim, b.dim()));
    }
    let mu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let s1 = DMatrix::from_row_slice(dim, dim, &a.cov);
    let s2 = DMatrix::from_row_slice(dim, dim, &b.cov);
    let r1 = psd_sqrt(s1.clone());
    let inner = &r1 * &s2 * &r1;
    let cross: f64 =
        SymmetricEigen::new((&inner + inner.transpose()) * 0.5).eigenvalues.iter().map(|x| x.max(0.0).sqrt()).sum();
    Ok((mu + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Level used for distribution statistics.
pub const SHIFT_LEVEL: usize = 2;

/// Global-average-pooled level-2 features of an image.
pub fn pooled_features(pyramid: &FeaturePyramid, img: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let f = pyramid.extract(&mut g, x, &[SHIFT_LEVEL])?[0];
    let t = g.value(f);
    let c = t.shape()[0];
    let hw = t.numel() / c;
    Ok((0..c).map(|k| t.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftReport {
    pub n_per_set: usize,
    pub vanilla_b: f64,
    pub relight: f64,
    pub recolor: Option<f64>,
    pub both: Option<f64>,
}

impl ShiftReport {
    /// Edited relight set is further from vanilla than a second vanilla set, and
    /// the combined edit is at least as far as either single edit.
    pub fn ordering_holds(&self) -> bool {
        let single = self.relight > self.vanilla_b;
        match (self.recolor, self.both) {
            (Some(rc), Some(b)) => single && b >= self.relight && b >= rc,
            _ => single,
        }
    }
}

/// Frechet distance of edited sets against a vanilla reference set. Scene `k`
/// of an edited set uses direction `k mod M`.
pub fn distribution_shift_report(
    relight: &DirectionSet,
    recolor: Option<&DirectionSet>,
    gen: &Generator,
    n_per_set: usize,
    seed: u64,
    percept_seed: u64,
) -> Result<ShiftReport> {
    if n_per_set < 64 {
        return Err(Error::Config(format!("distribution shift needs >= 64 images per set, got {n_per_set}")));
    }
    relight.check_generator(gen.config())?;
    if let Some(rc) = recolor {
        rc.check_generator(gen.config())?;
    }
    let depth = gen.config().resolution.ilog2() as usize;
    let pyramid = FeaturePyramid::new(percept_seed, 3, depth.min(SHIFT_LEVEL))?;
    let feats = |styles: &[StyleCode], edit: &dyn Fn(usize, &StyleCode) -> Result<StyleCode>| -> Result<FeatureStats> {
        let mut out = Vec::with_capacity(styles.len());
        for (k, w) in styles.iter().enumerate() {
            let img = gen.synthesize(&edit(k, w)?)?;
            out.push(pooled_features(&pyramid, &img.pixels)?);
        }
        FeatureStats::from_samples(&out)
    };
    let ident = |_: usize, w: &StyleCode| Ok(w.clone());
    let a = feats(&eval_styles(gen, seed, stream::EVAL_SHIFT_A, n_per_set)?, &ident)?;
    let b = feats(&eval_styles(gen, seed, stream::EVAL_SHIFT_B, n_per_set)?, &ident)?;
    let edit_styles = eval_styles(gen, seed, stream::EVAL_SHIFT_EDIT, n_per_set)?;
    let rl = feats(&edit_styles, &|k, w| apply_direction(w, relight, k % relight.len(), 1.0))?;
    let (recolor_d, both_d) = match recolor {
        Some(rc) => {
            let c = feats(&edit_styles, &|k, w| apply_direction(w, rc, k % rc.len(), 1.0))?;
            let both = feats(&edit_styles, &|k, w| {
                let w = apply_direction(w, relight, k % relight.len(), 1.0)?;
                apply_direction(&w, rc, k % rc.len(), 1.0)
            })?;
            (Some(frechet_distance(&c, &a)?), Some(frechet_distance(&both, &a)?))
        }
        None => (None, None),
    };
    Ok(ShiftReport {
        n_per_set,
        vanilla_b: frechet_distance(&b, &a)?,
        relight: frechet_distance(&rl, &a)?,
        recolor: recolor_d,
        both: both_d,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub z: LatentZ,
    /// RMS of `broadcast(M(z)) - target` over all `L x D` entries.
    pub residual: f64,
}

/// Smallest possible RMS residual of any broadcast code against `target`:
/// the spread of its rows around their mean.
pub fn broadcast_lower_bound(target: &StyleCode) -> f64 {
    let (l, d) = (target.layers(), target.dim());
    let mut ss = 0.0;
    for j in 0..d {
        let m = (0..l).map(|i| target.row(i)[j]).sum::<f64>() / l as f64;
        ss += (0..l).map(|i| (target.row(i)[j] - m).powi(2)).sum::<f64>();
    }
    (ss / (l * d) as f64).sqrt()
}

/// Searches for `z` with `broadcast(M(z))` close to `target` by Adam from
/// several Gaussian starts, keeping the best. Each Adam run is polished
/// with damped Gauss-Newton steps on the finite-difference Jacobian of the
/// mapping, which Adam alone approaches only slowly.
fn broadcast_sq_error(gen: &Generator, target: &StyleCode, z: &[f64]) -> Result<f64> {
    let w = gen.map_latent(&LatentZ(z.to_vec()))?;
    Ok(w.tensor().data().iter().zip(target.tensor().data()).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Levenberg-Marquardt on `M(z) - mean_row(target)`, whose squared norm
/// differs from the broadcast error only by a factor `L` and a constant.
fn gauss_newton_polish(gen: &Generator, target: &StyleCode, z0: Vec<f64>, sq0: f64) -> Result<(f64, Vec<f64>)> {
    const ITERS: usize = 50;
    const H: f64 = 1e-6;
    let (l, d) = (target.layers(), target.dim());
    let mean_row: Vec<f64> = (0..d).map(|j| (0..l).map(|i| target.row(i)[j]).sum::<f64>() / l as f64).collect();
    let map = |z: &[f64]| -> Result<Vec<f64>> { Ok(gen.map_latent(&LatentZ(z.to_vec()))?.row(0).to_vec()) };
    let (mut z, mut sq, mut damping) = (z0, sq0, 1e-3);
    for _ in 0..ITERS {
        let w = map(&z)?;
        let r = nalgebra::DVector::from_iterator(d, w.iter().zip(&mean_row).map(|(a, b)| a - b));
        let mut jac = DMatrix::zeros(d, z.len());
        for k in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += H;
            zm[k] -= H;
            let (wp, wm) = (map(&zp)?, map(&zm)?);
            for j in 0..d {
                jac[(j, k)] = (wp[j] - wm[j]) / (2.0 * H);
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let rhs = -(&jt * &r);
        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for k in 0..z.len() {
                a[(k, k)] += damping * (1.0 + jtj[(k, k)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&rhs)) else {
                damping *= 10.0;
                continue;
            };
            let cand: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let cand_sq = broadcast_sq_error(gen, target, &cand)?;
            if cand_sq.is_finite() && cand_sq < sq {
                z = cand;
                sq = cand_sq;
                damping = (damping * 0.3).max(1e-12);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok((sq, z))
}

pub fn invert_mapping(
    target: &StyleCode,
    gen: &Generator,
    restarts: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Inversion> {
    let cfg = gen.config();
    if (target.layers(), target.dim()) != (cfg.l, cfg.d) {
        return Err(Error::dims("inversion target shape", (cfg.l, cfg.d), (target.layers(), target.dim())));
    }
    let n = (cfg.l * cfg.d) as f64;
    let mut r = rng::seeded(seed, stream::INVERSION);
    let mut best: Option<Inversion> = None;
    for _ in 0..restarts.max(1) {
        let mut z = Tensor::vector(rng::normal_vec(&mut r, cfg.dz));
        let mut adam = AdamState::new(AdamConfig::with_lr(lr), &[&z]);
        let mut run_best = (f64::INFINITY, z.clone());
        for step in 0..=steps {
            let mut g = Graph::new();
            let zv = g.param(z.clone());
            let w = gen.map_broadcast_graph(&mut g, zv)?;
            let t = g.constant(target.tensor().clone());
            let diff = g.sub(w, t)?;
            let sq = g.square(diff)?;
            let loss = g.sum(sq)?;
            let value = g.item(loss)?;
            if value < run_best.0 {
                run_best = (value, z.clone());
            }
            if step == steps {
                break;
            }
            g.backward(loss)?;
            let grad = g.grad_or_zeros(zv);
            adam.step(&mut [&mut z], &[grad])?;
        }
        let (sq, z_best) = gauss_newton_polish(gen, target, run_best.1.into_data(), run_best.0)?;
        let residual = (sq / n).sqrt();
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(Inversion { z: LatentZ(z_best), residual });
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "lowercase")]
pub enum InterpolationPath {
    /// `w + s d_i` for `s` in `linspace(-1, 1)`.
    Scale { i: usize },
    /// `w + ((1 - a) d_i + a d_j)` for `a` in `linspace(0, 1)`.
    Pair { i: usize, j: usize },
}

fn linspace(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| if k + 1 == n { b } else { a + (b - a) * k as f64 / (n - 1) as f64 })
}

pub fn interpolate(
    set: &DirectionSet,
    path: InterpolationPath,
    n_steps: usize,
    gen: &Generator,
    w_plus: &StyleCode,
) -> Result<Vec<SceneImage>> {
    if n_steps < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 steps, got {n_steps}")));
    }
    set.check_generator(gen.config())?;
    match path {
        InterpolationPath::Scale { i } => {
            set.direction(i)?;
            linspace(-1.0, 1.0, n_steps).map(|s| gen.synthesize(&apply_direction(w_plus, set, i, s)?)).collect()
        }
        InterpolationPath::Pair { i, j } => {
            let (di, dj) = (set.direction(i)?, set.direction(j)?);
            linspace(0.0, 1.0, n_steps)
                .map(|a| {
                    let d: Vec<f64> = di.iter().zip(dj).map(|(x, y)| (1.0 - a) * x + a * y).collect();
                    gen.synthesize(&w_plus.offset_by(&d, 1.0)?)
                })
                .collect()
        }
    }
}

/// One CSV row: a per-direction value, or a summary value when `direction` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub direction: Option<usize>,
    pub value: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub m: usize,
    pub eval_seed: u64,
    pub rows: Vec<MetricRow>,
    /// Pass/fail of each quality check that could be evaluated.
    pub checks: BTreeMap<String, bool>,
}

#[derive(Serialize)]
struct SummaryEntry {
    value: f64,
    n: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: Mode,
    m: usize,
    eval_seed: u64,
    metrics: BTreeMap<&'a str, SummaryEntry>,
    checks: &'a BTreeMap<String, bool>,
}

impl MetricReport {
    fn new(mode: Mode, m: usize, eval_seed: u64) -> Self {
        Self { mode, m, eval_seed, rows: Vec::new(), checks: BTreeMap::new() }
    }

    fn per_direction(&mut self, metric: &str, values: &[f64], n: usize) {
        for (i, &value) in values.iter().enumerate() {
            self.rows.push(MetricRow { metric: metric.into(), direction: Some(i), value, n });
        }
    }

    fn summary(&mut self, metric: &str, value: f64, n: usize) {
        self.rows.push(MetricRow { metric: metric.into(), direction: None, value, n });
    }

    pub fn get(&self, metric: &str, direction: Option<usize>) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.direction == direction).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,direction,value,n\n");
        for r in &self.rows {
            let dir = r.direction.map(|d| d.to_string()).unwrap_or_else(|| "all".into());
            writeln!(s, "{},{},{},{}", r.metric, dir, r.value, r.n).expect("write to string");
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        let metrics = self
            .rows
            .iter()
            .filter(|r| r.direction.is_none())
            .map(|r| (r.metric.as_str(), SummaryEntry { value: r.value, n: r.n }))
            .collect();
        let s = Summary { mode: self.mode, m: self.m, eval_seed: self.eval_seed, metrics, checks: &self.checks };
        let mut out = serde_json::to_string_pretty(&s)?;
        out.push('\n');
        Ok(out)
    }
}

/// Runs the full battery on a direction set.
///
/// `classifier` enables the held-out accuracy check; `partner` (a set of the
/// opposite mode) enables the recolor and combined distribution-shift rows.
pub fn evaluate(
    set: &DirectionSet,
    classifier: Option<&Classifier>,
    partner: Option<&DirectionSet>,
    gen: &Generator,
    obj: &ObjectiveConfig,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    set.check_generator(gen.config())?;
    let m = set.len();
    let mut report = MetricReport::new(set.mode, m, cfg.seed);
    let scenes = eval_styles(gen, cfg.seed, stream::EVAL_SCENES, cfg.n_scenes)?;
    let n = scenes.len();
    let random = random_like(set, cfg.seed);
    let unit_random = DirectionSet::random(m, set.l, set.d, 1.0, set.mode, cfg.seed, stream::RANDOM_BASELINE);

    let cons = consistency_error(set, gen, &scenes)?;
    let cons_rand = consistency_error(&random, gen, &scenes)?;
    report.per_direction("consistency_error", &cons, n);
    report.per_direction("consistency_error_random", &cons_rand, n);
    let (cm, crm) = (mean(&cons), mean(&cons_rand));
    report.summary("consistency_error_mean", cm, n * m);
    report.summary("consistency_error_random_mean", crm, n * m);
    report.checks.insert("consistency_below_0.2x_random".into(), cm < 0.2 * crm);

    let align = subspace_alignment(set, gen)?;
    let align_rand = subspace_alignment(&unit_random, gen)?;
    report.per_direction("subspace_alignment", &align, 1);
    report.per_direction("subspace_alignment_random", &align_rand, 1);
    let (am, arm) = (median(&align), median(&align_rand));
    report.summary("subspace_alignment_median", am, m);
    report.summary("subspace_alignment_random_median", arm, m);
    if set.mode == Mode::Relight {
        report.checks.insert("alignment_below_0.3x_random".into(), am < 0.3 * arm);
    }

    let gram = gram_spectrum(set, gen, &scenes, obj)?;
    let gram_rand = gram_spectrum(&random, gen, &scenes, obj)?;
    report.summary("gram_lambda_min", gram.lambda_min(), n);
    report.summary("gram_max_pairwise_cos", gram.max_pairwise_cos(), n);
    report.summary("gram_lambda_min_random", gram_rand.lambda_min(), n);
    report.summary("gram_max_pairwise_cos_random", gram_rand.max_pairwise_cos(), n);
    report.checks.insert("gram_lambda_min_above_0.01".into(), gram.lambda_min() > 0.01);
    report.checks.insert("no_duplicate_transients".into(), gram.max_pairwise_cos() < 0.99);

    if set.mode == Mode::Relight {
        let deco = decorrelation_coeff(set, gen, &scenes, obj)?;
        report.per_direction("decorrelation_cos", &deco, n);
        report.summary("decorrelation_cos_mean", mean(&deco), n * m);
    }

    if let Some(clf) = classifier {
        let held_out = eval_styles(gen, cfg.seed.wrapping_add(1), stream::EVAL_SCENES, cfg.n_distinction)?;
        let acc = distinction_accuracy(set, clf, gen, &held_out)?;
        report.per_direction("distinction_accuracy", &acc, held_out.len());
        let a = mean(&acc);
        report.summary("distinction_accuracy_mean", a, held_out.len() * m);
        report.checks.insert("distinction_accuracy_above_0.9".into(), a > 0.9);
    }

    let (relight, recolor) = match (set.mode, partner) {
        (Mode::Relight, p) => (set, p),
        (Mode::Recolor, Some(p)) => (p, Some(set)),
        (Mode::Recolor, None) => (set, None),
    };
    let shift = distribution_shift_report(relight, recolor, gen, cfg.n_shift, cfg.seed, obj.percept_seed)?;
    report.summary("frechet_vanilla_b", shift.vanilla_b, shift.n_per_set);
    report.summary("frechet_relight", shift.relight, shift.n_per_set);
    if let (Some(rc), Some(both)) = (shift.recolor, shift.both) {
        report.summary("frechet_recolor", rc, shift.n_per_set);
        report.summary("frechet_both", both, shift.n_per_set);
    }
    report.checks.insert("distribution_shift_ordering".into(), shift.ordering_holds());

    let mut zr = rng::seeded(cfg.seed, stream::INVERSION + 100);
    let inv = |target: &StyleCode, k: usize| {
        invert_mapping(target, gen, cfg.inversion_restarts, cfg.inversion_steps, cfg.inversion_lr, cfg.seed + k as u64)
    };
    let mut self_res = Vec::with_capacity(cfg.inversion_targets);
    for k in 0..cfg.inversion_targets {
        let target = gen.map_latent(&LatentZ::sample(&mut zr, gen.config().dz))?;
        self_res.push(inv(&target, k)?.residual);
    }
    let base = gen.map_latent(&LatentZ::sample(&mut zr, gen.config().dz))?;
    let mut dir_res = Vec::with_capacity(m);
    for i in 0..m {
        dir_res.push(inv(&apply_direction(&base, set, i, 1.0)?, cfg.inversion_targets + i)?.residual);
    }
    report.per_direction("inversion_residual", &dir_res, 1);
    let (sm, dm) = (median(&self_res), median(&dir_res));
    report.summary("inversion_self_residual_median", sm, self_res.len());
    report.summary("inversion_self_residual_max", self_res.iter().copied().fold(0.0, f64::max), self_res.len());
    report.summary("inversion_direction_residual_median", dm, m);
    report.checks.insert("self_inversion_below_1e-3".into(), self_res.iter().all(|&r| r < 1e-3));
    report.checks.insert("direction_inversion_above_10x_self".into(), dm > 10.0 * sm);
    Ok(report)
}
