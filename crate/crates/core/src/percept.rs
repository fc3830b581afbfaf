//! Fixed feature extractor and the smoothing pipelines that feed the losses.
//!
//! The extractor is a pyramid of seeded random 3x3 filter banks applied with
//! stride 2 and leaky ReLU. Nothing here is trained.

use std::sync::Arc;

use diffcore::{Graph, Tensor, Var};

use crate::rng::{self, stream};
use crate::{Error, Result};

const LEAK: f64 = 0.2;

/// Normalized Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur of a `[C, H, W]` node with clamp-to-edge borders.
/// `sigma <= 0` is the identity.
pub fn blur(g: &mut Graph, x: Var, sigma: f64) -> Result<Var> {
    if sigma <= 0.0 {
        return Ok(x);
    }
    let taps = gaussian_taps(sigma);
    let n = taps.len();
    let horizontal = Arc::new(Tensor::new([1, n], taps.clone())?);
    let vertical = Arc::new(Tensor::new([n, 1], taps)?);
    let y = g.depthwise_fixed(x, horizontal, 1)?;
    Ok(g.depthwise_fixed(y, vertical, 1)?)
}

/// Mean over channels, `[C, H, W] -> [1, H, W]`.
pub fn channel_mean(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dims("image layout", "[C, H, W]", s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = g.reshape(x, [c, h * w])?;
    let avg = g.constant(Tensor::full([1, c], 1.0 / c as f64));
    let m = g.matmul(avg, flat)?;
    Ok(g.reshape(m, [1, h, w])?)
}

/// Gray-scale lightness at a long spatial scale.
pub fn lightness_map(g: &mut Graph, x: Var, sigma_l: f64) -> Result<Var> {
    if g.shape(x).first() != Some(&3) {
        return Err(Error::dims("lightness input channels", 3, g.shape(x)));
    }
    let m = channel_mean(g, x)?;
    blur(g, m, sigma_l)
}

/// Average-pools `[C, H, W]` down to `[C, out_res, out_res]` by repeated halving.
pub fn pool_to(g: &mut Graph, x: Var, out_res: usize) -> Result<Var> {
    let mut y = x;
    loop {
        let h = g.shape(y)[1];
        if h == out_res {
            return Ok(y);
        }
        if h < out_res || !h.is_multiple_of(2) {
            return Err(Error::dims("pooling target", format!("{h} = {out_res} * 2^k"), out_res));
        }
        y = g.downsample2x(y)?;
    }
}

/// Blur, pool, flatten and L2-normalize a stack of maps.
pub fn smoothed_unit_vector(g: &mut Graph, stack: Var, sigma: f64, out_res: usize) -> Result<Var> {
    let b = blur(g, stack, sigma)?;
    let p = pool_to(g, b, out_res)?;
    let n = g.value(p).numel();
    let flat = g.reshape(p, [n])?;
    let norm = g.l2_norm(flat)?;
    if g.item(norm)? == 0.0 {
        return Err(Error::ZeroTransient);
    }
    Ok(g.div(flat, norm)?)
}

/// Unit vector summarizing the transient maps: `S` (`[1,H,W]`) stacked with
/// `G` (`[3,H,W]`).
pub fn transient_vector(g: &mut Graph, shading: Var, gloss: Var, sigma_t: f64, out_res: usize) -> Result<Var> {
    let stack = g.concat(&[shading, gloss])?;
    smoothed_unit_vector(g, stack, sigma_t, out_res)
}

/// Seeded random filter pyramid standing in for a pretrained perceptual network.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    seed: u64,
    in_channels: usize,
    filters: Vec<Arc<Tensor>>,
}

impl FeaturePyramid {
    /// Channel count at level `j >= 1`.
    pub fn width(level: usize) -> usize {
        if level == 1 {
            16
        } else {
            64
        }
    }

    pub fn new(seed: u64, in_channels: usize, depth: usize) -> Result<Self> {
        let mut r = rng::seeded(seed, stream::PERCEPT + in_channels as u64);
        let mut filters = Vec::with_capacity(depth);
        let mut cin = in_channels;
        for level in 1..=depth {
            let cout = Self::width(level);
            let mut data = Vec::with_capacity(cout * cin * 9);
            for _ in 0..cout {
                data.extend(rng::random_direction(&mut r, cin * 9, 1.0));
            }
            filters.push(Arc::new(Tensor::new([cout, cin, 3, 3], data)?));
            cin = cout;
        }
        Ok(Self { seed, in_channels, filters })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn depth(&self) -> usize {
        self.filters.len()
    }

    /// Features at each requested level (level 0 is the input itself).
    pub fn extract(&self, g: &mut Graph, img: Var, levels: &[usize]) -> Result<Vec<Var>> {
        let s = g.shape(img).to_vec();
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(Error::dims("feature input", format!("[{}, H, W]", self.in_channels), s));
        }
        let res = s[1];
        let max = (res.max(1).ilog2() as usize).min(self.depth());
        let deepest = levels.iter().copied().max().unwrap_or(0);
        if deepest > max {
            return Err(Error::LevelTooDeep { level: deepest, max, resolution: res });
        }
        let mut feats = vec![img];
        for j in 1..=deepest {
            let prev = feats[j - 1];
            let c = g.conv2d_fixed(prev, self.filters[j - 1].clone(), 2)?;
            feats.push(g.leaky_relu(c, LEAK)?);
        }
        Ok(levels.iter().map(|&j| feats[j]).collect())
    }
}
