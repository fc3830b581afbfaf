//! Gradient checks of the composite pipelines (losses, feature extractor,
//! renderer and the full training objective) on tiny inputs.

use diffcore::gradcheck::{gradcheck, OpCheck};
use diffcore::{AdError, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decomp::OracleDecomposer;
use crate::dirsearch::{batch_loss, Classifier};
use crate::losses::{self, DecoSign, LossWeights, Objective, ObjectiveConfig};
use crate::percept::{self, FeaturePyramid};
use crate::scenegen::{Generator, GeneratorConfig, LatentZ};
use crate::{Error, Result};

fn ad(e: Error) -> AdError {
    match e {
        Error::Autodiff(inner) => inner,
        other => AdError::Invalid { op: "composite", msg: other.to_string() },
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn project(g: &mut Graph, y: Var, seed: u64) -> diffcore::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&mut rng, g.shape(y), -1.0, 1.0));
    g.dot(y, w)
}

/// Tiny generator used by the end-to-end checks.
pub fn tiny_generator() -> Result<Generator> {
    Generator::new(GeneratorConfig { resolution: 16, ..Default::default() })
}

/// Worst relative gradient error of each composite over `trials` random inputs.
pub fn composite_suite(trials: u64, h: f64) -> Result<Vec<OpCheck>> {
    let pyramid = FeaturePyramid::new(3, 3, 3)?;
    let gen = tiny_generator()?;
    let obj_cfg = ObjectiveConfig::default();
    let relight = Objective::new(&obj_cfg, LossWeights::default(), 16)?;
    let recolor = Objective::new(&obj_cfg, LossWeights { mode: losses::Mode::Recolor, ..Default::default() }, 16)?;
    let clf = Classifier::new(3, 4);
    let mut out = Vec::new();

    let mut run = |name: &'static str,
                   make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
                   f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>|
     -> Result<()> {
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
            let inputs = make(&mut rng);
            let report = gradcheck(|g, v| f(g, v).map_err(ad), &inputs, h)?;
            worst = worst.max(report.max_rel_error());
        }
        out.push(OpCheck { name, max_rel_error: worst });
        Ok(())
    };

    let img_pair = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 8, 8], 0.1, 0.9), uniform(r, &[3, 8, 8], 0.1, 0.9)];
    run("const_loss", &|r| vec![uniform(r, &[3, 4, 4], 0.0, 1.0), uniform(r, &[3, 4, 4], 0.0, 1.0)], &|g, v| {
        losses::const_loss(g, v[0], v[1], 0.1)
    })?;
    run("perceptual_loss", &img_pair, &|g, v| losses::perceptual_loss(g, &pyramid, v[0], v[1], &[0, 1, 2]))?;
    run("diversity_loss", &|r| (0..3).map(|_| uniform(r, &[6], -1.0, 1.0)).collect(), &|g, v| {
        let units = v
            .iter()
            .map(|&x| {
                let n = g.l2_norm(x)?;
                Ok(g.div(x, n)?)
            })
            .collect::<Result<Vec<_>>>()?;
        losses::diversity_loss(g, &units, 1e-6, 1e4)
    })?;
    run("distinction_loss", &|r| vec![uniform(r, &[4], -2.0, 2.0)], &|g, v| losses::distinction_loss(g, v[0], 2))?;
    run("decorrelation_loss", &img_pair, &|g, v| losses::decorrelation_loss(g, v[0], v[1], 2.0, DecoSign::Penalty))?;
    run(
        "transient_vector",
        &|r| vec![uniform(r, &[1, 16, 16], 0.1, 1.0), uniform(r, &[3, 16, 16], 0.0, 0.5)],
        &|g, v| {
            let t = percept::transient_vector(g, v[0], v[1], 1.0, 4)?;
            Ok(project(g, t, 1)?)
        },
    )?;
    run("feature pyramid", &|r| vec![uniform(r, &[3, 8, 8], 0.0, 1.0)], &|g, v| {
        let f = pyramid.extract(g, v[0], &[2])?;
        Ok(project(g, f[0], 2)?)
    })?;
    run("synthesis mean pixel", &|r| vec![uniform(r, &[4, 32], -0.3, 0.3)], &|g, v| {
        let s = gen.synthesize_graph(g, v[0])?;
        Ok(g.mean(s.pixels)?)
    })?;
    let w_plus = gen.map_latent(&LatentZ(vec![0.3; gen.config().dz]))?;
    for (name, obj) in [("relight total loss", &relight), ("recolor total loss", &recolor)] {
        run(name, &|r| vec![uniform(r, &[3, 128], -0.3, 0.3)], &|g, v| {
            let cv = clf.vars(g, false);
            Ok(batch_loss(g, &gen, &OracleDecomposer, obj, v[0], &cv, &w_plus, &[0, 1, 2])?.0)
        })?;
    }
    Ok(out)
}
