use diffcore::Tensor;
use latentlight::decomp::{oracle_decompose, retinex_decompose, DecomposerKind};
use latentlight::dirsearch::{train_directions, TrainConfig};
use latentlight::rng;
use latentlight::scenegen::{Generator, GeneratorConfig, SceneImage, StyleCode};

fn generator() -> Generator {
    Generator::new(GeneratorConfig { resolution: 32, ..Default::default() }).unwrap()
}

fn styles(gen: &Generator, n: usize) -> Vec<StyleCode> {
    let mut r = rng::seeded(11, 500);
    (0..n).map(|_| gen.sample_style(&mut r).unwrap()).collect()
}

/// Random combination of the relighting null basis, scaled to `norm`.
fn null_edit(gen: &Generator, seed: u64, norm: f64) -> Vec<f64> {
    let basis = gen.lighting_null_basis();
    let (ld, k) = (basis.shape()[0], basis.shape()[1]);
    let coef = rng::random_direction(&mut rng::seeded(seed, 501), k, norm);
    (0..ld).map(|r| (0..k).map(|c| basis.data()[r * k + c] * coef[c]).sum()).collect()
}

#[test]
fn oracle_reconstructs_unclamped_image() {
    let gen = generator();
    for w in styles(&gen, 5) {
        let img = gen.synthesize(&w).unwrap();
        let t = oracle_decompose(&img).unwrap();
        let unclamped = &img.ground_truth.as_ref().unwrap().unclamped;
        for (a, b) in t.reconstruct().data().iter().zip(unclamped.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(t.shading.data().iter().all(|&s| s > 0.0));
        assert!(t.gloss.data().iter().all(|&g| g >= 0.0));
    }
}

#[test]
fn pure_lighting_edit_keeps_albedo_and_changes_shading() {
    let gen = generator();
    for (k, w) in styles(&gen, 10).into_iter().enumerate() {
        let edited = w.offset_by(&null_edit(&gen, k as u64, 2.0), 1.0).unwrap();
        let a = oracle_decompose(&gen.synthesize(&w).unwrap()).unwrap();
        let b = oracle_decompose(&gen.synthesize(&edited).unwrap()).unwrap();
        let albedo_diff = a.albedo.data().iter().zip(b.albedo.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(albedo_diff < 1e-12, "albedo moved by {albedo_diff}");
        assert_ne!(a.shading, b.shading);
    }
}

#[test]
fn retinex_reconstructs_where_unclamped() {
    let gen = generator();
    for w in styles(&gen, 5) {
        let img = gen.synthesize(&w).unwrap();
        let t = retinex_decompose(&img, 4.0, 0.95).unwrap();
        let rec = t.reconstruct();
        let hw = t.shading.numel();
        let mut checked = 0;
        for (k, (r, p)) in rec.data().iter().zip(img.pixels.data()).enumerate() {
            let a = t.albedo.data()[k];
            if a > 0.0 && a < 1.0 && t.shading.data()[k % hw] > 0.02 {
                assert!((r - p).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > rec.numel() / 2);
        assert!(t.shading.data().iter().all(|&s| s > 0.0));
        assert!(t.gloss.data().iter().all(|&g| g >= 0.0));
    }
}

#[test]
fn retinex_recovers_constant_albedo_under_flat_light() {
    let (albedo, shading) = ([0.6, 0.4, 0.3], 0.8);
    let n = 32;
    let px = (0..3 * n * n).map(|k| albedo[k / (n * n)] * shading).collect();
    let img = SceneImage::from_pixels(Tensor::new([3, n, n], px).unwrap());
    let t = retinex_decompose(&img, 4.0, 0.95).unwrap();
    for c in 0..3 {
        let ch = &t.albedo.data()[c * n * n..(c + 1) * n * n];
        let (lo, hi) = ch.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        assert!((hi - lo) / hi < 0.02);
    }
}

#[test]
fn retinex_albedo_ignores_global_brightness() {
    let gen = generator();
    for w in styles(&gen, 5) {
        let img = gen.synthesize(&w).unwrap();
        let unclamped = &img.ground_truth.as_ref().unwrap().unclamped;
        let peak = unclamped.data().iter().copied().fold(0.0, f64::max);
        let dim = SceneImage::from_pixels(unclamped.map(|x| 0.45 * x / peak));
        let bright = SceneImage::from_pixels(unclamped.map(|x| 0.9 * x / peak));
        let a = retinex_decompose(&dim, 4.0, 0.95).unwrap();
        let b = retinex_decompose(&bright, 4.0, 0.95).unwrap();
        let worst = a
            .albedo
            .data()
            .iter()
            .zip(b.albedo.data())
            .filter(|(x, _)| **x > 0.05)
            .map(|(x, y)| (x - y).abs() / x)
            .fold(0.0, f64::max);
        assert!(worst < 0.01, "relative albedo change {worst}");
    }
}

#[test]
fn search_runs_with_either_decomposer() {
    let gen = Generator::new(GeneratorConfig { resolution: 16, ..Default::default() }).unwrap();
    for decomposer in [DecomposerKind::Oracle, DecomposerKind::Retinex { sigma_s: None, gloss_quantile: 0.95 }] {
        let name = decomposer.build(16).name();
        let cfg = TrainConfig { m: 2, n_samples: 2, decomposer, ..Default::default() };
        let out = train_directions(&cfg, &gen).unwrap();
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.directions.meta.decomposer, name);
    }
}
