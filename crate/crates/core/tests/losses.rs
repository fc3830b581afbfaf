use diffcore::{Graph, Tensor, Var};
use latentlight::decomp::TripleVars;
use latentlight::losses::{
    const_loss, cosine, decorrelation_loss, distinction_loss, diversity_loss, Batch, DecoSign, EditedSample,
    LossWeights, Mode, Objective, ObjectiveConfig,
};
use latentlight::percept;
use latentlight::scenegen::{Generator, GeneratorConfig, LatentZ};
use proptest::prelude::*;

fn vector(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(Tensor::vector(v.to_vec()))
}

fn value(g: &Graph, v: Var) -> f64 {
    g.item(v).unwrap()
}

fn huber(diff: f64, delta: f64) -> f64 {
    let mut g = Graph::new();
    let a = vector(&mut g, &[diff]);
    let b = vector(&mut g, &[0.0]);
    let l = const_loss(&mut g, a, b, delta).unwrap();
    value(&g, l)
}

#[test]
fn huber_boundary_cases() {
    assert_eq!(huber(0.0, 1.0), 0.0);
    assert!((huber(1.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((huber(2.0, 1.0) - 1.5).abs() < 1e-15);
    assert!((huber(-2.0, 1.0) - 1.5).abs() < 1e-15);
    assert!((huber(0.05, 0.1) - 0.5 * 0.05 * 0.05).abs() < 1e-15);
}

#[test]
fn huber_averages_over_elements() {
    let mut g = Graph::new();
    let a = vector(&mut g, &[0.0, 1.0, 2.0, 0.0]);
    let b = vector(&mut g, &[0.0; 4]);
    let l = const_loss(&mut g, a, b, 1.0).unwrap();
    assert!((value(&g, l) - 0.5).abs() < 1e-15);
}

#[test]
fn diversity_of_two_unit_vectors_at_45_degrees_is_ln2() {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut g = Graph::new();
    let a = vector(&mut g, &[1.0, 0.0]);
    let b = vector(&mut g, &[r, r]);
    let l = diversity_loss(&mut g, &[a, b], 0.0, 1e4).unwrap();
    assert!((value(&g, l) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn diversity_of_orthonormal_vectors_is_zero() {
    let mut g = Graph::new();
    let vs: Vec<Var> = (0..4)
        .map(|i| {
            let mut e = vec![0.0; 6];
            e[i] = 1.0;
            vector(&mut g, &e)
        })
        .collect();
    let l = diversity_loss(&mut g, &vs, 0.0, 1e4).unwrap();
    assert!(value(&g, l).abs() < 1e-14);
}

#[test]
fn duplicated_vectors_clamp_diversity() {
    let mut g = Graph::new();
    let a = vector(&mut g, &[0.6, 0.8]);
    let l = diversity_loss(&mut g, &[a, a], 0.0, 1e4).unwrap();
    assert_eq!(value(&g, l), 1e4);
}

#[test]
fn diversity_needs_two_vectors() {
    let mut g = Graph::new();
    let a = vector(&mut g, &[1.0]);
    assert!(diversity_loss(&mut g, &[a], 1e-6, 1e4).is_err());
}

#[test]
fn uniform_logits_give_ln_m() {
    for m in [2usize, 4, 8] {
        let mut g = Graph::new();
        let logits = vector(&mut g, &vec![-0.3; m]);
        let l = distinction_loss(&mut g, logits, 0).unwrap();
        assert!((value(&g, l) - (m as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn true_class_probability_one_over_e_gives_unit_loss() {
    let mut g = Graph::new();
    let logits = vector(&mut g, &[0.0, (std::f64::consts::E - 1.0).ln()]);
    let l = distinction_loss(&mut g, logits, 0).unwrap();
    assert!((value(&g, l) - 1.0).abs() < 1e-12);
}

#[test]
fn confident_wrong_class_stays_finite() {
    let mut g = Graph::new();
    let logits = vector(&mut g, &[-1e6, 1e6]);
    let l = distinction_loss(&mut g, logits, 0).unwrap();
    assert_eq!(value(&g, l), 30.0);
    let logits = vector(&mut g, &[1e3, 0.0]);
    let l = distinction_loss(&mut g, logits, 0).unwrap();
    assert!(value(&g, l) < 1e-12);
}

#[test]
fn distinction_index_is_checked() {
    let mut g = Graph::new();
    let logits = vector(&mut g, &[0.0, 0.0]);
    assert!(distinction_loss(&mut g, logits, 2).is_err());
}

#[test]
fn cosine_cases() {
    let mut g = Graph::new();
    let a = vector(&mut g, &[1.0, 2.0, -1.0]);
    let b = vector(&mut g, &[-2.0, -4.0, 2.0]);
    let c = vector(&mut g, &[2.0, -1.0, 0.0]);
    let aa = cosine(&mut g, a, a).unwrap();
    let ab = cosine(&mut g, a, b).unwrap();
    let ac = cosine(&mut g, a, c).unwrap();
    assert!((value(&g, aa) - 1.0).abs() < 1e-15);
    assert!((value(&g, ab) + 1.0).abs() < 1e-15);
    assert!(value(&g, ac).abs() < 1e-15);
    let z = vector(&mut g, &[0.0; 3]);
    assert!(cosine(&mut g, a, z).is_err());
}

fn image(g: &mut Graph, f: impl Fn(usize, usize, usize) -> f64, n: usize) -> Var {
    let data = (0..3 * n * n).map(|k| f(k / (n * n), (k / n) % n, k % n)).collect();
    g.constant(Tensor::new([3, n, n], data).unwrap())
}

#[test]
fn decorrelation_of_identical_maps_by_sign() {
    let mut g = Graph::new();
    let a = image(&mut g, |c, y, x| 0.2 + 0.1 * c as f64 + 0.02 * (x * y) as f64, 8);
    let p = decorrelation_loss(&mut g, a, a, 1.0, DecoSign::Penalty).unwrap();
    let q = decorrelation_loss(&mut g, a, a, 1.0, DecoSign::Printed).unwrap();
    assert!((value(&g, p) - 1.0).abs() < 1e-12);
    assert!((value(&g, q) + 1.0).abs() < 1e-12);
}

#[test]
fn decorrelation_of_orthogonal_patterns_is_zero() {
    // Left/right split against top/bottom split: centred maps are orthogonal.
    let mut g = Graph::new();
    let a = image(&mut g, |_, _, x| if x < 4 { 0.2 } else { 0.8 }, 8);
    let b = image(&mut g, |_, y, _| if y < 4 { 0.3 } else { 0.6 }, 8);
    for sign in [DecoSign::Penalty, DecoSign::Printed] {
        let d = decorrelation_loss(&mut g, a, b, 0.0, sign).unwrap();
        assert!(value(&g, d).abs() < 1e-12);
    }
}

#[test]
fn decorrelation_penalty_drops_when_shading_opposes_albedo() {
    // Two albedo patches, dark left and bright right, lit from either side.
    let n = 16;
    let mut g = Graph::new();
    let albedo = |x: usize| if x < n / 2 { 0.3 } else { 0.7 };
    let a = image(&mut g, |_, _, x| albedo(x), n);
    let with = image(&mut g, |_, _, x| albedo(x) * (0.2 + 0.05 * x as f64), n);
    let against = image(&mut g, |_, _, x| albedo(x) * (0.2 + 0.05 * (n - 1 - x) as f64), n);
    let pw = decorrelation_loss(&mut g, a, with, 2.0, DecoSign::Penalty).unwrap();
    let pa = decorrelation_loss(&mut g, a, against, 2.0, DecoSign::Penalty).unwrap();
    assert!(value(&g, pa) < value(&g, pw));
}

#[test]
fn decorrelation_rejects_mismatched_sizes() {
    let mut g = Graph::new();
    let a = image(&mut g, |_, _, x| x as f64, 8);
    let b = image(&mut g, |_, _, x| x as f64, 4);
    assert!(decorrelation_loss(&mut g, a, b, 1.0, DecoSign::Penalty).is_err());
}

#[test]
fn recolor_mode_zeroes_decorrelation_weight() {
    let w = LossWeights { mode: Mode::Recolor, lambda_deco: 1.0, ..Default::default() };
    assert_eq!(w.effective().lambda_deco, 0.0);
    assert_eq!(w.effective().lambda_const, w.lambda_const);
}

struct Scene {
    triple: TripleVars,
    pixels: Var,
}

fn scenes(g: &mut Graph, gen: &Generator, n_edits: usize) -> (Scene, Vec<Scene>) {
    let w = gen.map_latent(&LatentZ(vec![0.4; gen.config().dz])).unwrap();
    let render = |g: &mut Graph, t: Tensor| {
        let v = g.constant(t);
        let s = gen.synthesize_graph(g, v).unwrap();
        Scene { triple: TripleVars { albedo: s.albedo, shading: s.shading, gloss: s.gloss }, pixels: s.pixels }
    };
    let orig = render(g, w.tensor().clone());
    let edits = (0..n_edits)
        .map(|i| {
            let delta: Vec<f64> = (0..w.tensor().numel()).map(|k| (0.37 * (k * (i + 2)) as f64).sin()).collect();
            render(g, w.offset_by(&delta, 0.4).unwrap().into_tensor())
        })
        .collect();
    (orig, edits)
}

/// Recomputes every term of the overall loss in isolation.
fn check_total_against_terms(mode: Mode) {
    let gen = Generator::new(GeneratorConfig { resolution: 16, ..Default::default() }).unwrap();
    let weights = LossWeights { mode, ..Default::default() };
    let obj = Objective::new(&ObjectiveConfig::default(), weights, 16).unwrap();
    let mut g = Graph::new();
    let (orig, edits) = scenes(&mut g, &gen, 3);
    let logits: Vec<Var> = (0..3).map(|i| vector(&mut g, &[0.1 * i as f64, -0.2, 0.3])).collect();
    let batch = Batch {
        original: orig.triple,
        edits: edits
            .iter()
            .enumerate()
            .map(|(i, e)| EditedSample { index: i, pixels: e.pixels, triple: e.triple, logits: Some(logits[i]) })
            .collect(),
    };
    let (total, report) = obj.total(&mut g, &batch).unwrap();

    let persistent = |g: &mut Graph, t: &TripleVars| match mode {
        Mode::Relight => t.albedo,
        Mode::Recolor => g.concat(&[t.shading, t.gloss]).unwrap(),
    };
    let o = persistent(&mut g, &orig.triple);
    let (mut cons, mut dist, mut deco) = (0.0, 0.0, 0.0);
    let mut div_vectors = Vec::new();
    for (i, e) in edits.iter().enumerate() {
        let p = persistent(&mut g, &e.triple);
        let c = const_loss(&mut g, o, p, 0.1).unwrap();
        cons += value(&g, c) / 3.0;
        let d = distinction_loss(&mut g, logits[i], i).unwrap();
        dist += value(&g, d) / 3.0;
        if mode == Mode::Relight {
            let d = decorrelation_loss(&mut g, orig.triple.albedo, e.pixels, 4.0, DecoSign::Penalty).unwrap();
            deco += value(&g, d) / 3.0;
        }
        div_vectors.push(match mode {
            Mode::Relight => percept::transient_vector(&mut g, e.triple.shading, e.triple.gloss, 1.0, 8).unwrap(),
            Mode::Recolor => percept::smoothed_unit_vector(&mut g, e.triple.albedo, 1.0, 8).unwrap(),
        });
    }
    let div = diversity_loss(&mut g, &div_vectors, 1e-6, 1e4).unwrap();
    let div = value(&g, div);

    assert!((report.consistency - cons).abs() < 1e-14);
    assert!((report.distinction - dist).abs() < 1e-14);
    assert!((report.decorrelation - deco).abs() < 1e-14);
    assert!((report.diversity - div).abs() < 1e-12);
    assert!(report.perceptual > 0.0);
    let expected = report.weighted_sum(&weights.effective());
    assert!((value(&g, total) - expected).abs() < 1e-12);
    assert_eq!(report.total, value(&g, total));
}

#[test]
fn relight_total_matches_isolated_terms() {
    check_total_against_terms(Mode::Relight);
}

#[test]
fn recolor_total_matches_isolated_terms() {
    check_total_against_terms(Mode::Recolor);
}

#[test]
fn zero_weights_give_zero_total() {
    let gen = Generator::new(GeneratorConfig { resolution: 16, ..Default::default() }).unwrap();
    let weights = LossWeights {
        lambda_const: 0.0,
        lambda_per: 0.0,
        lambda_div: 0.0,
        lambda_dist: 0.0,
        lambda_deco: 0.0,
        ..Default::default()
    };
    let obj = Objective::new(&ObjectiveConfig::default(), weights, 16).unwrap();
    let mut g = Graph::new();
    let (orig, edits) = scenes(&mut g, &gen, 2);
    let batch = Batch {
        original: orig.triple,
        edits: edits
            .iter()
            .enumerate()
            .map(|(i, e)| EditedSample { index: i, pixels: e.pixels, triple: e.triple, logits: None })
            .collect(),
    };
    let (total, report) = obj.total(&mut g, &batch).unwrap();
    assert_eq!(value(&g, total), 0.0);
    assert!(report.consistency > 0.0);
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn huber_is_nonnegative_and_symmetric(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        delta in 0.01f64..2.0,
    ) {
        let mut g = Graph::new();
        let (va, vb) = (vector(&mut g, &a), vector(&mut g, &b));
        let ab = const_loss(&mut g, va, vb, delta).unwrap();
        let ba = const_loss(&mut g, vb, va, delta).unwrap();
        prop_assert!(value(&g, ab) >= 0.0);
        prop_assert!((value(&g, ab) - value(&g, ba)).abs() < 1e-15);
    }

    #[test]
    fn diversity_of_unit_vectors_is_nonnegative(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 3),
    ) {
        prop_assume!(raw.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let mut g = Graph::new();
        let vs: Vec<Var> = raw.iter().map(|v| vector(&mut g, &unit(v))).collect();
        let l = diversity_loss(&mut g, &vs, 1e-6, 1e4).unwrap();
        // With jitter eps, det(N + eps I) <= (1 + eps)^M.
        prop_assert!(value(&g, l) >= -3.0 * 1e-6 - 1e-12);
    }

    #[test]
    fn distinction_is_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 4), idx in 0usize..4) {
        let mut g = Graph::new();
        let v = vector(&mut g, &logits);
        let l = distinction_loss(&mut g, v, idx).unwrap();
        prop_assert!(value(&g, l) >= 0.0);
    }

    #[test]
    fn decorrelation_stays_in_unit_interval(
        a in prop::collection::vec(0.0f64..1.0, 48),
        b in prop::collection::vec(0.0f64..1.0, 48),
    ) {
        let mut g = Graph::new();
        let va = g.constant(Tensor::new([3, 4, 4], a).unwrap());
        let vb = g.constant(Tensor::new([3, 4, 4], b).unwrap());
        if let Ok(d) = decorrelation_loss(&mut g, va, vb, 0.5, DecoSign::Penalty) {
            prop_assert!(value(&g, d).abs() <= 1.0 + 1e-12);
        }
    }
}
