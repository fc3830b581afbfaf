use std::sync::Arc;

use diffcore::gradcheck::op_suite;
use diffcore::{AdError, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn every_op_passes_gradcheck() {
    let checks = op_suite(3, H).unwrap();
    assert!(checks.len() >= 40);
    for c in &checks {
        assert!(c.max_rel_error < TOL, "{}: rel err {:e}", c.name, c.max_rel_error);
    }
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn leaky_relu_definition() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = g.leaky_relu(x, 0.2).unwrap();
    assert_eq!(g.value(y).data(), &[-0.2, 0.0, 2.0]);
}

#[test]
fn downsample_preserves_constants() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([3, 8, 8], 0.37));
    let y = g.downsample2x(x).unwrap();
    assert_eq!(g.shape(y), &[3, 4, 4]);
    assert!(g.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([3, 2]));
    let err = g.add(a, b).unwrap_err();
    assert_eq!(err, AdError::ShapeMismatch { op: "add", lhs: vec![2, 3], rhs: vec![3, 2] });
    let msg = g.matmul(a, a).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn non_finite_output_names_the_op() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 1.0]));
    let err = g.ln(x).unwrap_err();
    assert_eq!(err, AdError::NonFinite { op: "ln" });
}

#[test]
fn logdet_identity_and_two_by_two() {
    let mut g = Graph::new();
    let i3 = g.constant(Tensor::identity(3));
    let v = g.logdet_psd(i3).unwrap();
    assert_eq!(g.item(v).unwrap(), 0.0);

    let r = std::f64::consts::FRAC_1_SQRT_2;
    let n = g.constant(Tensor::from_rows(&[vec![1.0, r], vec![r, 1.0]]).unwrap());
    let v = g.logdet_psd(n).unwrap();
    assert!((g.item(v).unwrap() - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn logdet_rejects_non_pd_and_asymmetric() {
    let mut g = Graph::new();
    let n = g.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap());
    assert_eq!(g.logdet_psd(n).unwrap_err(), AdError::DegenerateGram);
    let n = g.constant(Tensor::from_rows(&[vec![1.0, 0.2], vec![0.1, 1.0]]).unwrap());
    assert!(matches!(g.logdet_psd(n).unwrap_err(), AdError::Invalid { .. }));
}

/// Gradient of logdet equals N^-1. The oracle perturbs N symmetrically, so the
/// off-diagonal finite difference measures twice the (i, j) entry.
#[test]
fn logdet_gradient_is_inverse() {
    for trial in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let n = 4;
        let a = random(&mut rng, &[n, n + 2], -1.0, 1.0);
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] =
                    (0..n + 2).map(|k| a.row(i)[k] * a.row(j)[k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
            }
        }
        let logdet = |m: &[f64]| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::new([n, n], m.to_vec()).unwrap());
            let r = g.logdet_psd(v).unwrap();
            g.item(r).unwrap()
        };
        let mut g = Graph::new();
        let v = g.param(Tensor::new([n, n], m.clone()).unwrap());
        let r = g.logdet_psd(v).unwrap();
        g.backward(r).unwrap();
        let analytic = g.grad(v).unwrap().clone();
        let h = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                let mut p = m.clone();
                let mut q = m.clone();
                p[i * n + j] += h;
                q[i * n + j] -= h;
                if i != j {
                    p[j * n + i] += h;
                    q[j * n + i] -= h;
                }
                let mut fd = (logdet(&p) - logdet(&q)) / (2.0 * h);
                if i != j {
                    fd /= 2.0;
                }
                let an = analytic.data()[i * n + j];
                assert!((an - fd).abs() < 1e-6, "trial {trial} ({i},{j}): {an} vs {fd}");
            }
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full([2, 3, 4], 0.5));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_half_mean_square() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = g.square(x).unwrap();
    let m = g.mean(sq).unwrap();
    let half = g.scale(m, 0.5).unwrap();
    g.backward(half).unwrap();
    let grad = g.grad(x).unwrap().data().to_vec();
    for (a, b) in grad.iter().zip([1.0 / 3.0, 2.0 / 3.0, 1.0]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(g.backward(x).unwrap_err(), AdError::NonScalarRoot(vec![2]));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.param(random(&mut rng, &[2, 6, 6], -1.0, 1.0));
        let k = Arc::new(random(&mut rng, &[4, 2, 3, 3], -1.0, 1.0));
        let y = g.conv2d_fixed(x, k, 2).unwrap();
        let y = g.sigmoid(y).unwrap();
        let y = g.l2_norm(y).unwrap();
        g.backward(y).unwrap();
        (g.value(y).clone(), g.grad(x).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn logdet_of_scaled_identity(k in 1usize..=16, c in 0.01f64..100.0) {
        let mut g = Graph::new();
        let n = g.constant(Tensor::new([k, k], Tensor::identity(k).data().iter().map(|x| x * c).collect()).unwrap());
        let v = g.logdet_psd(n).unwrap();
        let want = k as f64 * c.ln();
        prop_assert!((g.item(v).unwrap() - want).abs() < 1e-10 * (1.0 + want.abs()));
    }

    #[test]
    fn blur_with_normalized_kernel_preserves_constants(c in -3.0f64..3.0, taps in 1usize..6, stride in 1usize..3) {
        let kernel: Vec<f64> = (0..2 * taps + 1).map(|i| 1.0 + i as f64).collect();
        let total: f64 = kernel.iter().sum();
        let kernel = Tensor::new([1, 2 * taps + 1], kernel.iter().map(|x| x / total).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 6, 7], c));
        let y = g.depthwise_fixed(x, Arc::new(kernel), stride).unwrap();
        prop_assert!(g.value(y).data().iter().all(|v| (v - c).abs() < 1e-12));
    }
}
