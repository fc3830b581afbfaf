//! Central finite-difference gradient checking.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Result, Tensor, Var};

/// Outcome of comparing analytic and numerical gradients for each input.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.item(out)
}

/// Compares the reverse-mode gradient of the scalar `f` with central
/// differences of step `h`, for every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape().to_vec());
        for k in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[k] = x0 - h;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[k] = x0;
            num.data_mut()[k] = (fp - fm) / (2.0 * h);
        }
        numeric.push(num);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.l2_norm().max(n.l2_norm());
            if scale == 0.0 {
                0.0
            } else {
                diff / scale.max(1e-12)
            }
        })
        .collect();
    Ok(GradcheckReport { rel_errors, analytic, numeric })
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Magnitudes in `[0.1, 1.5]` with random signs, away from kinks at zero.
    OffZero,
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    domain: Domain,
    f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], domain: Domain, f: OpFn) -> Case {
    Case { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), domain, f }
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-1.5..1.5),
            Domain::Positive => rng.random_range(0.2..2.0),
            Domain::OffZero => {
                let m: f64 = rng.random_range(0.1..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sample shape")
}

fn catalogue() -> Vec<Case> {
    use Domain::*;
    let mut krng = ChaCha8Rng::seed_from_u64(5);
    let k = Arc::new(sample(&mut krng, &[3, 2, 3, 3], Any));
    let k2 = k.clone();
    let dk = Arc::new(sample(&mut krng, &[1, 5], Positive));
    vec![
        case("add", &[&[2, 3], &[2, 3]], Any, Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", &[&[2, 3], &[2, 3]], Any, Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", &[&[2, 3], &[2, 3]], Any, Box::new(|g, v| g.mul(v[0], v[1]))),
        case("div", &[&[2, 3], &[2, 3]], Positive, Box::new(|g, v| g.div(v[0], v[1]))),
        case("broadcast mul", &[&[1], &[3, 2]], Any, Box::new(|g, v| g.mul(v[0], v[1]))),
        case("broadcast add", &[&[3, 2], &[1]], Any, Box::new(|g, v| g.add(v[0], v[1]))),
        case("dot", &[&[5], &[5]], Any, Box::new(|g, v| g.dot(v[0], v[1]))),
        case("scale", &[&[4]], Any, Box::new(|g, v| g.scale(v[0], -2.5))),
        case("offset", &[&[4]], Any, Box::new(|g, v| g.offset(v[0], 0.3))),
        case("neg", &[&[4]], Any, Box::new(|g, v| g.neg(v[0]))),
        case("square", &[&[4]], Any, Box::new(|g, v| g.square(v[0]))),
        case("relu", &[&[6]], OffZero, Box::new(|g, v| g.relu(v[0]))),
        case("leaky_relu", &[&[6]], OffZero, Box::new(|g, v| g.leaky_relu(v[0], 0.2))),
        case("sigmoid", &[&[6]], Any, Box::new(|g, v| g.sigmoid(v[0]))),
        case("tanh", &[&[6]], Any, Box::new(|g, v| g.tanh(v[0]))),
        case("sin", &[&[6]], Any, Box::new(|g, v| g.sin(v[0]))),
        case("cos", &[&[6]], Any, Box::new(|g, v| g.cos(v[0]))),
        case("sqrt", &[&[6]], Positive, Box::new(|g, v| g.sqrt(v[0]))),
        case("exp", &[&[6]], Any, Box::new(|g, v| g.exp(v[0]))),
        case("ln", &[&[6]], Positive, Box::new(|g, v| g.ln(v[0]))),
        case("powf", &[&[6]], Positive, Box::new(|g, v| g.powf(v[0], 16.0))),
        case("huber", &[&[8]], OffZero, Box::new(|g, v| g.huber(v[0], 0.5))),
        case("clamp_min", &[&[8]], OffZero, Box::new(|g, v| g.clamp_min(v[0], 0.05))),
        case("clamp", &[&[8]], OffZero, Box::new(|g, v| g.clamp(v[0], -0.7, 0.9))),
        case("sum", &[&[3, 4]], Any, Box::new(|g, v| g.sum(v[0]))),
        case("mean", &[&[3, 4]], Any, Box::new(|g, v| g.mean(v[0]))),
        case("l2_norm", &[&[3, 4]], Any, Box::new(|g, v| g.l2_norm(v[0]))),
        case("concat", &[&[1, 3], &[2, 3]], Any, Box::new(|g, v| g.concat(&[v[0], v[1]]))),
        case("reshape", &[&[2, 6]], Any, Box::new(|g, v| g.reshape(v[0], [3, 4]))),
        case("gather", &[&[5]], Any, Box::new(|g, v| g.gather(v[0], Arc::new(vec![4, 0, 0, 2]), [2, 2]))),
        case("slice", &[&[6]], Any, Box::new(|g, v| g.slice(v[0], 2, 3))),
        case("select", &[&[6]], Any, Box::new(|g, v| g.select(v[0], 4))),
        case("row", &[&[3, 4]], Any, Box::new(|g, v| g.row(v[0], 1))),
        case("transpose", &[&[2, 3]], Any, Box::new(|g, v| g.transpose(v[0]))),
        case("repeat", &[&[1, 2, 2]], Any, Box::new(|g, v| g.repeat(v[0], 3))),
        case("log_softmax", &[&[5]], Any, Box::new(|g, v| g.log_softmax(v[0]))),
        case("matmul", &[&[3, 4], &[4, 2]], Any, Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("downsample2x", &[&[2, 4, 6]], Any, Box::new(|g, v| g.downsample2x(v[0]))),
        case("conv2d stride 1", &[&[2, 5, 6]], Any, Box::new(move |g, v| g.conv2d_fixed(v[0], k.clone(), 1))),
        case("conv2d stride 2", &[&[2, 6, 6]], Any, Box::new(move |g, v| g.conv2d_fixed(v[0], k2.clone(), 2))),
        case("depthwise", &[&[2, 4, 5]], Any, Box::new(move |g, v| g.depthwise_fixed(v[0], dk.clone(), 1))),
        case(
            "logdet_psd",
            &[&[3, 5]],
            Any,
            Box::new(|g, v| {
                let t = g.transpose(v[0])?;
                let n = g.matmul(v[0], t)?;
                g.logdet_psd(n)
            }),
        ),
    ]
}

/// Worst relative gradient error of one op over several random inputs.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

/// Gradchecks every op of the graph on `trials` random inputs. Non-scalar
/// outputs are reduced by a fixed random projection so every element counts.
pub fn op_suite(trials: u64, h: f64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for c in catalogue() {
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let inputs: Vec<Tensor> = c.shapes.iter().map(|s| sample(&mut rng, s, c.domain)).collect();
            let f = &c.f;
            let report = gradcheck(
                |g, v| {
                    let y = f(g, v)?;
                    let mut prng = ChaCha8Rng::seed_from_u64(77 + trial);
                    let w = g.constant(sample(&mut prng, g.shape(y), Domain::Any));
                    g.dot(y, w)
                },
                &inputs,
                h,
            )?;
            worst = worst.max(report.max_rel_error());
        }
        out.push(OpCheck { name: c.name, max_rel_error: worst });
    }
    Ok(out)
}
