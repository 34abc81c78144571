use pgnniv::constitutive::ModelKind;
use pgnniv::datagen::{generate, Problem, ProblemSpec};
use pgnniv::network::{Batch, PenaltyWeights, Pgnniv};
use pgnniv::operators::Grid1D;
use pgnniv::tensor::{Activation, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-5;

/// Relative discrepancy; `floor` only guards against vanishing gradients.
fn discrepancy(ad: f64, fd: f64, floor: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor)
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences in every input entry.
fn check_op(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars);
        let root = g.mse(out).unwrap();
        (g, vars, root)
    };
    let (mut g, vars, root) = eval(&inputs);
    g.backward(root).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let grad = g.grad(*v).expect("gradient");
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let fp = {
                let (g, _, r) = eval(&plus);
                g.value(r).data()[0]
            };
            let fm = {
                let (g, _, r) = eval(&minus);
                g.value(r).data()[0]
            };
            let fd = (fp - fm) / (2.0 * STEP);
            let d = discrepancy(grad.data()[j], fd, 1e-6);
            assert!(d < REL_TOL, "{name}: input {i}[{j}] ad {} fd {fd} ({d:e})", grad.data()[j]);
        }
    }
}

#[test]
fn elementwise_and_linear_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    check_op("matmul", vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]).unwrap());

    let p = random(&mut rng, &[3, 4], 0.5, 2.0);
    let q = random(&mut rng, &[3, 4], 0.5, 2.0);
    check_op("mul", vec![p.clone(), q.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check_op("div", vec![p.clone(), q.clone()], |g, v| g.div(v[0], v[1]).unwrap());
    check_op("sub", vec![p.clone(), q.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check_op("scalar broadcast", vec![p.clone(), Tensor::scalar(0.7)], |g, v| {
        g.mul(v[0], v[1]).unwrap()
    });
    check_op("sigmoid", vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check_op("exp", vec![a.clone()], |g, v| g.exp(v[0]));
    check_op("ln", vec![p.clone()], |g, v| g.ln(v[0]).unwrap());
    check_op("powf", vec![p.clone()], |g, v| g.powf(v[0], 1.7).unwrap());
    check_op("square", vec![a.clone()], |g, v| g.square(v[0]));
    check_op("bias", vec![a.clone(), Tensor::vector(vec![0.1, -0.2, 0.3, 0.4])], |g, v| {
        g.add_bias(v[0], v[1]).unwrap()
    });
    check_op("slice/concat", vec![a.clone(), p.clone()], |g, v| {
        let s = g.slice_cols(v[0], 1, 3).unwrap();
        g.concat_cols(&[s, v[1]]).unwrap()
    });
    check_op("reshape", vec![a], |g, v| {
        let r = g.reshape(v[0], &[2, 6]).unwrap();
        g.exp(r)
    });
}

#[test]
fn conv1d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let signal = random(&mut rng, &[2, 2, 7], -1.0, 1.0);
    let kernel = random(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let pre = random(&mut rng, &[3], -0.5, 0.5);
    let post = random(&mut rng, &[3], -0.5, 0.5);
    for act in [Activation::Identity, Activation::Sigmoid] {
        check_op(
            "conv1d",
            vec![signal.clone(), kernel.clone(), pre.clone(), post.clone()],
            |g, v| g.conv1d(v[0], v[1], Some(v[2]), Some(v[3]), act).unwrap(),
        );
    }
}

fn batch(problem: Problem) -> Batch {
    let spec = ProblemSpec {
        problem,
        grid_n: 10,
        samples: 5,
        noise: 0.0,
        seed: 3,
    };
    let data = generate(&spec).unwrap();
    Batch::from_samples(&data.train[..4]).unwrap()
}

#[test]
fn network_cost_gradient_matches_finite_differences() {
    let weights = PenaltyWeights {
        c0: 1.0,
        c1: 1.0,
        c2: 1.0,
        c3: 1.0,
    };
    let cases = [
        (ModelKind::ScalarK, Problem::Homogeneous),
        (ModelKind::DiagonalK, Problem::HeterogeneousLinearK),
        (ModelKind::Cnn2l, Problem::LinearDiff),
        (ModelKind::Cnn3l { width: 3 }, Problem::ExponentialDiff),
        (ModelKind::Parametric, Problem::ExponentialDiff),
    ];
    for (kind, problem) in cases {
        let batch = batch(problem);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = Pgnniv::init(kind, Grid1D::new(10).unwrap(), 6, &mut rng);
        let mut g = Graph::new();
        let (vars, fv) = net.forward_graph(&mut g, &batch, &weights, true).unwrap();
        let cf = g.value(fv.cf).data()[0];
        g.backward(fv.cf).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|v| g.grad(*v).unwrap()).collect();
        let floor = cf.abs() * 1e-14;
        let mut worst: f64 = 0.0;
        for (i, grad) in grads.iter().enumerate() {
            for j in 0..grad.len() {
                let mut cost_at = |delta: f64| {
                    let orig = net.parameters_mut()[i].data()[j];
                    net.parameters_mut()[i].data_mut()[j] = orig + delta;
                    let c = net.forward(&batch, &weights).unwrap().cf;
                    net.parameters_mut()[i].data_mut()[j] = orig;
                    c
                };
                let fd = (cost_at(STEP) - cost_at(-STEP)) / (2.0 * STEP);
                let d = discrepancy(grad.data()[j], fd, floor);
                worst = worst.max(d);
                assert!(d < REL_TOL, "{kind}: param {i}[{j}] ad {} fd {fd} ({d:e})", grad.data()[j]);
            }
        }
        assert!(worst.is_finite());
    }
}
