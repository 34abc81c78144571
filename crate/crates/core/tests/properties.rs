use pgnniv::constitutive::{ConstitutiveModel, ModelKind};
use pgnniv::datagen::{analytic_solution, exact_flux, generate, Problem, ProblemSpec};
use pgnniv::evaluation::{error_table, sample_errors};
use pgnniv::network::{Batch, PenaltyWeights, Pgnniv};
use pgnniv::operators::{element_average, forward_diff, Grid1D};
use pgnniv::tensor::{mse_value, Activation, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn conv(signal: &Tensor, kernel: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let s = g.constant(signal.clone());
    let k = g.constant(kernel.clone());
    let out = g.conv1d(s, k, None, None, Activation::Identity).unwrap();
    g.value(out).data().to_vec()
}

fn combine(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Tensor {
    let data = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
}

fn apply_nodal(field: &[Vec<f64>], f: impl Fn(&mut Graph, pgnniv::tensor::Var) -> pgnniv::tensor::Var) -> Tensor {
    let mut g = Graph::new();
    let t = g.constant(Tensor::from_rows(field).unwrap());
    let out = f(&mut g, t);
    g.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv1d_is_linear_in_signal_and_kernel(
        x in tensor(&[2, 2, 8]),
        y in tensor(&[2, 2, 8]),
        k in tensor(&[2, 3, 3]),
        k2 in tensor(&[2, 3, 3]),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let lhs = conv(&combine(a, &x, b, &y), &k);
        let (cx, cy) = (conv(&x, &k), conv(&y, &k));
        for i in 0..lhs.len() {
            prop_assert!(close(lhs[i], a * cx[i] + b * cy[i], 1e-12));
        }
        let lhs = conv(&x, &combine(a, &k, b, &k2));
        let ck2 = conv(&x, &k2);
        for i in 0..lhs.len() {
            prop_assert!(close(lhs[i], a * cx[i] + b * ck2[i], 1e-12));
        }
    }

    #[test]
    fn mse_is_non_negative_and_zero_only_at_zero(x in tensor(&[3, 5]), zero_mask in prop::collection::vec(any::<bool>(), 15)) {
        let masked: Vec<f64> = x.data().iter().zip(&zero_mask).map(|(v, z)| if *z { 0.0 } else { *v }).collect();
        let t = Tensor::new(vec![3, 5], masked.clone()).unwrap();
        let m = mse_value(&t);
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m == 0.0, masked.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_diff_kills_constants_and_is_exact_on_affine(
        n in 3usize..30,
        c in -5.0f64..5.0,
        slope in -5.0f64..5.0,
    ) {
        let grid = Grid1D::new(n).unwrap();
        let xs = grid.node_positions();
        let constant = apply_nodal(&[vec![c; n]], |g, v| forward_diff(g, v, &grid).unwrap());
        prop_assert!(constant.data().iter().all(|d| *d == 0.0));
        let affine: Vec<f64> = xs.iter().map(|x| c + slope * x).collect();
        let d = apply_nodal(&[affine], |g, v| forward_diff(g, v, &grid).unwrap());
        for v in d.data() {
            prop_assert!(close(*v, slope, 1e-10));
        }
    }

    #[test]
    fn difference_and_average_commute(field in prop::collection::vec(-3.0f64..3.0, 3..20)) {
        let grid = Grid1D::new(field.len()).unwrap();
        let da = apply_nodal(&[field.clone()], |g, v| {
            let d = forward_diff(g, v, &grid).unwrap();
            element_average(g, d).unwrap()
        });
        let ad = apply_nodal(&[field], |g, v| {
            let a = element_average(g, v).unwrap();
            forward_diff(g, a, &grid).unwrap()
        });
        prop_assert_eq!(da.shape(), ad.shape());
        for (p, q) in da.data().iter().zip(ad.data()) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(q.abs()).max(1.0) * grid.elements() as f64);
        }
    }

    #[test]
    fn parametric_gamma_gradient(u in 0.1f64..0.9, alpha in 0.2f64..1.5, beta in 0.2f64..2.0, gamma in 0.5f64..2.0) {
        let model = ConstitutiveModel::Parametric {
            alpha: Tensor::scalar(alpha),
            beta: Tensor::scalar(beta),
            gamma: Tensor::scalar(gamma),
        };
        let k_at = |gm: f64| {
            let m = ConstitutiveModel::Parametric {
                alpha: Tensor::scalar(alpha),
                beta: Tensor::scalar(beta),
                gamma: Tensor::scalar(gm),
            };
            let mut g = Graph::new();
            let vars = m.bind(&mut g, false);
            let um = g.constant(Tensor::new(vec![1, 1], vec![u]).unwrap());
            let k = m.eval_k(&mut g, &vars, um).unwrap();
            g.value(k).data()[0]
        };
        // d(k)/dγ via backward on k itself (mse of a 1×1 tensor is k²)
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let um = g.constant(Tensor::new(vec![1, 1], vec![u]).unwrap());
        let k = model.eval_k(&mut g, &vars, um).unwrap();
        let root = g.mse(k).unwrap();
        g.backward(root).unwrap();
        let kv = g.value(k).data()[0];
        let ad = g.grad(vars[2]).unwrap().data()[0] / (2.0 * kv);
        let closed = beta * u.powf(gamma) * u.ln();
        let fd = (k_at(gamma + 1e-6) - k_at(gamma - 1e-6)) / 2e-6;
        prop_assert!((ad - closed).abs() / closed.abs().max(1.0) < 1e-12);
        prop_assert!((ad - fd).abs() / fd.abs().max(1.0) < 1e-5);
    }

    #[test]
    fn flux_is_uniform_along_the_bar(g1 in 0.1f64..0.9, g2 in 0.1f64..0.9, pick in 0usize..5) {
        let problem = [
            Problem::Homogeneous,
            Problem::HeterogeneousLinearK,
            Problem::ConstantDiff,
            Problem::LinearDiff,
            Problem::ExponentialDiff,
        ][pick];
        let (lo, hi) = problem.bc_range();
        let (g1, g2) = (lo + (hi - lo) * g1, lo + (hi - lo) * g2);
        let q = exact_flux(problem, g1, g2).unwrap();
        let left = analytic_solution(problem, g1, g2, 0.0).unwrap().q;
        let right = analytic_solution(problem, g1, g2, 1.0).unwrap().q;
        prop_assert_eq!(left, q);
        prop_assert_eq!(right, q);
    }
}

fn dataset(problem: Problem, samples: usize, seed: u64) -> pgnniv::datagen::Dataset {
    generate(&ProblemSpec {
        problem,
        grid_n: 10,
        samples,
        noise: 0.0,
        seed,
    })
    .unwrap()
}

#[test]
fn forward_and_gradients_are_bit_identical_across_runs() {
    let data = dataset(Problem::ExponentialDiff, 40, 4);
    let batch = Batch::from_samples(&data.train).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Pgnniv::init(ModelKind::Cnn3l { width: 5 }, Grid1D::new(10).unwrap(), 15, &mut rng);
        let mut g = Graph::new();
        let (vars, fv) = net.forward_graph(&mut g, &batch, &PenaltyWeights::default(), true).unwrap();
        g.backward(fv.cf).unwrap();
        let grads: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().into_data()).collect();
        (g.value(fv.y).data().to_vec(), g.value(fv.cf).data()[0], grads)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
    assert_eq!(a.2, b.2);
}

#[test]
fn exclusions_account_for_every_test_sample() {
    let data = dataset(Problem::LinearDiff, 500, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Pgnniv::init(ModelKind::Cnn2l, Grid1D::new(10).unwrap(), 15, &mut rng);
    let errors = sample_errors(&net, Problem::LinearDiff, &data.test).unwrap();
    let table = error_table(&errors).unwrap();
    assert_eq!(table.samples, data.test.len());
    assert_eq!(table.u.count + table.u.flagged, data.test.len());
    for s in [table.q.unwrap(), table.k.unwrap()] {
        assert_eq!(s.count + s.flagged + table.excluded_near_diagonal, data.test.len());
    }
    assert!(table.excluded_near_diagonal > 0);
}
