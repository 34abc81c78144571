//! The full forward pass: ROM predictor, constitutive subnetwork, the three
//! physics residuals and the penalty-weighted cost.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constitutive::{ConstitutiveModel, ModelKind};
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::operators::{concat_boundary_flows, element_average, forward_diff, Grid1D};
use crate::tensor::{Graph, Tensor, Var};

pub const INPUT_WIDTH: usize = 4;
pub const DEFAULT_HIDDEN_WIDTH: usize = 15;

/// Dense layer `x·W + b`, weight stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape and length agree"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Multilayer perceptron `4 → m → m → n`: sigmoid hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct RomNetwork {
    pub layers: Vec<Dense>,
}

impl RomNetwork {
    pub fn new(hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let widths = [INPUT_WIDTH, hidden, hidden, outputs];
        Self {
            layers: widths
                .windows(2)
                .map(|w| Dense::glorot(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("rom.{i}.weight"), &l.weight),
                    (format!("rom.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect()
    }

    /// `N×4` inputs to `N×n` nodal predictions.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in vars.chunks_exact(2).enumerate() {
            let z = g.matmul(h, pair[0])?;
            let z = g.add_bias(z, pair[1])?;
            h = if i < last { g.sigmoid(z) } else { z };
        }
        Ok(h)
    }
}

/// Penalty coefficients of the cost function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            c0: 1e7,
            c1: 1e2,
            c2: 1e3,
            c3: 1e3,
        }
    }
}

impl PenaltyWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.c0, self.c1, self.c2, self.c3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config(format!("penalty weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Batch tensors, shared so that rebuilding the graph each iteration is cheap.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `N×4` rows `(g1, g2, q1, q2)`.
    pub inputs: Arc<Tensor>,
    /// `N×n` observed field.
    pub u: Arc<Tensor>,
    pub g1: Arc<Tensor>,
    pub g2: Arc<Tensor>,
    pub q1: Arc<Tensor>,
    pub q2: Arc<Tensor>,
    /// Optional nodal source `N×n`; zero when absent.
    pub source: Option<Arc<Tensor>>,
}

fn column(samples: &[Sample], f: impl Fn(&Sample) -> f64) -> Arc<Tensor> {
    Arc::new(Tensor::new(vec![samples.len(), 1], samples.iter().map(f).collect()).expect("column"))
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let n = samples.first().ok_or(Error::EmptyBatch)?.u.len();
        if let Some(bad) = samples.iter().find(|s| s.u.len() != n) {
            return Err(Error::GridMismatch {
                expected: n,
                got: bad.u.len(),
            });
        }
        let inputs = samples
            .iter()
            .flat_map(|s| [s.g1, s.g2, s.q1, s.q2])
            .collect();
        let u = samples.iter().flat_map(|s| s.u.iter().copied()).collect();
        Ok(Self {
            inputs: Arc::new(Tensor::new(vec![samples.len(), INPUT_WIDTH], inputs)?),
            u: Arc::new(Tensor::new(vec![samples.len(), n], u)?),
            g1: column(samples, |s| s.g1),
            g2: column(samples, |s| s.g2),
            q1: column(samples, |s| s.q1),
            q2: column(samples, |s| s.q2),
            source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> usize {
        self.u.shape()[1]
    }
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub y: Var,
    pub q: Var,
    pub q_ext: Var,
    pub f_res: Var,
    pub e: Var,
    pub pi1: Var,
    pub pi2: Var,
    pub pi3: Var,
    pub cf: Var,
}

/// Materialized forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBundle {
    pub y: Tensor,
    pub q: Tensor,
    pub q_ext: Tensor,
    pub f_res: Tensor,
    pub e: Tensor,
    pub pi1: Tensor,
    pub pi2: Tensor,
    pub pi3: Tensor,
    /// `[MSE(e), MSE(π1), MSE(π2), MSE(π3)]`.
    pub mse: [f64; 4],
    pub cf: f64,
}

pub const TERM_NAMES: [&str; 4] = ["e", "pi1", "pi2", "pi3"];

/// Residuals and cost for a given nodal prediction `y` (`N×n`).
pub fn physics(
    g: &mut Graph,
    model: &ConstitutiveModel,
    model_vars: &[Var],
    y: Var,
    batch: &Batch,
    weights: &PenaltyWeights,
    grid: &Grid1D,
) -> Result<ForwardVars> {
    let n = grid.nodes();
    if batch.nodes() != n {
        return Err(Error::GridMismatch {
            expected: n,
            got: batch.nodes(),
        });
    }
    let u = g.constant_shared(batch.u.clone());
    let e = g.sub(y, u)?;

    let dy = forward_diff(g, y, grid)?;
    let u_m = element_average(g, y)?;
    let k = model.eval_k(g, model_vars, u_m)?;
    let kd = g.mul(k, dy)?;
    let q = g.neg(kd);

    let q1 = g.constant_shared(batch.q1.clone());
    let q2 = g.constant_shared(batch.q2.clone());
    let q_ext = concat_boundary_flows(g, q, q1, q2)?;
    let f_res = forward_diff(g, q_ext, grid)?;
    let pi1 = match &batch.source {
        Some(f) => {
            let f = g.constant_shared(f.clone());
            g.sub(f_res, f)?
        }
        None => f_res,
    };

    let g1 = g.constant_shared(batch.g1.clone());
    let g2 = g.constant_shared(batch.g2.clone());
    let y_first = g.slice_cols(y, 0, 1)?;
    let y_last = g.slice_cols(y, n - 1, n)?;
    let a = g.sub(y_first, g1)?;
    let b = g.sub(y_last, g2)?;
    let pi2 = g.concat_cols(&[a, b])?;

    let q_first = g.slice_cols(q, 0, 1)?;
    let q_last = g.slice_cols(q, n - 2, n - 1)?;
    let a = g.sub(q_first, q1)?;
    let b = g.sub(q_last, q2)?;
    let pi3 = g.concat_cols(&[a, b])?;

    let mut cf = None;
    for ((term, name), c) in [e, pi1, pi2, pi3].into_iter().zip(TERM_NAMES).zip(weights.as_array()) {
        let m = g.mse(term)?;
        if !g.value(m).data()[0].is_finite() {
            return Err(Error::NonFinite {
                term: name,
                iteration: None,
            });
        }
        let wm = g.scale(m, c);
        cf = Some(match cf {
            None => wm,
            Some(acc) => g.add(acc, wm)?,
        });
    }
    let cf = cf.expect("four terms");
    if !g.value(cf).data()[0].is_finite() {
        return Err(Error::NonFinite {
            term: "cf",
            iteration: None,
        });
    }
    Ok(ForwardVars {
        y,
        q,
        q_ext,
        f_res,
        e,
        pi1,
        pi2,
        pi3,
        cf,
    })
}

/// Predicted fields without residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// `N×n` nodal field.
    pub y: Tensor,
    /// `N×(n−1)` element diffusivity.
    pub k: Tensor,
    /// `N×(n−1)` element flux.
    pub q: Tensor,
}

/// ROM plus constitutive subnetwork on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgnniv {
    pub rom: RomNetwork,
    pub model: ConstitutiveModel,
    pub grid: Grid1D,
}

impl Pgnniv {
    pub fn init(kind: ModelKind, grid: Grid1D, hidden: usize, rng: &mut impl Rng) -> Self {
        let rom = RomNetwork::new(hidden, grid.nodes(), rng);
        let model = ConstitutiveModel::init(kind, &grid, rng);
        Self { rom, model, grid }
    }

    /// Trainable parameters in optimizer order: ROM layers, then the model.
    pub fn parameter_list(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.rom.named_params();
        out.extend(
            self.model
                .named_params()
                .into_iter()
                .map(|(name, t)| (format!("model.{name}"), t)),
        );
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.rom.params_mut();
        out.extend(self.model.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.rom.param_count() + self.model.param_count()
    }

    /// Builds the full graph. Returns the bound parameter handles (in
    /// [`Pgnniv::parameter_list`] order) and the forward handles.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        batch: &Batch,
        weights: &PenaltyWeights,
        trainable: bool,
    ) -> Result<(Vec<Var>, ForwardVars)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rom_vars = self.rom.bind(g, trainable);
        let model_vars = self.model.bind(g, trainable);
        let x = g.constant_shared(batch.inputs.clone());
        let y = self.rom.forward(g, &rom_vars, x)?;
        let fv = physics(g, &self.model, &model_vars, y, batch, weights, &self.grid)?;
        let mut vars = rom_vars;
        vars.extend(model_vars);
        Ok((vars, fv))
    }

    pub fn forward(&self, batch: &Batch, weights: &PenaltyWeights) -> Result<ForwardBundle> {
        let mut g = Graph::new();
        let (_, fv) = self.forward_graph(&mut g, batch, weights, false)?;
        Ok(bundle(&g, &fv))
    }

    /// Runs the ROM and the constitutive model on `N×4` inputs.
    pub fn infer(&self, inputs: &Tensor) -> Result<Inference> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut g = Graph::new();
        let rom_vars = self.rom.bind(&mut g, false);
        let model_vars = self.model.bind(&mut g, false);
        let x = g.constant(inputs.clone());
        let y = self.rom.forward(&mut g, &rom_vars, x)?;
        let u_m = element_average(&mut g, y)?;
        let k = self.model.eval_k(&mut g, &model_vars, u_m)?;
        let q = self.model.flux(&mut g, &model_vars, y, &self.grid)?;
        Ok(Inference {
            y: g.value(y).clone(),
            k: g.value(k).clone(),
            q: g.value(q).clone(),
        })
    }
}

/// Copies the forward values out of `g`.
pub fn bundle(g: &Graph, fv: &ForwardVars) -> ForwardBundle {
    let t = |v: Var| g.value(v).clone();
    let mse = [fv.e, fv.pi1, fv.pi2, fv.pi3].map(|v| crate::tensor::mse_value(g.value(v)));
    ForwardBundle {
        y: t(fv.y),
        q: t(fv.q),
        q_ext: t(fv.q_ext),
        f_res: t(fv.f_res),
        e: t(fv.e),
        pi1: t(fv.pi1),
        pi2: t(fv.pi2),
        pi3: t(fv.pi3),
        mse,
        cf: g.value(fv.cf).data()[0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{exact_flux, exact_profile, Problem};
    use crate::tensor::mse_value;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_samples(problem: Problem, grid: &Grid1D, bcs: &[(f64, f64)]) -> Vec<Sample> {
        bcs.iter()
            .map(|&(g1, g2)| {
                let u = exact_profile(problem, g1, g2, grid).unwrap();
                let q = exact_flux(problem, g1, g2).unwrap();
                Sample {
                    g1,
                    g2,
                    q1: q,
                    q2: q,
                    u: u.clone(),
                    u_clean: u,
                }
            })
            .collect()
    }

    /// Forward with the ROM replaced by the observed data itself.
    fn stub_forward(
        model: &ConstitutiveModel,
        batch: &Batch,
        weights: &PenaltyWeights,
        grid: &Grid1D,
    ) -> ForwardBundle {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let y = g.constant_shared(batch.u.clone());
        let fv = physics(&mut g, model, &vars, y, batch, weights, grid).unwrap();
        bundle(&g, &fv)
    }

    const BCS: [(f64, f64); 4] = [(0.1, 0.9), (0.7, 0.2), (0.31, 0.79), (0.5, 0.5)];

    #[test]
    fn homogeneous_exact_stub_has_no_residual() {
        let grid = Grid1D::new(10).unwrap();
        let batch = Batch::from_samples(&exact_samples(Problem::Homogeneous, &grid, &BCS)).unwrap();
        let model = ConstitutiveModel::ScalarK {
            k: Tensor::scalar(1.0),
        };
        let b = stub_forward(&model, &batch, &PenaltyWeights::default(), &grid);
        assert!(b.e.data().iter().all(|v| *v == 0.0));
        assert!(b.pi2.data().iter().all(|v| v.abs() < 1e-15));
        assert!(b.pi3.data().iter().all(|v| v.abs() < 1e-12));
        assert!(b.pi1.data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(b.y.shape(), &[4, 10]);
        assert_eq!(b.q.shape(), &[4, 9]);
        assert_eq!(b.q_ext.shape(), &[4, 11]);
        assert_eq!(b.f_res.shape(), &[4, 10]);
        assert_eq!(b.pi2.shape(), &[4, 2]);
        assert_eq!(b.pi3.shape(), &[4, 2]);
    }

    fn diagonal_midpoint_k(grid: &Grid1D) -> ConstitutiveModel {
        ConstitutiveModel::DiagonalK {
            k: Tensor::vector(grid.element_midpoints().iter().map(|x| x + 1.0).collect()),
        }
    }

    #[test]
    fn heterogeneous_stub_residual_is_first_order() {
        // max |π1| over a (0.31, 0.79) sample, measured at n = 10 and n = 20
        let mut maxes = Vec::new();
        for n in [10, 20] {
            let grid = Grid1D::new(n).unwrap();
            let batch = Batch::from_samples(&exact_samples(
                Problem::HeterogeneousLinearK,
                &grid,
                &[(0.31, 0.79)],
            ))
            .unwrap();
            let b = stub_forward(&diagonal_midpoint_k(&grid), &batch, &PenaltyWeights::default(), &grid);
            assert!(b.e.data().iter().all(|v| *v == 0.0));
            maxes.push(b.pi1.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        assert!(maxes[0] < 0.5 && maxes[0] > 1e-4, "{maxes:?}");
        let ratio = maxes[0] / maxes[1];
        assert!(ratio > 1.6 && ratio < 2.5, "{maxes:?}");
    }

    #[test]
    fn scalar_k_cannot_fit_heterogeneous_flow() {
        let grid = Grid1D::new(10).unwrap();
        let batch =
            Batch::from_samples(&exact_samples(Problem::HeterogeneousLinearK, &grid, &BCS)).unwrap();
        let floor = stub_forward(&diagonal_midpoint_k(&grid), &batch, &PenaltyWeights::default(), &grid).mse[1];
        // MSE(π1) is quadratic in k; scan finely around the optimum
        let best = (1..=4000)
            .map(|i| {
                let model = ConstitutiveModel::ScalarK {
                    k: Tensor::scalar(i as f64 * 5e-4),
                };
                stub_forward(&model, &batch, &PenaltyWeights::default(), &grid).mse[1]
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best > 10.0 * floor, "best {best} floor {floor}");
    }

    #[test]
    fn cost_is_weighted_sum_of_terms() {
        let grid = Grid1D::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Pgnniv::init(ModelKind::Cnn3l { width: 5 }, grid, 15, &mut rng);
        let batch = Batch::from_samples(&exact_samples(Problem::ExponentialDiff, &grid, &BCS)).unwrap();
        let w = PenaltyWeights::default();
        let b = net.forward(&batch, &w).unwrap();
        let recomputed = w.c0 * mse_value(&b.e)
            + w.c1 * mse_value(&b.pi1)
            + w.c2 * mse_value(&b.pi2)
            + w.c3 * mse_value(&b.pi3);
        assert!((b.cf - recomputed).abs() <= 1e-12 * recomputed.abs().max(1.0));

        let zero = PenaltyWeights {
            c0: 1.0,
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
        };
        let b = net.forward(&batch, &zero).unwrap();
        assert_eq!(b.cf, mse_value(&b.e));
    }

    #[test]
    fn parameter_counts() {
        let grid = Grid1D::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rom = (4 * 15 + 15) + (15 * 15 + 15) + (15 * 10 + 10);
        for (kind, extra) in [
            (ModelKind::ScalarK, 1),
            (ModelKind::DiagonalK, 9),
            (ModelKind::Parametric, 3),
        ] {
            let net = Pgnniv::init(kind, grid, 15, &mut rng);
            assert_eq!(net.param_count(), rom + extra);
            let listed: usize = net.parameter_list().iter().map(|(_, t)| t.len()).sum();
            assert_eq!(listed, rom + extra);
        }
        let net = Pgnniv::init(ModelKind::DiagonalK, grid, 15, &mut rng);
        let names: Vec<String> = net.parameter_list().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().map(String::as_str), Some("rom.0.weight"));
        assert_eq!(names.last().map(String::as_str), Some("model.k"));
        assert_eq!(
            names,
            net.parameter_list().into_iter().map(|(n, _)| n).collect::<Vec<_>>()
        );
    }

    #[test]
    fn grid_mismatch_and_empty_batch() {
        let grid = Grid1D::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Pgnniv::init(ModelKind::ScalarK, grid, 15, &mut rng);
        let other = Grid1D::new(5).unwrap();
        let batch = Batch::from_samples(&exact_samples(Problem::Homogeneous, &other, &BCS)).unwrap();
        assert!(matches!(
            net.forward(&batch, &PenaltyWeights::default()),
            Err(Error::GridMismatch { expected: 10, got: 5 })
        ));
        assert!(matches!(Batch::from_samples(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn nan_is_reported_with_term() {
        let grid = Grid1D::new(5).unwrap();
        let mut samples = exact_samples(Problem::Homogeneous, &grid, &BCS);
        samples[1].u[2] = f64::NAN;
        let batch = Batch::from_samples(&samples).unwrap();
        let model = ConstitutiveModel::ScalarK {
            k: Tensor::scalar(1.0),
        };
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let y = g.constant(Tensor::zeros(&[4, 5]));
        let err = physics(&mut g, &model, &vars, y, &batch, &PenaltyWeights::default(), &grid).unwrap_err();
        assert!(matches!(err, Error::NonFinite { term: "e", .. }), "{err}");
    }

    #[test]
    fn infer_matches_forward() {
        let grid = Grid1D::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Pgnniv::init(ModelKind::Parametric, grid, 15, &mut rng);
        let batch = Batch::from_samples(&exact_samples(Problem::LinearDiff, &grid, &BCS[..3])).unwrap();
        let b = net.forward(&batch, &PenaltyWeights::default()).unwrap();
        let inf = net.infer(&batch.inputs).unwrap();
        assert_eq!(inf.y, b.y);
        assert_eq!(inf.q, b.q);
        assert_eq!(inf.k.shape(), &[3, 9]);
    }
}
