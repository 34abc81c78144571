//! Trainable constitutive subnetworks mapping element field values to element
//! diffusivities `k`.
//!
//! Two families:
//! - position-dependent ([`ConstitutiveModel::ScalarK`], [`ConstitutiveModel::DiagonalK`]):
//!   `k` is a free parameter per element and ignores the field;
//! - field-dependent ([`ConstitutiveModel::Cnn2L`], [`ConstitutiveModel::Cnn3L`],
//!   [`ConstitutiveModel::Parametric`]): `k[s, j] = f(u_m[s, j])`, applied
//!   pointwise through kernel-size-1 convolutions so the same law is shared by
//!   every element.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::operators::{element_average, forward_diff, Grid1D};
use crate::tensor::{Activation, Graph, Result as TensorResult, Tensor, TensorError, Var};

/// Floor applied to `u_m` before the fractional power of the parametric law.
pub const PARAMETRIC_FLOOR: f64 = 1e-6;
pub const DEFAULT_CNN_WIDTH: usize = 5;

const INIT_K: f64 = 0.5;
const KERNEL_INIT_RANGE: f64 = 0.3;

/// Which constitutive subnetwork to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelKind {
    ScalarK,
    DiagonalK,
    Cnn2l,
    Cnn3l { width: usize },
    Parametric,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::ScalarK => "scalar-k",
            ModelKind::DiagonalK => "diagonal-k",
            ModelKind::Cnn2l => "cnn2l",
            ModelKind::Cnn3l { .. } => "cnn3l",
            ModelKind::Parametric => "parametric",
        }
    }

    /// Whether `k` depends on the field value (as opposed to position only).
    pub fn field_dependent(&self) -> bool {
        !matches!(self, ModelKind::ScalarK | ModelKind::DiagonalK)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scalar-k" | "n1" => Ok(ModelKind::ScalarK),
            "diagonal-k" | "n2" => Ok(ModelKind::DiagonalK),
            "cnn2l" | "2l-cnn" => Ok(ModelKind::Cnn2l),
            "cnn3l" | "3l-cnn" => Ok(ModelKind::Cnn3l {
                width: DEFAULT_CNN_WIDTH,
            }),
            "parametric" => Ok(ModelKind::Parametric),
            other => Err(format!(
                "unknown model '{other}' (expected scalar-k, diagonal-k, cnn2l, cnn3l, parametric)"
            )),
        }
    }
}

/// Constitutive subnetwork with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstitutiveModel {
    ScalarK {
        k: Tensor,
    },
    DiagonalK {
        k: Tensor,
    },
    /// `k = w·u_m + b_pre + b_post`.
    Cnn2L {
        weight: Tensor,
        bias_pre: Tensor,
        bias_post: Tensor,
    },
    /// `h = σ(w1·u_m + b1_pre) + b1_post`, `k = w2·h + b2_pre + b2_post`.
    Cnn3L {
        w1: Tensor,
        b1_pre: Tensor,
        b1_post: Tensor,
        w2: Tensor,
        b2_pre: Tensor,
        b2_post: Tensor,
    },
    /// `k = α + β·u_m^γ`.
    Parametric {
        alpha: Tensor,
        beta: Tensor,
        gamma: Tensor,
    },
}

/// Where an exported constitutive curve is indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveAxis {
    FieldValue,
    Position,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstitutiveCurve {
    pub axis: CurveAxis,
    pub points: Vec<(f64, f64)>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], range: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-range..range)).collect(),
    )
    .expect("shape and length agree")
}

impl ConstitutiveModel {
    /// Fresh parameters. Diffusivity starts positive (about 0.5) for every
    /// variant; CNN kernels are drawn from `U[−0.3, 0.3]`.
    pub fn init(kind: ModelKind, grid: &Grid1D, rng: &mut impl Rng) -> Self {
        match kind {
            ModelKind::ScalarK => Self::ScalarK {
                k: Tensor::scalar(INIT_K),
            },
            ModelKind::DiagonalK => Self::DiagonalK {
                k: Tensor::filled(&[grid.elements()], INIT_K),
            },
            ModelKind::Cnn2l => Self::Cnn2L {
                weight: uniform(rng, &[1, 1, 1], KERNEL_INIT_RANGE),
                bias_pre: Tensor::zeros(&[1]),
                bias_post: Tensor::scalar(INIT_K),
            },
            ModelKind::Cnn3l { width } => Self::Cnn3L {
                w1: uniform(rng, &[1, width, 1], KERNEL_INIT_RANGE),
                b1_pre: Tensor::zeros(&[width]),
                b1_post: Tensor::zeros(&[width]),
                w2: uniform(rng, &[width, 1, 1], KERNEL_INIT_RANGE),
                b2_pre: Tensor::zeros(&[1]),
                b2_post: Tensor::scalar(INIT_K),
            },
            ModelKind::Parametric => Self::Parametric {
                alpha: Tensor::scalar(0.5),
                beta: Tensor::scalar(0.5),
                gamma: Tensor::scalar(1.0),
            },
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::ScalarK { .. } => ModelKind::ScalarK,
            Self::DiagonalK { .. } => ModelKind::DiagonalK,
            Self::Cnn2L { .. } => ModelKind::Cnn2l,
            Self::Cnn3L { w1, .. } => ModelKind::Cnn3l {
                width: w1.shape()[1],
            },
            Self::Parametric { .. } => ModelKind::Parametric,
        }
    }

    /// Parameters in their fixed order, with stable names.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::ScalarK { k } | Self::DiagonalK { k } => vec![("k", k)],
            Self::Cnn2L {
                weight,
                bias_pre,
                bias_post,
            } => vec![
                ("weight", weight),
                ("bias_pre", bias_pre),
                ("bias_post", bias_post),
            ],
            Self::Cnn3L {
                w1,
                b1_pre,
                b1_post,
                w2,
                b2_pre,
                b2_post,
            } => vec![
                ("w1", w1),
                ("b1_pre", b1_pre),
                ("b1_post", b1_post),
                ("w2", w2),
                ("b2_pre", b2_pre),
                ("b2_post", b2_post),
            ],
            Self::Parametric { alpha, beta, gamma } => {
                vec![("alpha", alpha), ("beta", beta), ("gamma", gamma)]
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::ScalarK { k } | Self::DiagonalK { k } => vec![k],
            Self::Cnn2L {
                weight,
                bias_pre,
                bias_post,
            } => vec![weight, bias_pre, bias_post],
            Self::Cnn3L {
                w1,
                b1_pre,
                b1_post,
                w2,
                b2_pre,
                b2_post,
            } => vec![w1, b1_pre, b1_post, w2, b2_pre, b2_post],
            Self::Parametric { alpha, beta, gamma } => vec![alpha, beta, gamma],
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Flattened parameter values, in `named_params` order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.named_params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// One name per entry of [`ConstitutiveModel::flat_params`]; multi-entry
    /// tensors get an index suffix (`k0`, `k1`, ...).
    pub fn flat_param_names(&self) -> Vec<String> {
        self.named_params()
            .iter()
            .flat_map(|(n, t)| {
                if t.len() == 1 {
                    vec![n.to_string()]
                } else {
                    (0..t.len()).map(|i| format!("{n}{i}")).collect()
                }
            })
            .collect()
    }

    /// Registers the parameters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Element diffusivities `N×(n−1)` from the element-averaged field `u_m`.
    /// `vars` are the bound parameters from [`ConstitutiveModel::bind`].
    pub fn eval_k(&self, g: &mut Graph, vars: &[Var], u_m: Var) -> TensorResult<Var> {
        let shape = g.value(u_m).shape().to_vec();
        let [rows, width] = shape[..] else {
            return Err(TensorError::Rank {
                op: "eval_k",
                expected: 2,
                shape,
            });
        };
        match self {
            Self::ScalarK { .. } => {
                let ones = g.constant(Tensor::filled(&[rows, width], 1.0));
                g.mul(ones, vars[0])
            }
            Self::DiagonalK { k } => {
                if k.len() != width {
                    return Err(TensorError::ShapeMismatch {
                        op: "eval_k",
                        left: vec![rows, width],
                        right: k.shape().to_vec(),
                    });
                }
                let ones = g.constant(Tensor::filled(&[rows, 1], 1.0));
                let row = g.reshape(vars[0], &[1, width])?;
                g.matmul(ones, row)
            }
            Self::Cnn2L { .. } => {
                let s = g.reshape(u_m, &[rows, 1, width])?;
                let k = g.conv1d(s, vars[0], Some(vars[1]), Some(vars[2]), Activation::Identity)?;
                g.reshape(k, &[rows, width])
            }
            Self::Cnn3L { .. } => {
                let s = g.reshape(u_m, &[rows, 1, width])?;
                let h = g.conv1d(s, vars[0], Some(vars[1]), Some(vars[2]), Activation::Sigmoid)?;
                let k = g.conv1d(h, vars[3], Some(vars[4]), Some(vars[5]), Activation::Identity)?;
                g.reshape(k, &[rows, width])
            }
            Self::Parametric { .. } => {
                // u^γ = exp(γ ln u), with u floored so the log stays finite
                let c = g.clamp_min(u_m, PARAMETRIC_FLOOR);
                let l = g.ln(c)?;
                let gl = g.mul(l, vars[2])?;
                let p = g.exp(gl);
                let bp = g.mul(p, vars[1])?;
                g.add(bp, vars[0])
            }
        }
    }

    /// Element flux `q = −k(u_m) ⊙ (u_{i+1} − u_i)/L` for a nodal field `u`.
    pub fn flux(&self, g: &mut Graph, vars: &[Var], u: Var, grid: &Grid1D) -> TensorResult<Var> {
        let dy = forward_diff(g, u, grid)?;
        let u_m = element_average(g, u)?;
        let k = self.eval_k(g, vars, u_m)?;
        let kd = g.mul(k, dy)?;
        Ok(g.neg(kd))
    }

    /// Samples the learned law. Field-dependent models are evaluated at each
    /// value in `u_samples`; position-dependent ones return `k` at the element
    /// midpoints of `grid` instead.
    pub fn export_constitutive_curve(&self, u_samples: &[f64], grid: &Grid1D) -> ConstitutiveCurve {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        match self {
            Self::ScalarK { k } => ConstitutiveCurve {
                axis: CurveAxis::Position,
                points: grid
                    .element_midpoints()
                    .into_iter()
                    .map(|x| (x, k.data()[0]))
                    .collect(),
            },
            Self::DiagonalK { k } => ConstitutiveCurve {
                axis: CurveAxis::Position,
                points: grid
                    .element_midpoints()
                    .into_iter()
                    .zip(k.data().iter().copied())
                    .collect(),
            },
            _ => {
                if u_samples.is_empty() {
                    return ConstitutiveCurve {
                        axis: CurveAxis::FieldValue,
                        points: Vec::new(),
                    };
                }
                let u = g.constant(Tensor::new(vec![u_samples.len(), 1], u_samples.to_vec()).expect("column"));
                let k = self
                    .eval_k(&mut g, &vars, u)
                    .expect("pointwise models accept any column of samples");
                ConstitutiveCurve {
                    axis: CurveAxis::FieldValue,
                    points: u_samples
                        .iter()
                        .copied()
                        .zip(g.value(k).data().iter().copied())
                        .collect(),
                }
            }
        }
    }
}
