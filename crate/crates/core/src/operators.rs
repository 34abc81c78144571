//! Fixed finite-difference operators on a uniform 1D grid.
//!
//! Both the derivative and the element-averaging filter are size-2
//! convolution stencils held as constant tensors, so they take part in the
//! graph (gradients flow through them) but never receive a gradient
//! themselves and never appear in a parameter list.
//!
//! Index layout: a nodal field has `n` columns, an element field `n − 1`, and
//! an element flux extended with the two boundary flows `n + 1`.

use thiserror::Error;

use crate::tensor::{Activation, Graph, Result as TensorResult, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs at least 3 nodes, got {0}")]
    TooFewNodes(usize),
}

/// Uniform grid on `[0, 1]` with `n` nodes at `x_i = i / (n − 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid1D {
    n: usize,
}

impl Grid1D {
    pub fn new(n: usize) -> Result<Self, GridError> {
        if n < 3 {
            return Err(GridError::TooFewNodes(n));
        }
        Ok(Self { n })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn elements(&self) -> usize {
        self.n - 1
    }

    /// Element size `L = 1 / (n − 1)`.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn node_positions(&self) -> Vec<f64> {
        (0..self.n).map(|i| i as f64 / (self.n - 1) as f64).collect()
    }

    pub fn element_midpoints(&self) -> Vec<f64> {
        let l = self.spacing();
        (0..self.n - 1).map(|i| (i as f64 + 0.5) * l).collect()
    }
}

/// A constant convolution stencil applied along the last axis of an `N×W` field.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilOp {
    kernel: Vec<f64>,
    scale: f64,
}

impl StencilOp {
    pub fn new(kernel: Vec<f64>, scale: f64) -> Self {
        Self { kernel, scale }
    }

    /// First-order forward difference `(f_{i+1} − f_i) / L`.
    pub fn forward_difference(spacing: f64) -> Self {
        Self::new(vec![-1.0, 1.0], 1.0 / spacing)
    }

    /// Two-point average `(f_i + f_{i+1}) / 2`.
    pub fn element_average() -> Self {
        Self::new(vec![0.5, 0.5], 1.0)
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Stencils are never optimized.
    pub fn trainable(&self) -> bool {
        false
    }

    /// Applies the stencil to an `N×W` field, giving `N×(W − K + 1)`.
    pub fn apply(&self, g: &mut Graph, field: Var) -> TensorResult<Var> {
        let shape = g.value(field).shape().to_vec();
        let [rows, width] = shape[..] else {
            return Err(TensorError::Rank {
                op: "stencil",
                expected: 2,
                shape,
            });
        };
        let k = self.kernel.len();
        let kernel = Tensor::new(
            vec![1, 1, k],
            self.kernel.iter().map(|c| c * self.scale).collect(),
        )?;
        let kernel = g.constant(kernel);
        let signal = g.reshape(field, &[rows, 1, width])?;
        let out = g.conv1d(signal, kernel, None, None, Activation::Identity)?;
        g.reshape(out, &[rows, width + 1 - k])
    }
}

fn require_width(g: &Graph, field: Var, op: &'static str) -> TensorResult<()> {
    let shape = g.value(field).shape();
    match shape {
        [_, w] if *w >= 2 => Ok(()),
        [_, _] => Err(TensorError::KernelTooWide {
            kernel: 2,
            signal: shape[1],
        }),
        _ => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

/// `out_i = (f_{i+1} − f_i) / L` for an `N×W` field, `W ≥ 2`.
pub fn forward_diff(g: &mut Graph, field: Var, grid: &Grid1D) -> TensorResult<Var> {
    require_width(g, field, "forward_diff")?;
    StencilOp::forward_difference(grid.spacing()).apply(g, field)
}

/// `out_i = (f_i + f_{i+1}) / 2` for an `N×W` field, `W ≥ 2`.
pub fn element_average(g: &mut Graph, field: Var) -> TensorResult<Var> {
    require_width(g, field, "element_average")?;
    StencilOp::element_average().apply(g, field)
}

/// Builds `q̃ = [q1, q_1 … q_{n−1}, q2]` per sample from the element flux
/// `N×(n−1)` and the boundary flows (each length `N`).
pub fn concat_boundary_flows(g: &mut Graph, q_elem: Var, q1: Var, q2: Var) -> TensorResult<Var> {
    let rows = g.value(q_elem).shape().first().copied().unwrap_or(0);
    let mut cols = Vec::with_capacity(2);
    for b in [q1, q2] {
        if g.value(b).len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_boundary_flows",
                left: g.value(q_elem).shape().to_vec(),
                right: g.value(b).shape().to_vec(),
            });
        }
        cols.push(g.reshape(b, &[rows, 1])?);
    }
    g.concat_cols(&[cols[0], q_elem, cols[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn grid_layout() {
        let grid = Grid1D::new(10).unwrap();
        assert_eq!(grid.elements(), 9);
        let x = grid.node_positions();
        assert_eq!(x[0], 0.0);
        assert_eq!(x[9], 1.0);
        assert!((grid.spacing() - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(Grid1D::new(2), Err(GridError::TooFewNodes(2)));
    }

    #[test]
    fn forward_diff_cases() {
        let grid = Grid1D::new(3).unwrap();
        let mut g = Graph::new();
        let u = field(&mut g, &[vec![0.0, 0.5, 1.0], vec![2.0, 2.0, 2.0]]);
        let d = forward_diff(&mut g, u, &grid).unwrap();
        assert_eq!(g.value(d).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_diff_of_square_matches_symbolic_expansion() {
        let grid = Grid1D::new(11).unwrap();
        let x = grid.node_positions();
        let l = grid.spacing();
        let mut g = Graph::new();
        let u = field(&mut g, &[x.iter().map(|v| v * v).collect()]);
        let d = forward_diff(&mut g, u, &grid).unwrap();
        for (i, &got) in g.value(d).data().iter().enumerate() {
            let symbolic = (x[i + 1] * x[i + 1] - x[i] * x[i]) / l;
            assert!((got - symbolic).abs() < 1e-12);
            assert!((got - (2.0 * x[i] + l)).abs() < 1e-12);
        }
    }

    #[test]
    fn element_average_cases() {
        let mut g = Graph::new();
        let u = field(&mut g, &[vec![0.0, 1.0]]);
        let m = element_average(&mut g, u).unwrap();
        assert_eq!(g.value(m).data(), &[0.5]);
        let grid = Grid1D::new(6).unwrap();
        let x = grid.node_positions();
        let lin = field(&mut g, &[x.iter().map(|v| 3.0 * v - 1.0).collect()]);
        let m = element_average(&mut g, lin).unwrap();
        for (got, mid) in g.value(m).data().iter().zip(grid.element_midpoints()) {
            assert!((got - (3.0 * mid - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn narrow_fields_are_rejected() {
        let grid = Grid1D::new(3).unwrap();
        let mut g = Graph::new();
        let u = field(&mut g, &[vec![1.0]]);
        assert!(forward_diff(&mut g, u, &grid).is_err());
        assert!(element_average(&mut g, u).is_err());
    }

    #[test]
    fn boundary_flow_ordering() {
        let mut g = Graph::new();
        let q = field(&mut g, &[vec![1.0, 2.0], vec![5.0, 6.0]]);
        let q1 = g.constant(Tensor::vector(vec![0.1, 0.5]));
        let q2 = g.constant(Tensor::vector(vec![0.9, 0.7]));
        let qt = concat_boundary_flows(&mut g, q, q1, q2).unwrap();
        assert_eq!(g.value(qt).shape(), &[2, 4]);
        assert_eq!(g.value(qt).data(), &[0.1, 1.0, 2.0, 0.9, 0.5, 5.0, 6.0, 0.7]);
        let bad = g.constant(Tensor::vector(vec![0.1]));
        assert!(concat_boundary_flows(&mut g, q, bad, q2).is_err());
    }

    #[test]
    fn constant_flux_is_conserved() {
        let grid = Grid1D::new(5).unwrap();
        let mut g = Graph::new();
        let q = field(&mut g, &[vec![-0.3; 4]]);
        let q1 = g.constant(Tensor::vector(vec![-0.3]));
        let q2 = g.constant(Tensor::vector(vec![-0.3]));
        let qt = concat_boundary_flows(&mut g, q, q1, q2).unwrap();
        let f = forward_diff(&mut g, qt, &grid).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 5]);
        assert!(g.value(f).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn stencils_are_not_trainable() {
        assert!(!StencilOp::forward_difference(0.1).trainable());
        assert!(!StencilOp::element_average().trainable());
    }
}
