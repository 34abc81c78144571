//! Relative L² errors of predicted fields against the closed-form solutions,
//! their quantiles over boundary-condition space, spatial profiles and
//! BC-plane error maps.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{analytic_solution, exact_flux, Problem, Sample};
use crate::error::{Error, Result};
use crate::network::{Pgnniv, INPUT_WIDTH};
use crate::operators::Grid1D;
use crate::tensor::Tensor;

/// Denominators below this are treated as zero and the error is flagged infinite.
pub const ZERO_DENOMINATOR: f64 = 1e-12;
/// Samples with `|g1 − g2|` below this are left out of the `q` and `k` statistics.
pub const DIAGONAL_BAND: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    U,
    Q,
    K,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::U, Field::Q, Field::K];
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Field::U => "u",
            Field::Q => "q",
            Field::K => "k",
        })
    }
}

fn check_widths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::GridMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    Ok(())
}

/// `∫ p² dx` for the piecewise-linear interpolant of nodal values `p`, exact.
fn nodal_square_integral(p: &[f64], spacing: f64) -> f64 {
    p.windows(2)
        .map(|w| spacing / 3.0 * (w[0] * w[0] + w[0] * w[1] + w[1] * w[1]))
        .sum()
}

fn ratio(num: f64, den: f64) -> f64 {
    if den.abs() < ZERO_DENOMINATOR {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Relative squared L² error of a nodal field on a uniform grid of spacing
/// `spacing`. Infinite when the truth integral vanishes.
pub fn e2r(pred: &[f64], truth: &[f64], spacing: f64) -> Result<f64> {
    check_widths(pred, truth)?;
    let diff: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    Ok(ratio(
        nodal_square_integral(&diff, spacing),
        nodal_square_integral(truth, spacing),
    ))
}

/// Relative squared L² error of an element-wise constant field.
pub fn e2r_elements(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_widths(pred, truth)?;
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    Ok(ratio(num, den))
}

/// `|p − t| / |t|` per entry; infinite where the truth vanishes.
pub fn spatial_error(pred: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    check_widths(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ratio((p - t).abs(), t.abs()))
        .collect())
}

/// Linear interpolation between order statistics of a sorted slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub min: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub max: f64,
    /// Finite values summarized.
    pub count: usize,
    /// Infinite or NaN values left out.
    pub flagged: usize,
}

pub fn stats(values: &[f64]) -> Result<ErrorStats> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let flagged = values.len() - finite.len();
    if finite.is_empty() {
        return Err(Error::AllFlagged { flagged });
    }
    finite.sort_by(f64::total_cmp);
    Ok(ErrorStats {
        min: finite[0],
        q1: quantile(&finite, 0.25),
        q2: quantile(&finite, 0.5),
        q3: quantile(&finite, 0.75),
        max: finite[finite.len() - 1],
        count: finite.len(),
        flagged,
    })
}

/// Closed-form fields on the evaluation layout: `u` at nodes, `q` and `k`
/// at element midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthFields {
    pub u: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
}

pub fn truth_fields(problem: Problem, g1: f64, g2: f64, grid: &Grid1D) -> Result<TruthFields> {
    let u = grid
        .node_positions()
        .into_iter()
        .map(|x| analytic_solution(problem, g1, g2, x).map(|p| p.u))
        .collect::<Result<Vec<_>>>()?;
    let mids = grid
        .element_midpoints()
        .into_iter()
        .map(|x| analytic_solution(problem, g1, g2, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(TruthFields {
        u,
        q: mids.iter().map(|p| p.q).collect(),
        k: mids.iter().map(|p| p.k).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub g1: f64,
    pub g2: f64,
    pub u: f64,
    pub q: f64,
    pub k: f64,
}

impl SampleErrors {
    pub fn get(&self, field: Field) -> f64 {
        match field {
            Field::U => self.u,
            Field::Q => self.q,
            Field::K => self.k,
        }
    }

    pub fn near_diagonal(&self) -> bool {
        (self.g1 - self.g2).abs() < DIAGONAL_BAND
    }
}

/// Network predictions together with the truth for a set of boundary conditions.
struct Evaluated {
    bcs: Vec<(f64, f64)>,
    pred: crate::network::Inference,
    truth: Vec<TruthFields>,
}

fn inputs_for(problem: Problem, bcs: &[(f64, f64)]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(bcs.len() * INPUT_WIDTH);
    for &(g1, g2) in bcs {
        let q = exact_flux(problem, g1, g2)?;
        data.extend([g1, g2, q, q]);
    }
    Ok(Tensor::new(vec![bcs.len(), INPUT_WIDTH], data)?)
}

fn run(net: &Pgnniv, problem: Problem, bcs: Vec<(f64, f64)>) -> Result<Evaluated> {
    let pred = net.infer(&inputs_for(problem, &bcs)?)?;
    let truth = bcs
        .iter()
        .map(|&(g1, g2)| truth_fields(problem, g1, g2, &net.grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluated { bcs, pred, truth })
}

impl Evaluated {
    fn errors(&self, spacing: f64) -> Result<Vec<SampleErrors>> {
        self.bcs
            .iter()
            .enumerate()
            .map(|(i, &(g1, g2))| {
                let t = &self.truth[i];
                Ok(SampleErrors {
                    g1,
                    g2,
                    u: e2r(self.pred.y.row(i), &t.u, spacing)?,
                    q: e2r_elements(self.pred.q.row(i), &t.q)?,
                    k: e2r_elements(self.pred.k.row(i), &t.k)?,
                })
            })
            .collect()
    }
}

/// Per-sample errors for `samples`. Truth comes from the closed form at the
/// sample's boundary values, so noisy observations do not enter.
pub fn sample_errors(net: &Pgnniv, problem: Problem, samples: &[Sample]) -> Result<Vec<SampleErrors>> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let bcs = samples.iter().map(|s| (s.g1, s.g2)).collect();
    run(net, problem, bcs)?.errors(net.grid.spacing())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub u: ErrorStats,
    pub q: Option<ErrorStats>,
    pub k: Option<ErrorStats>,
    /// Samples inside the diagonal band, left out of `q` and `k`.
    pub excluded_near_diagonal: usize,
    pub samples: usize,
}

impl ErrorTable {
    pub fn get(&self, field: Field) -> Option<&ErrorStats> {
        match field {
            Field::U => Some(&self.u),
            Field::Q => self.q.as_ref(),
            Field::K => self.k.as_ref(),
        }
    }
}

pub fn error_table(errors: &[SampleErrors]) -> Result<ErrorTable> {
    let u: Vec<f64> = errors.iter().map(|e| e.u).collect();
    let off: Vec<&SampleErrors> = errors.iter().filter(|e| !e.near_diagonal()).collect();
    let of = |f: Field| -> Option<ErrorStats> {
        stats(&off.iter().map(|e| e.get(f)).collect::<Vec<_>>()).ok()
    };
    Ok(ErrorTable {
        u: stats(&u)?,
        q: of(Field::Q),
        k: of(Field::K),
        excluded_near_diagonal: errors.len() - off.len(),
        samples: errors.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialProfile {
    pub field: Field,
    pub positions: Vec<f64>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Entries left out per position (infinite relative error).
    pub flagged: Vec<usize>,
}

impl SpatialProfile {
    pub fn mean_median(&self) -> f64 {
        self.median.iter().sum::<f64>() / self.median.len() as f64
    }
}

fn aggregate_profile(field: Field, positions: Vec<f64>, rows: &[Vec<f64>]) -> Result<SpatialProfile> {
    let mut p = SpatialProfile {
        field,
        positions,
        median: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        flagged: Vec::new(),
    };
    for j in 0..p.positions.len() {
        let mut col: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| v.is_finite()).collect();
        let flagged = rows.len() - col.len();
        if col.is_empty() {
            return Err(Error::AllFlagged { flagged });
        }
        col.sort_by(f64::total_cmp);
        p.median.push(quantile(&col, 0.5));
        p.lower.push(quantile(&col, 0.025));
        p.upper.push(quantile(&col, 0.975));
        p.flagged.push(flagged);
    }
    Ok(p)
}

/// Median and 95 % band of the per-position relative error over `samples`.
/// `q` and `k` skip samples inside the diagonal band.
pub fn spatial_profiles(net: &Pgnniv, problem: Problem, samples: &[Sample]) -> Result<Vec<SpatialProfile>> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ev = run(net, problem, samples.iter().map(|s| (s.g1, s.g2)).collect())?;
    let mut rows = [Vec::new(), Vec::new(), Vec::new()];
    for (i, &(g1, g2)) in ev.bcs.iter().enumerate() {
        let t = &ev.truth[i];
        rows[0].push(spatial_error(ev.pred.y.row(i), &t.u)?);
        if (g1 - g2).abs() >= DIAGONAL_BAND {
            rows[1].push(spatial_error(ev.pred.q.row(i), &t.q)?);
            rows[2].push(spatial_error(ev.pred.k.row(i), &t.k)?);
        }
    }
    let grid = &net.grid;
    Ok(vec![
        aggregate_profile(Field::U, grid.node_positions(), &rows[0])?,
        aggregate_profile(Field::Q, grid.element_midpoints(), &rows[1])?,
        aggregate_profile(Field::K, grid.element_midpoints(), &rows[2])?,
    ])
}

/// `e2r` over a uniform `(g1, g2)` grid; `values[f][i][j]` is field `f` at
/// `(axis[i], axis[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct BcErrorMap {
    pub axis: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
}

impl BcErrorMap {
    pub fn get(&self, field: Field) -> &Vec<Vec<f64>> {
        match field {
            Field::U => &self.u,
            Field::Q => &self.q,
            Field::K => &self.k,
        }
    }

    /// Matrix CSV: first column `g1`, remaining columns one per `g2` value.
    pub fn write_csv(&self, field: Field, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![r"g1\g2".to_string()];
        header.extend(self.axis.iter().map(f64::to_string));
        w.write_record(&header)?;
        for (i, row) in self.get(field).iter().enumerate() {
            let mut rec = vec![self.axis[i].to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One batched network evaluation over a `resolution × resolution` grid
/// spanning the problem's boundary-value range.
pub fn bc_error_map(net: &Pgnniv, problem: Problem, resolution: usize) -> Result<BcErrorMap> {
    if resolution < 2 {
        return Err(Error::Config(format!("map resolution must be >= 2, got {resolution}")));
    }
    let (lo, hi) = problem.bc_range();
    let axis: Vec<f64> = (0..resolution)
        .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
        .collect();
    let bcs = axis
        .iter()
        .flat_map(|&a| axis.iter().map(move |&b| (a, b)))
        .collect();
    let errs = run(net, problem, bcs)?.errors(net.grid.spacing())?;
    let mat = |f: Field| -> Vec<Vec<f64>> {
        errs.chunks(resolution)
            .map(|row| row.iter().map(|e| e.get(f)).collect())
            .collect()
    };
    Ok(BcErrorMap {
        u: mat(Field::U),
        q: mat(Field::Q),
        k: mat(Field::K),
        axis,
    })
}

pub fn write_sample_errors(errors: &[SampleErrors], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["g1", "g2", "e2r_u", "e2r_q", "e2r_k", "near_diagonal"])?;
    for e in errors {
        w.write_record([
            e.g1.to_string(),
            e.g2.to_string(),
            e.u.to_string(),
            e.q.to_string(),
            e.k.to_string(),
            e.near_diagonal().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per field: `field,min,Q1,Q2,Q3,max,count,flagged,excluded`.
pub fn write_error_table(table: &ErrorTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["field", "min", "Q1", "Q2", "Q3", "max", "count", "flagged", "excluded"])?;
    for f in Field::ALL {
        let excluded = if f == Field::U { 0 } else { table.excluded_near_diagonal };
        match table.get(f) {
            Some(s) => w.write_record([
                f.to_string(),
                s.min.to_string(),
                s.q1.to_string(),
                s.q2.to_string(),
                s.q3.to_string(),
                s.max.to_string(),
                s.count.to_string(),
                s.flagged.to_string(),
                excluded.to_string(),
            ])?,
            None => w.write_record([
                f.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "0".into(),
                String::new(),
                excluded.to_string(),
            ])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_profiles(profiles: &[SpatialProfile], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["field", "x", "median", "lower_2_5", "upper_97_5", "flagged"])?;
    for p in profiles {
        for j in 0..p.positions.len() {
            w.write_record([
                p.field.to_string(),
                p.positions[j].to_string(),
                p.median[j].to_string(),
                p.lower[j].to_string(),
                p.upper[j].to_string(),
                p.flagged[j].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
