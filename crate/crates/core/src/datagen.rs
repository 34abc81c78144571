//! Synthetic datasets from closed-form solutions of `d/dx(k du/dx) = 0` on
//! `[0, 1]` with `u(0) = g1`, `u(1) = g2`.
//!
//! Fluxes are signed, `q = −k·du/dx`, and constant along `x` for every
//! problem (zero source), so `q1 = q2` in every generated sample.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::Grid1D;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const META_FILE: &str = "meta.json";

/// The five diffusion problems with known solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    /// `k = 1`.
    Homogeneous,
    /// `k(x) = x + 1`.
    HeterogeneousLinearK,
    /// `k(u) = 1`.
    ConstantDiff,
    /// `k(u) = u`.
    LinearDiff,
    /// `k(u) = exp(u)`.
    ExponentialDiff,
}

impl Problem {
    pub const ALL: [Problem; 5] = [
        Problem::Homogeneous,
        Problem::HeterogeneousLinearK,
        Problem::ConstantDiff,
        Problem::LinearDiff,
        Problem::ExponentialDiff,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Problem::Homogeneous => "homogeneous",
            Problem::HeterogeneousLinearK => "heterogeneous",
            Problem::ConstantDiff => "constant",
            Problem::LinearDiff => "linear",
            Problem::ExponentialDiff => "exponential",
        }
    }

    /// Sampling interval for both boundary values. Field-dependent laws that
    /// need `u > 0` stay away from zero.
    pub fn bc_range(&self) -> (f64, f64) {
        match self {
            Problem::LinearDiff | Problem::ExponentialDiff => (0.05, 1.0),
            _ => (0.0, 1.0),
        }
    }

    /// Whether the true diffusivity depends on `u` rather than on `x`.
    pub fn field_dependent(&self) -> bool {
        matches!(
            self,
            Problem::ConstantDiff | Problem::LinearDiff | Problem::ExponentialDiff
        )
    }

    /// True constitutive law `k(u)` for field-dependent problems.
    pub fn k_of_u(&self, u: f64) -> Option<f64> {
        match self {
            Problem::ConstantDiff => Some(1.0),
            Problem::LinearDiff => Some(u),
            Problem::ExponentialDiff => Some(u.exp()),
            _ => None,
        }
    }

    /// True position law `k(x)` for position-dependent problems.
    pub fn k_of_x(&self, x: f64) -> Option<f64> {
        match self {
            Problem::Homogeneous => Some(1.0),
            Problem::HeterogeneousLinearK => Some(x + 1.0),
            _ => None,
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Problem {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "homogeneous" | "p1" => Ok(Problem::Homogeneous),
            "heterogeneous" | "p2" => Ok(Problem::HeterogeneousLinearK),
            "constant" => Ok(Problem::ConstantDiff),
            "linear" => Ok(Problem::LinearDiff),
            "exponential" => Ok(Problem::ExponentialDiff),
            other => Err(format!(
                "unknown variant '{other}' (expected homogeneous, heterogeneous, constant, linear, exponential)"
            )),
        }
    }
}

/// Exact `(u, q, k)` at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldPoint {
    pub u: f64,
    pub q: f64,
    pub k: f64,
}

/// Closed-form solution at `x`; `q` is signed (`−k·u'`).
pub fn analytic_solution(problem: Problem, g1: f64, g2: f64, x: f64) -> Result<FieldPoint> {
    Ok(match problem {
        Problem::Homogeneous | Problem::ConstantDiff => FieldPoint {
            u: (g2 - g1) * x + g1,
            q: -(g2 - g1),
            k: 1.0,
        },
        Problem::HeterogeneousLinearK => {
            let c = (g2 - g1) / std::f64::consts::LN_2;
            FieldPoint {
                u: c * (x + 1.0).ln() + g1,
                q: -c,
                k: x + 1.0,
            }
        }
        Problem::LinearDiff => {
            let radicand = (g2 * g2 - g1 * g1) * x + g1 * g1;
            if radicand <= 0.0 || !radicand.is_finite() {
                return Err(Error::Domain(format!(
                    "radicand {radicand} <= 0 for g1={g1}, g2={g2}, x={x}"
                )));
            }
            let u = radicand.sqrt();
            FieldPoint {
                u,
                q: -(g2 * g2 - g1 * g1) / 2.0,
                k: u,
            }
        }
        Problem::ExponentialDiff => {
            let (e1, e2) = (g1.exp(), g2.exp());
            let k = (e2 - e1) * x + e1;
            FieldPoint {
                u: k.ln(),
                q: -(e2 - e1),
                k,
            }
        }
    })
}

/// Signed flux of the exact solution (constant in `x`).
pub fn exact_flux(problem: Problem, g1: f64, g2: f64) -> Result<f64> {
    analytic_solution(problem, g1, g2, 0.0).map(|p| p.q)
}

/// Exact nodal profile on `grid`.
pub fn exact_profile(problem: Problem, g1: f64, g2: f64, grid: &Grid1D) -> Result<Vec<f64>> {
    grid.node_positions()
        .into_iter()
        .map(|x| analytic_solution(problem, g1, g2, x).map(|p| p.u))
        .collect()
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Adds i.i.d. `N(0, (p·σ)²)` noise per node, `σ` the population standard
/// deviation of the clean profile.
pub fn add_noise(u_clean: &[f64], p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let s = p * population_std(u_clean);
    if s == 0.0 {
        return u_clean.to_vec();
    }
    u_clean
        .iter()
        .map(|&u| {
            let z: f64 = StandardNormal.sample(rng);
            u + s * z
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub problem: Problem,
    pub grid_n: usize,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl ProblemSpec {
    pub fn grid(&self) -> Result<Grid1D> {
        Ok(Grid1D::new(self.grid_n)?)
    }
}

/// One observation: boundary inputs and the nodal field.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub g1: f64,
    pub g2: f64,
    pub q1: f64,
    pub q2: f64,
    /// Observed (possibly noisy) nodal values.
    pub u: Vec<f64>,
    /// Noise-free nodal values.
    pub u_clean: Vec<f64>,
}

/// Whether the flux columns of a dataset file carry their sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FluxConvention {
    Signed,
    /// `|q|`, for side-by-side comparison with tabulated magnitudes only.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub spec: ProblemSpec,
    pub train_rows: usize,
    pub test_rows: usize,
    pub flux: FluxConvention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ProblemSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Training rows for a dataset of `samples` rows (80 % rounded down).
pub fn train_rows(samples: usize) -> usize {
    samples * 4 / 5
}

fn draw_sample(spec: &ProblemSpec, grid: &Grid1D, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (lo, hi) = spec.problem.bc_range();
    loop {
        let g1 = rng.random_range(lo..hi);
        let g2 = rng.random_range(lo..hi);
        let (Ok(u_clean), Ok(q)) = (
            exact_profile(spec.problem, g1, g2, grid),
            exact_flux(spec.problem, g1, g2),
        ) else {
            continue;
        };
        let u = if spec.noise > 0.0 {
            add_noise(&u_clean, spec.noise, &mut rng)
        } else {
            u_clean.clone()
        };
        return Sample {
            g1,
            g2,
            q1: q,
            q2: q,
            u,
            u_clean,
        };
    }
}

/// Draws `spec.samples` records; the first 80 % form the training split.
/// Each record has its own RNG stream (seed, index), so output is
/// independent of generation order.
pub fn generate(spec: &ProblemSpec) -> Result<Dataset> {
    if spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(Error::Config(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let grid = spec.grid()?;
    let mut all: Vec<Sample> = (0..spec.samples as u64)
        .map(|i| draw_sample(spec, &grid, i))
        .collect();
    let test = all.split_off(train_rows(spec.samples));
    Ok(Dataset {
        spec: *spec,
        train: all,
        test,
    })
}

fn header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["g1", "g2", "q1", "q2"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=n).map(|i| format!("u{i}")));
    h.extend((1..=n).map(|i| format!("uc{i}")));
    h
}

fn write_samples(path: &Path, samples: &[Sample], n: usize, flux: FluxConvention) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(n))?;
    let q = |v: f64| match flux {
        FluxConvention::Signed => v,
        FluxConvention::Absolute => v.abs(),
    };
    for s in samples {
        let row = [s.g1, s.g2, q(s.q1), q(s.q2)]
            .into_iter()
            .chain(s.u.iter().copied())
            .chain(s.u_clean.iter().copied())
            .map(|v| v.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples(path: &Path, n: usize) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path)?;
    let hdr: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if hdr != header(n) {
        return Err(Error::Format(format!(
            "{}: header does not match a {n}-node dataset",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if vals.len() != 4 + 2 * n {
            return Err(Error::Format(format!("{}: short row", path.display())));
        }
        out.push(Sample {
            g1: vals[0],
            g2: vals[1],
            q1: vals[2],
            q2: vals[3],
            u: vals[4..4 + n].to_vec(),
            u_clean: vals[4 + n..].to_vec(),
        });
    }
    Ok(out)
}

impl Dataset {
    pub fn grid(&self) -> Result<Grid1D> {
        self.spec.grid()
    }

    pub fn meta(&self, flux: FluxConvention) -> DatasetMeta {
        DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            spec: self.spec,
            train_rows: self.train.len(),
            test_rows: self.test.len(),
            flux,
        }
    }

    /// Writes `train.csv`, `test.csv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path, flux: FluxConvention) -> Result<()> {
        fs::create_dir_all(dir)?;
        let n = self.spec.grid_n;
        write_samples(&dir.join(TRAIN_FILE), &self.train, n, flux)?;
        write_samples(&dir.join(TEST_FILE), &self.test, n, flux)?;
        let meta = serde_json::to_string_pretty(&self.meta(flux))?;
        fs::write(dir.join(META_FILE), meta + "\n")?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`]. Absolute-flux exports
    /// are rejected: their boundary flows have lost the sign.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {} (expected {DATASET_FORMAT_VERSION})",
                meta.format_version
            )));
        }
        if meta.flux == FluxConvention::Absolute {
            return Err(Error::Format(
                "absolute-flux export cannot be used for training or evaluation".into(),
            ));
        }
        let n = meta.spec.grid_n;
        let train = read_samples(&dir.join(TRAIN_FILE), n)?;
        let test = read_samples(&dir.join(TEST_FILE), n)?;
        if train.len() != meta.train_rows || test.len() != meta.test_rows {
            return Err(Error::Format("row counts disagree with metadata".into()));
        }
        Ok(Self {
            spec: meta.spec,
            train,
            test,
        })
    }
}
