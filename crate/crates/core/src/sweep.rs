//! Parameter sweeps: one generate, train and evaluate cycle per axis value,
//! all points scored on the same held-out boundary conditions.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::constitutive::ModelKind;
use crate::datagen::{generate, ProblemSpec, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{error_table, sample_errors, write_sample_errors, ErrorTable, Field, SampleErrors};
use crate::network::{Batch, Pgnniv};
use crate::operators::Grid1D;
use crate::trainer::train;

/// Seed offset for the held-out evaluation set, kept apart from training seeds.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DatasetSize,
    NoiseP,
    HiddenWidthM,
    GridN,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::DatasetSize => "dataset_size",
            SweepAxis::NoiseP => "noise_p",
            SweepAxis::HiddenWidthM => "hidden_width_m",
            SweepAxis::GridN => "grid_n",
        }
    }

    pub fn default_values(&self) -> Vec<f64> {
        match self {
            SweepAxis::DatasetSize => vec![100.0, 1000.0, 10000.0],
            SweepAxis::NoiseP => vec![0.0, 0.01, 0.05, 0.10],
            SweepAxis::HiddenWidthM => vec![2.0, 5.0, 10.0],
            SweepAxis::GridN => vec![5.0, 10.0, 20.0, 40.0],
        }
    }

    fn integral(&self) -> bool {
        !matches!(self, SweepAxis::NoiseP)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dataset_size" | "dataset-size" => Ok(SweepAxis::DatasetSize),
            "noise_p" | "noise-p" | "noise" => Ok(SweepAxis::NoiseP),
            "hidden_width_m" | "hidden-width-m" | "hidden" => Ok(SweepAxis::HiddenWidthM),
            "grid_n" | "grid-n" | "grid" => Ok(SweepAxis::GridN),
            other => Err(format!(
                "unknown axis '{other}' (expected dataset_size, noise_p, hidden_width_m, grid_n)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub data: ProblemSpec,
    pub run: RunConfig,
    /// Size of the shared held-out evaluation set.
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: SweepBase,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("sweep values must be strictly increasing".into()));
        }
        if self.axis.integral() && self.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(Error::Config(format!("{} values must be positive integers", self.axis)));
        }
        if self.axis == SweepAxis::HiddenWidthM && !matches!(self.base.run.model, ModelKind::Cnn3l { .. }) {
            return Err(Error::Config(format!(
                "{} sweeps the cnn3l hidden layer, but the model is {}",
                self.axis, self.base.run.model
            )));
        }
        if self.base.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be >= 1".into()));
        }
        self.base.run.validate()
    }

    /// Data and run settings for one axis value.
    pub fn point(&self, value: f64) -> (ProblemSpec, RunConfig) {
        let (mut data, mut run) = (self.base.data, self.base.run);
        match self.axis {
            SweepAxis::DatasetSize => data.samples = value as usize,
            SweepAxis::NoiseP => data.noise = value,
            SweepAxis::HiddenWidthM => {
                if let ModelKind::Cnn3l { width } = &mut run.model {
                    *width = value as usize;
                }
            }
            SweepAxis::GridN => data.grid_n = value as usize,
        }
        (data, run)
    }

    /// Boundary conditions shared by every point (noise-free, own seed).
    pub fn eval_set(&self) -> Result<Vec<Sample>> {
        let spec = ProblemSpec {
            samples: self.base.eval_samples,
            noise: 0.0,
            seed: self.base.data.seed ^ EVAL_SEED_SALT,
            ..self.base.data
        };
        let ds = generate(&ProblemSpec { grid_n: 3, ..spec })?;
        Ok(ds.train.into_iter().chain(ds.test).collect())
    }
}

/// Mean and standard error of the finite values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

pub fn mean_se(values: &[f64]) -> Option<MeanSe> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let se = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Some(MeanSe {
        mean,
        se,
        count: v.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub u: Option<MeanSe>,
    pub q: Option<MeanSe>,
    pub k: Option<MeanSe>,
    pub table: ErrorTable,
    pub final_cf: f64,
    pub model_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub result: std::result::Result<PointMetrics, String>,
}

fn summarize(errors: &[SampleErrors], final_cf: f64, net: &Pgnniv) -> Result<PointMetrics> {
    let pick = |f: Field| -> Vec<f64> {
        errors
            .iter()
            .filter(|e| f == Field::U || !e.near_diagonal())
            .map(|e| e.get(f))
            .collect()
    };
    Ok(PointMetrics {
        u: mean_se(&pick(Field::U)),
        q: mean_se(&pick(Field::Q)),
        k: mean_se(&pick(Field::K)),
        table: error_table(errors)?,
        final_cf,
        model_params: net.model.flat_params(),
    })
}

/// Generates, trains and evaluates one point. `out` receives the
/// checkpoint, trace and per-sample errors when given.
pub fn run_point(
    data: &ProblemSpec,
    run: &RunConfig,
    eval: &[Sample],
    out: Option<&Path>,
) -> Result<PointMetrics> {
    let ds = generate(data)?;
    if ds.train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let grid = Grid1D::new(data.grid_n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let mut net = Pgnniv::init(run.model, grid, run.hidden_width, &mut rng);
    let train_batch = Batch::from_samples(&ds.train)?;
    let test_batch = if ds.test.is_empty() {
        None
    } else {
        Some(Batch::from_samples(&ds.test)?)
    };
    let outcome = train(&mut net, &train_batch, test_batch.as_ref(), &run.weights, &run.train, &mut ())?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        outcome.trace.save_csv(&dir.join("trace.csv"), &net.model.flat_param_names())?;
        Checkpoint::capture(&net, run, Some(*data), outcome.iterations, outcome.final_cf)
            .save(&dir.join("checkpoint.json"))?;
    }
    if let Some(e) = outcome.error {
        return Err(e);
    }
    let errors = sample_errors(&net, data.problem, eval)?;
    if let Some(dir) = out {
        write_sample_errors(&errors, &dir.join("errors.csv"))?;
    }
    summarize(&errors, outcome.final_cf, &net)
}

fn point_dir(root: &Path, axis: SweepAxis, i: usize, value: f64) -> PathBuf {
    root.join(format!("{:02}_{}_{}", i, axis.name(), value))
}

/// Runs every point with at most `jobs` in flight. Failures are recorded per
/// point and do not stop the sweep.
pub fn run_sweep(spec: &SweepSpec, jobs: usize, out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    let eval = spec.eval_set()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepPoint>>> = Mutex::new(vec![None; spec.values.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, spec.values.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&value) = spec.values.get(i) else { break };
                let (data, run) = spec.point(value);
                let dir = out.map(|o| point_dir(o, spec.axis, i, value));
                let result = run_point(&data, &run, &eval, dir.as_deref()).map_err(|e| e.to_string());
                results.lock().expect("no poisoned workers")[i] = Some(SweepPoint { value, result });
            });
        }
    });
    let points: Vec<SweepPoint> = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|p| p.expect("every point visited"))
        .collect();
    if let Some(dir) = out {
        write_aggregate(spec, &points, &dir.join("sweep.csv"))?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    }
    Ok(points)
}

pub fn write_aggregate(spec: &SweepSpec, points: &[SweepPoint], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        spec.axis.name(),
        "status",
        "e2r_u_mean",
        "e2r_u_se",
        "e2r_q_mean",
        "e2r_q_se",
        "e2r_k_mean",
        "e2r_k_se",
        "final_cf",
        "error",
    ])?;
    let cell = |m: Option<MeanSe>| match m {
        Some(m) => [m.mean.to_string(), m.se.to_string()],
        None => [String::new(), String::new()],
    };
    for p in points {
        let mut rec = vec![p.value.to_string()];
        match &p.result {
            Ok(m) => {
                rec.push("ok".into());
                rec.extend(cell(m.u));
                rec.extend(cell(m.q));
                rec.extend(cell(m.k));
                rec.push(m.final_cf.to_string());
                rec.push(String::new());
            }
            Err(e) => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Problem;
    use crate::trainer::TrainConfig;

    fn base() -> SweepBase {
        SweepBase {
            data: ProblemSpec {
                problem: Problem::Homogeneous,
                grid_n: 5,
                samples: 40,
                noise: 0.0,
                seed: 3,
            },
            run: RunConfig {
                model: ModelKind::ScalarK,
                hidden_width: 4,
                train: TrainConfig {
                    max_iters: 20,
                    log_every: 10,
                    ..TrainConfig::default()
                },
                ..RunConfig::default()
            },
            eval_samples: 30,
        }
    }

    #[test]
    fn mean_se_cases() {
        let m = mean_se(&[1.0, 2.0, 3.0, f64::INFINITY]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.count, 3);
        assert!((m.se - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[f64::INFINITY]), None);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SweepSpec {
            axis: SweepAxis::GridN,
            values: vec![5.0, 10.0],
            base: base(),
        };
        assert!(spec.validate().is_ok());
        spec.values = vec![10.0, 5.0];
        assert!(spec.validate().is_err());
        spec.values = vec![];
        assert!(spec.validate().is_err());
        spec.values = vec![2.5];
        assert!(spec.validate().is_err());
        assert_eq!("noise_p".parse::<SweepAxis>(), Ok(SweepAxis::NoiseP));
    }

    #[test]
    fn width_axis_targets_the_cnn_hidden_layer() {
        let mut spec = SweepSpec {
            axis: SweepAxis::HiddenWidthM,
            values: vec![2.0, 10.0],
            base: base(),
        };
        assert!(spec.validate().is_err());
        spec.base.run.model = ModelKind::Cnn3l { width: 5 };
        spec.validate().unwrap();
        let (_, run) = spec.point(10.0);
        assert_eq!(run.model, ModelKind::Cnn3l { width: 10 });
        assert_eq!(run.hidden_width, spec.base.run.hidden_width);
    }

    #[test]
    fn zero_noise_point_matches_plain_run() {
        let spec = SweepSpec {
            axis: SweepAxis::NoiseP,
            values: vec![0.0, 0.05],
            base: base(),
        };
        let points = run_sweep(&spec, 2, None).unwrap();
        assert_eq!(points.len(), 2);
        let eval = spec.eval_set().unwrap();
        let plain = run_point(&spec.base.data, &spec.base.run, &eval, None).unwrap();
        assert_eq!(points[0].result.as_ref().unwrap(), &plain);
        assert!(points[1].result.is_ok());
    }

    #[test]
    fn failures_are_recorded_per_point() {
        let mut b = base();
        b.run.train.learning_rate = 1e300;
        let spec = SweepSpec {
            axis: SweepAxis::GridN,
            values: vec![4.0, 5.0],
            base: b,
        };
        let dir = tempfile::tempdir().unwrap();
        let points = run_sweep(&spec, 1, Some(dir.path())).unwrap();
        assert!(points.iter().all(|p| p.result.is_err()));
        let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("failed"));
    }
}
