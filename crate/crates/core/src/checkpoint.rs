//! Versioned JSON checkpoints: named arrays with explicit shapes, the run
//! configuration and training provenance.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::ProblemSpec;
use crate::error::{Error, Result};
use crate::network::Pgnniv;
use crate::operators::Grid1D;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub iterations: usize,
    /// Absent when the run never produced a finite cost.
    pub final_cf: Option<f64>,
    pub seed: u64,
    /// Seconds since the Unix epoch. `SOURCE_DATE_EPOCH` overrides the clock.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub grid_n: usize,
    pub dataset: Option<ProblemSpec>,
    pub params: Vec<NamedArray>,
    pub provenance: Provenance,
}

pub fn timestamp_now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Checkpoint {
    pub fn capture(
        net: &Pgnniv,
        config: &RunConfig,
        dataset: Option<ProblemSpec>,
        iterations: usize,
        final_cf: f64,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: *config,
            grid_n: net.grid.nodes(),
            dataset,
            params: net
                .parameter_list()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            provenance: Provenance {
                iterations,
                final_cf: final_cf.is_finite().then_some(final_cf),
                seed: config.train.seed,
                timestamp: timestamp_now(),
            },
        }
    }

    /// Rebuilds the network; every parameter must be present with its shape.
    pub fn network(&self) -> Result<Pgnniv> {
        let grid = Grid1D::new(self.grid_n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Pgnniv::init(self.config.model, grid, self.config.hidden_width, &mut rng);
        let names: Vec<(String, Vec<usize>)> = net
            .parameter_list()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} arrays, network expects {}",
                self.params.len(),
                names.len()
            )));
        }
        for (slot, ((name, shape), arr)) in net.parameters_mut().into_iter().zip(names.iter().zip(&self.params)) {
            if *name != arr.name || *shape != arr.shape {
                return Err(Error::Format(format!(
                    "array '{}' {:?} does not match expected '{name}' {shape:?}",
                    arr.name, arr.shape
                )));
            }
            *slot = Tensor::new(arr.shape.clone(), arr.data.clone())?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Format(format!(
                "{}: checkpoint format version {version:?} (expected {CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::ModelKind;
    use crate::datagen::{generate, Problem};
    use crate::network::{Batch, PenaltyWeights};

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ProblemSpec {
            problem: Problem::ExponentialDiff,
            grid_n: 10,
            samples: 30,
            noise: 0.0,
            seed: 2,
        };
        let batch = Batch::from_samples(&generate(&spec).unwrap().train).unwrap();
        for kind in [
            ModelKind::ScalarK,
            ModelKind::DiagonalK,
            ModelKind::Cnn2l,
            ModelKind::Cnn3l { width: 4 },
            ModelKind::Parametric,
        ] {
            let config = RunConfig {
                model: kind,
                ..RunConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let net = Pgnniv::init(kind, Grid1D::new(10).unwrap(), 15, &mut rng);
            let ck = Checkpoint::capture(&net, &config, Some(spec), 0, 1.5);
            let path = dir.path().join(format!("{kind}.json"));
            ck.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            assert_eq!(loaded, ck);
            let back = loaded.network().unwrap();
            assert_eq!(back, net);
            let w = PenaltyWeights::default();
            assert_eq!(back.forward(&batch, &w).unwrap(), net.forward(&batch, &w).unwrap());
        }
    }

    #[test]
    fn version_and_shape_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Pgnniv::init(ModelKind::ScalarK, Grid1D::new(5).unwrap(), 15, &mut rng);
        let mut ck = Checkpoint::capture(&net, &RunConfig::default(), None, 3, f64::NAN);
        assert_eq!(ck.provenance.final_cf, None);
        ck.format_version = 99;
        let path = dir.path().join("c.json");
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
        ck.format_version = CHECKPOINT_VERSION;
        ck.params[0].shape = vec![3, 15];
        assert!(ck.network().is_err());
    }
}
