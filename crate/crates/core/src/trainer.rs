//! Full-batch Adam training with learning-curve capture.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{bundle, Batch, PenaltyWeights, Pgnniv};
use crate::tensor::{Graph, Tensor};

pub const DESK_ITERS: usize = 20_000;
pub const FULL_ITERS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            max_iters: DESK_ITERS,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 100,
            checkpoint_every: 5_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            max_iters: FULL_ITERS,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be > 0".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam state over a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. `grads[i]` is `None` when parameter `i` did not affect the cost.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Metrics of one split at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub cf: f64,
    pub mse: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub train: TermValues,
    pub test: Option<TermValues>,
    pub model_params: Vec<f64>,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn final_cf(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train.cf)
    }

    pub fn cf_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train.cf).collect()
    }

    /// CSV with columns `iteration, cf, mse_e, mse_pi1, mse_pi2, mse_pi3`,
    /// the matching `test_*` columns and one column per model parameter.
    pub fn write_csv(&self, out: impl Write, param_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "iteration", "cf", "mse_e", "mse_pi1", "mse_pi2", "mse_pi3", "test_cf", "test_mse_e",
            "test_mse_pi1", "test_mse_pi2", "test_mse_pi3", "clamp_events",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(param_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.iteration.to_string(), r.train.cf.to_string()];
            rec.extend(r.train.mse.iter().map(f64::to_string));
            match &r.test {
                Some(t) => {
                    rec.push(t.cf.to_string());
                    rec.extend(t.mse.iter().map(f64::to_string));
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 5)),
            }
            rec.push(r.clamp_events.to_string());
            rec.extend(r.model_params.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, param_names: &[String]) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, param_names)
    }
}

/// Hooks invoked during training.
pub trait TrainObserver {
    fn on_log(&mut self, _row: &TraceRow) {}
    /// Called every `checkpoint_every` iterations with the current network.
    fn on_checkpoint(&mut self, _iteration: usize, _net: &Pgnniv, _cf: f64) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Outcome of [`train`]. On a non-finite cost, `error` is set and the trace
/// and network reflect the last finite state.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub iterations: usize,
    pub final_cf: f64,
    pub error: Option<Error>,
}

fn evaluate(net: &Pgnniv, batch: &Batch, weights: &PenaltyWeights) -> Result<TermValues> {
    let b = net.forward(batch, weights)?;
    Ok(TermValues { cf: b.cf, mse: b.mse })
}

fn tag_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite {
            term,
            iteration: Some(it),
        },
        other => other,
    }
}

/// Raises glibc's mmap and trim thresholds so the large buffers freed at
/// every iteration are reused from the heap rather than unmapped.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator tuning parameters.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
                libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
            }
        });
    }
}

/// Runs `cfg.max_iters` Adam steps on the full training batch, updating `net`
/// in place. Rows are logged at iteration 0, every `log_every` steps and at
/// the end.
pub fn train(
    net: &mut Pgnniv,
    train_batch: &Batch,
    test_batch: Option<&Batch>,
    weights: &PenaltyWeights,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    retain_freed_memory();
    let sizes: Vec<usize> = net.parameter_list().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(cfg, &sizes);
    let mut trace = TrainTrace::default();
    let mut g = Graph::new();
    let mut last_cf = f64::NAN;

    for it in 0..=cfg.max_iters {
        g.reset();
        let (vars, fv) = match net.forward_graph(&mut g, train_batch, weights, true) {
            Ok(x) => x,
            Err(e) => {
                return Ok(TrainOutcome {
                    trace,
                    iterations: it,
                    final_cf: last_cf,
                    error: Some(tag_iteration(e, it)),
                })
            }
        };
        let b = bundle(&g, &fv);
        last_cf = b.cf;
        let done = it == cfg.max_iters;
        if it % cfg.log_every == 0 || done {
            let test = match test_batch.map(|tb| evaluate(net, tb, weights)).transpose() {
                Ok(t) => t,
                Err(e) => {
                    return Ok(TrainOutcome {
                        trace,
                        iterations: it,
                        final_cf: last_cf,
                        error: Some(tag_iteration(e, it)),
                    })
                }
            };
            let row = TraceRow {
                iteration: it,
                train: TermValues { cf: b.cf, mse: b.mse },
                test,
                model_params: net.model.flat_params(),
                clamp_events: g.clamp_events(),
            };
            observer.on_log(&row);
            trace.rows.push(row);
        }
        if it > 0 && cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && !done {
            observer.on_checkpoint(it, net, b.cf)?;
        }
        if done {
            break;
        }
        g.backward(fv.cf)?;
        let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| g.grad(v)).collect();
        if grads
            .iter()
            .any(|gr| gr.as_ref().is_some_and(|t| t.data().iter().any(|x| !x.is_finite())))
        {
            return Ok(TrainOutcome {
                trace,
                iterations: it,
                final_cf: last_cf,
                error: Some(Error::NonFinite {
                    term: "gradient",
                    iteration: Some(it),
                }),
            });
        }
        adam.step(&mut net.parameters_mut(), &grads);
    }
    Ok(TrainOutcome {
        trace,
        iterations: cfg.max_iters,
        final_cf: last_cf,
        error: None,
    })
}

/// Centered moving average; near the edges the window is truncated.
pub fn smooth_curve(values: &[f64], w: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Config("cannot smooth an empty series".into()));
    }
    if w == 0 {
        return Err(Error::Config("smoothing window must be >= 1".into()));
    }
    let n = values.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let (before, after) = (w / 2, (w - 1) / 2);
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(n - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect())
}
