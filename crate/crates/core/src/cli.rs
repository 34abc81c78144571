//! Command-line interface: `generate`, `train`, `evaluate`, `sweep`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{out_root, resolve, Overrides, RunConfig};
use crate::constitutive::CurveAxis;
use crate::datagen::{generate, Dataset, FluxConvention, Problem, ProblemSpec, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{
    bc_error_map, error_table, sample_errors, spatial_profiles, write_error_table, write_profiles,
    write_sample_errors, Field,
};
use crate::network::{Batch, Pgnniv};
use crate::sweep::{run_sweep, SweepAxis, SweepBase, SweepSpec};
use crate::trainer::{train, TraceRow, TrainObserver, FULL_ITERS};

#[derive(Debug, Parser)]
#[command(name = "pgnniv", version, about = "Physics-guided networks for 1D steady diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (train.csv, test.csv, meta.json).
    Generate(GenerateArgs),
    /// Train a network on a dataset and write a checkpoint and trace.
    Train(TrainArgs),
    /// Score a checkpoint against the closed-form solution.
    Evaluate(EvaluateArgs),
    /// Run one train/evaluate cycle per value of a parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_problem)]
    pub variant: Problem,
    #[arg(long, default_value_t = 10_000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 10)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise level p, as a fraction of each profile's standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Output directory [default: $PGNNIV_OUT/data/<variant>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write |q| instead of signed flows. Such files cannot be trained on.
    #[arg(long)]
    pub abs_flux: bool,
}

/// Training settings that may also come from a config file.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// scalar-k, diagonal-k, cnn2l, cnn3l or parametric.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub cnn_width: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Use the long iteration budget (100000) unless --iters is given.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub c0: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub c2: Option<f64>,
    #[arg(long)]
    pub c3: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// TOML file with the same keys (model, learning_rate, max_iters, c0, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl RunFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let flags = Overrides {
            model: self.model.clone(),
            cnn_width: self.cnn_width,
            hidden_width: self.hidden,
            learning_rate: self.lr,
            max_iters: self.iters.or(self.full.then_some(FULL_ITERS)),
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            c0: self.c0,
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
        };
        resolve(self.config.as_deref(), &flags)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
    /// Output directory [default: $PGNNIV_OUT/runs/<model>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Test,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory [default: next to the checkpoint, in eval/].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Side of the (g1, g2) error map; 0 skips the map.
    #[arg(long, default_value_t = 100)]
    pub map_resolution: usize,
    /// Also write the learned constitutive curve.
    #[arg(long)]
    pub export_constitutive: bool,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [0.13, 0.87])]
    pub u_range: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_parser = parse_axis)]
    pub axis: SweepAxis,
    /// Comma-separated, strictly increasing [default depends on the axis].
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, value_parser = parse_problem)]
    pub variant: Problem,
    #[arg(long, default_value_t = 10_000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 10)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Held-out boundary conditions shared by every point.
    #[arg(long, default_value_t = 1000)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub run: RunFlags,
    /// Output directory [default: $PGNNIV_OUT/sweeps/<axis>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_problem(s: &str) -> std::result::Result<Problem, String> {
    s.parse()
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    s.parse()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let spec = ProblemSpec {
        problem: a.variant,
        grid_n: a.grid,
        samples: a.n_samples,
        noise: a.noise,
        seed: a.seed,
    };
    let ds = generate(&spec)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("data").join(a.variant.name()));
    let flux = if a.abs_flux {
        FluxConvention::Absolute
    } else {
        FluxConvention::Signed
    };
    ds.save(&out, flux)?;
    println!(
        "{}: {} rows ({} train / {} test), n = {}, noise = {} -> {}",
        a.variant,
        a.n_samples,
        ds.train.len(),
        ds.test.len(),
        a.grid,
        a.noise,
        out.display()
    );
    Ok(())
}

struct CliObserver<'a> {
    dir: &'a Path,
    config: RunConfig,
    data: ProblemSpec,
    quiet: bool,
}

impl TrainObserver for CliObserver<'_> {
    fn on_log(&mut self, row: &TraceRow) {
        if !self.quiet {
            eprintln!(
                "iter {:>7}  cf {:.6e}  e {:.3e}  pi1 {:.3e}  pi2 {:.3e}  pi3 {:.3e}",
                row.iteration, row.train.cf, row.train.mse[0], row.train.mse[1], row.train.mse[2], row.train.mse[3]
            );
        }
    }

    fn on_checkpoint(&mut self, iteration: usize, net: &Pgnniv, cf: f64) -> Result<()> {
        Checkpoint::capture(net, &self.config, Some(self.data), iteration, cf)
            .save(&self.dir.join(format!("checkpoint_{iteration:07}.json")))
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let ds = Dataset::load(&a.dataset)?;
    let grid = ds.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut net = Pgnniv::init(cfg.model, grid, cfg.hidden_width, &mut rng);
    let train_batch = Batch::from_samples(&ds.train)?;
    let test_batch = if ds.test.is_empty() {
        None
    } else {
        Some(Batch::from_samples(&ds.test)?)
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("runs").join(cfg.model.name()));
    std::fs::create_dir_all(&out)?;
    let mut obs = CliObserver {
        dir: &out,
        config: cfg,
        data: ds.spec,
        quiet: a.quiet,
    };
    let outcome = train(&mut net, &train_batch, test_batch.as_ref(), &cfg.weights, &cfg.train, &mut obs)?;
    outcome.trace.save_csv(&out.join("trace.csv"), &net.model.flat_param_names())?;
    Checkpoint::capture(&net, &cfg, Some(ds.spec), outcome.iterations, outcome.final_cf)
        .save(&out.join("checkpoint.json"))?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    println!("model {} after {} iterations, cf = {:e}", cfg.model, outcome.iterations, outcome.final_cf);
    for (name, t) in net.model.named_params() {
        println!("  {name} = {:?}", t.data());
    }
    println!("-> {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalMeta<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    split: &'static str,
    config: RunConfig,
    data: ProblemSpec,
    samples: usize,
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = Dataset::load(&a.dataset)?;
    if ck.grid_n != ds.spec.grid_n {
        return Err(Error::GridMismatch {
            expected: ck.grid_n,
            got: ds.spec.grid_n,
        });
    }
    let net = ck.network()?;
    let problem = ds.spec.problem;
    let samples: Vec<Sample> = match a.split {
        Split::Test => ds.test.clone(),
        Split::Train => ds.train.clone(),
        Split::All => ds.train.iter().chain(&ds.test).cloned().collect(),
    };
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .map(|p| p.join("eval"))
            .unwrap_or_else(|| PathBuf::from("eval"))
    });
    std::fs::create_dir_all(&out)?;

    let errors = sample_errors(&net, problem, &samples)?;
    write_sample_errors(&errors, &out.join("errors.csv"))?;
    let table = error_table(&errors)?;
    write_error_table(&table, &out.join("table.csv"))?;
    write_profiles(&spatial_profiles(&net, problem, &samples)?, &out.join("profiles.csv"))?;
    if a.map_resolution > 0 {
        let map = bc_error_map(&net, problem, a.map_resolution)?;
        for f in Field::ALL {
            map.write_csv(f, std::fs::File::create(out.join(format!("map_{f}.csv")))?)?;
        }
    }
    if a.export_constitutive {
        let (lo, hi) = (a.u_range[0], a.u_range[1]);
        if a.points < 2 || !(hi > lo) {
            return Err(Error::Config("constitutive export needs LO < HI and at least 2 points".into()));
        }
        let us: Vec<f64> = (0..a.points)
            .map(|i| lo + (hi - lo) * i as f64 / (a.points - 1) as f64)
            .collect();
        let curve = net.model.export_constitutive_curve(&us, &net.grid);
        let mut w = csv::Writer::from_path(out.join("constitutive.csv"))?;
        w.write_record([
            match curve.axis {
                CurveAxis::FieldValue => "u",
                CurveAxis::Position => "x",
            },
            "k",
        ])?;
        for (x, k) in &curve.points {
            w.write_record([x.to_string(), k.to_string()])?;
        }
        w.flush()?;
    }
    let meta = EvalMeta {
        checkpoint: &a.checkpoint,
        dataset: &a.dataset,
        split: match a.split {
            Split::Test => "test",
            Split::Train => "train",
            Split::All => "all",
        },
        config: ck.config,
        data: ds.spec,
        samples: samples.len(),
    };
    std::fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

    println!("{:<3} {:>11} {:>11} {:>11} {:>11} {:>11}", "", "min", "Q1", "Q2", "Q3", "max");
    for f in Field::ALL {
        match table.get(f) {
            Some(s) => println!(
                "{:<3} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e}",
                f.to_string(),
                s.min,
                s.q1,
                s.q2,
                s.q3,
                s.max
            ),
            None => println!("{f:<3} (no finite values)"),
        }
    }
    println!(
        "{} samples, {} near g1 = g2 excluded from q and k -> {}",
        table.samples,
        table.excluded_near_diagonal,
        out.display()
    );
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let run = a.run.resolve()?;
    let values = if a.values.is_empty() {
        a.axis.default_values()
    } else {
        a.values.clone()
    };
    let spec = SweepSpec {
        axis: a.axis,
        values,
        base: SweepBase {
            data: ProblemSpec {
                problem: a.variant,
                grid_n: a.grid,
                samples: a.n_samples,
                noise: a.noise,
                seed: a.data_seed,
            },
            run,
            eval_samples: a.eval_samples,
        },
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("sweeps").join(a.axis.name()));
    let points = run_sweep(&spec, a.jobs, Some(&out))?;
    for p in &points {
        match &p.result {
            Ok(m) => println!(
                "{} = {}: e2r u {} q {} k {}",
                a.axis,
                p.value,
                fmt_mean(m.u),
                fmt_mean(m.q),
                fmt_mean(m.k)
            ),
            Err(e) => println!("{} = {}: failed: {e}", a.axis, p.value),
        }
    }
    println!("-> {}", out.join("sweep.csv").display());
    Ok(())
}

fn fmt_mean(m: Option<crate::sweep::MeanSe>) -> String {
    m.map(|m| format!("{:.3e} ± {:.1e}", m.mean, m.se))
        .unwrap_or_else(|| "n/a".into())
}
