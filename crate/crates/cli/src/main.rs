//! Experiment pipelines behind one binary: simulate maneuvers, build
//! datasets, train models, evaluate them as regressors, and run them inside
//! the predictive controller.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use satflow::dataset::{self};
use satflow::dynamics::BodyState;
use satflow::evaluation::{
    self, ape, robustness_experiment, self_loop_eval, spe, spe_lagged, ConditionedModel,
    RegressionMetrics,
};
use satflow::flow::FlowModel;
use satflow::math::Quaternion;
use satflow::mpc::{closed_loop, write_closed_loop_csv, ClosedLoopRun, MpcModel};
use satflow::sim;
use satflow::training::{fit, TrainReport};

#[derive(Parser)]
#[command(name = "satflow", about = "Spacecraft attitude dynamics learning and control pipelines")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the maneuver duration in seconds.
    #[arg(long, global = true)]
    duration: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one feedback-controlled maneuver and record the trajectory.
    Simulate,
    /// Generate the train and test datasets.
    GenDataset,
    /// Train a model on a dataset file.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Evaluate a trained model on a dataset (regression metrics).
    EvalModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Experiment name used in the metrics table.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Closed-loop maneuver with the model (or the exact dynamics) inside
    /// the predictive controller.
    MpcRun {
        #[arg(long, conflicts_with = "exact")]
        model: Option<PathBuf>,
        /// Use the exact dynamics as the predictor instead of a model.
        #[arg(long)]
        exact: bool,
    },
    /// Noise-robustness Monte Carlo around the closed-loop maneuver.
    Robustness {
        #[arg(long, conflicts_with = "exact")]
        model: Option<PathBuf>,
        #[arg(long)]
        exact: bool,
        /// Experiment name used in the aggregates table.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Merge metric tables from earlier runs and write a manifest.
    Report {
        /// Directories holding earlier outputs.
        #[arg(long, required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(duration) = cli.duration {
        cfg.maneuver.duration = duration;
    }
    Ok(cfg)
}

fn prepare_out(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| anyhow!("--out directory is required for this command"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = toml::to_string_pretty(cfg).context("serializing resolved config")?;
    fs::write(out.join("config.toml"), resolved).context("writing resolved config")?;
    Ok(out)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;

    match &cli.command {
        Command::Simulate => {
            let out = prepare_out(&cli, &cfg)?;
            let sim_cfg = cfg.sim_config(cfg.seed)?;
            let mut rng = seeded_rng(cfg.seed ^ 0x5f5f_5f5f);
            let q_ref = sim::random_reference(&mut rng);
            eprintln!("simulating one {:.0} s maneuver", sim_cfg.duration);
            let traj = sim::run_maneuver(&sim_cfg, q_ref)?;
            write_trajectory_csv(&traj, &out.join("trajectory.csv"))?;
            eprintln!("wrote {} samples", traj.len());
        }
        Command::GenDataset => {
            let out = prepare_out(&cli, &cfg)?;
            let steps = cfg.dataset.steps;
            let train_cfg = cfg.sim_config(cfg.seed)?;
            eprintln!("generating {} training runs", cfg.dataset.train_runs);
            let train = dataset::generate_dataset(&train_cfg, cfg.dataset.train_runs, steps)?;
            dataset::write_dataset(&train, &out.join("train.bin"))?;

            let mut test_cfg = cfg.sim_config(cfg.seed.wrapping_add(cfg.dataset.train_runs as u64))?;
            test_cfg.inertia_scale = cfg.dataset.test_inertia_scale;
            eprintln!("generating {} test runs", cfg.dataset.test_runs);
            let test = dataset::generate_dataset(&test_cfg, cfg.dataset.test_runs, steps)?;
            dataset::write_dataset(&test, &out.join("test.bin"))?;

            if cfg.dataset.export_csv {
                dataset::write_dataset_csv(&train, &out.join("train.csv"))?;
                dataset::write_dataset_csv(&test, &out.join("test.csv"))?;
            }
            eprintln!(
                "wrote {} train and {} test samples",
                train.samples.len(),
                test.samples.len()
            );
        }
        Command::Train { dataset: ds_path } => {
            let out = prepare_out(&cli, &cfg)?;
            let ds = dataset::read_dataset(ds_path)
                .with_context(|| format!("reading dataset {}", ds_path.display()))?;
            let mut model_cfg = cfg.model;
            model_cfg.steps = ds.steps;
            model_cfg.seed = cfg.seed;
            let mut train_cfg = cfg.training;
            train_cfg.seed = cfg.seed;
            train_cfg.progress = true;
            let model = FlowModel::new(
                model_cfg,
                ds.normalization,
                satflow::dataset::conditioning(&ds.params),
            )?;
            eprintln!(
                "training on {} samples ({} parameters)",
                ds.samples.len(),
                model.param_count()
            );
            let (model, report) = fit(model, &ds, &train_cfg)?;
            model.save_weights(&out.join("model.bin"))?;
            report.write_csv(&out.join("train_report.csv"))?;
            log_training_outcome(&report);
        }
        Command::EvalModel {
            model,
            dataset: ds_path,
            label,
        } => {
            let out = prepare_out(&cli, &cfg)?;
            let m = FlowModel::load_weights(model)
                .with_context(|| format!("loading model {}", model.display()))?;
            let ds = dataset::read_dataset(ds_path)
                .with_context(|| format!("reading dataset {}", ds_path.display()))?;
            let predictor = ConditionedModel::stored(&m);
            eprintln!("evaluating {} windows", ds.samples.len());
            let metrics = self_loop_eval(
                &predictor,
                &ds,
                cfg.evaluation.self_loop_steps,
                &cfg.training.weights,
            )?;
            eprintln!(
                "single-step mre {:.4}% | self-loop mre {:.4} | physics {:.4}/{:.4}",
                metrics.mre_single,
                metrics.mre_selfloop,
                metrics.physics_single,
                metrics.physics_selfloop
            );
            write_per_window_csv(&metrics, &out.join("per_window.csv"))?;
            evaluation::write_regression_table(
                &[(label.clone(), metrics)],
                &out.join("regression_metrics.csv"),
            )?;
        }
        Command::MpcRun { model, exact } => {
            let out = prepare_out(&cli, &cfg)?;
            let params = cfg.spacecraft.to_params()?;
            let loaded;
            let mpc_model = if *exact {
                MpcModel::exact(&params)
            } else {
                let path = model
                    .as_ref()
                    .ok_or_else(|| anyhow!("either --model or --exact is required"))?;
                loaded = FlowModel::load_weights(path)
                    .with_context(|| format!("loading model {}", path.display()))?;
                MpcModel::learned_stored(&loaded)
            };
            let q_ref = cfg.maneuver.reference_attitude();
            let x0 = BodyState::at_rest(Quaternion::identity());
            let cl_cfg = cfg.maneuver.closed_loop_config();
            eprintln!(
                "closed-loop maneuver: {:.0} s, horizon {}",
                cl_cfg.duration, cfg.mpc.horizon
            );
            let run = closed_loop(&mpc_model, &params, &x0, q_ref, &cl_cfg, &cfg.mpc, |s, _| *s)?;
            write_closed_loop_csv(&run, cfg.mpc.solver_iterations, &out.join("closed_loop.csv"))?;
            write_error_series(&run, q_ref, &cfg, &out)?;
            eprintln!("wrote {} control steps", run.trajectory.len());
        }
        Command::Robustness { model, exact, label } => {
            let out = prepare_out(&cli, &cfg)?;
            let params = cfg.spacecraft.to_params()?;
            let loaded;
            let mpc_model = if *exact {
                MpcModel::exact(&params)
            } else {
                let path = model
                    .as_ref()
                    .ok_or_else(|| anyhow!("either --model or --exact is required"))?;
                loaded = FlowModel::load_weights(path)
                    .with_context(|| format!("loading model {}", path.display()))?;
                MpcModel::learned_stored(&loaded)
            };
            let q_ref = cfg.maneuver.reference_attitude();
            let x0 = BodyState::at_rest(Quaternion::identity());
            let cl_cfg = cfg.maneuver.closed_loop_config();
            eprintln!(
                "robustness: {} runs at {:.0}% noise",
                cfg.evaluation.noise_runs,
                cfg.evaluation.noise_level * 100.0
            );
            let report = robustness_experiment(
                &mpc_model,
                &params,
                &x0,
                q_ref,
                &cl_cfg,
                &cfg.mpc,
                cfg.evaluation.noise_runs,
                cfg.evaluation.noise_level,
                cfg.evaluation.noise_kind,
                cfg.seed,
            )?;
            write_closed_loop_csv(
                &report.noise_free,
                cfg.mpc.solver_iterations,
                &out.join("noise_free.csv"),
            )?;
            for (i, run) in report.runs.iter().enumerate() {
                write_closed_loop_csv(
                    run,
                    cfg.mpc.solver_iterations,
                    &out.join(format!("run_{i:02}.csv")),
                )?;
            }
            evaluation::write_robustness_table(
                &[(label.clone(), report)],
                &out.join("robustness.csv"),
            )?;
        }
        Command::Report { inputs } => {
            let out = prepare_out(&cli, &cfg)?;
            merge_tables(inputs, &out)?;
        }
    }
    Ok(())
}

fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn log_training_outcome(report: &TrainReport) {
    if let Some(last) = report.epochs.last() {
        eprintln!(
            "finished after {} epochs (best {}): val dd {:.5} pi {:.5}",
            report.epochs.len(),
            report.best_epoch,
            last.val_data_loss,
            last.val_physics_loss
        );
    }
}

fn write_trajectory_csv(traj: &sim::Trajectory, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "time,q0,q1,q2,q3,w1,w2,w3,wrw1,wrw2,wrw3,u1,u2,u3")?;
    for i in 0..traj.len() {
        let s = &traj.states[i];
        let u = traj.torques[i];
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            traj.times[i],
            s.attitude.q0,
            s.attitude.q1,
            s.attitude.q2,
            s.attitude.q3,
            s.omega.x,
            s.omega.y,
            s.omega.z,
            s.omega_rw.x,
            s.omega_rw.y,
            s.omega_rw.z,
            u.x,
            u.y,
            u.z
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_per_window_csv(metrics: &RegressionMetrics, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "window,mre_selfloop,physics_selfloop")?;
    for (i, (m, p)) in metrics
        .per_window_mre
        .iter()
        .zip(&metrics.per_window_physics)
        .enumerate()
    {
        writeln!(w, "{i},{m:?},{p:?}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_error_series(
    run: &ClosedLoopRun,
    q_ref: Quaternion,
    cfg: &RunConfig,
    out: &Path,
) -> Result<()> {
    let series = ape(&run.trajectory, q_ref);
    evaluation::write_ape_csv(&series, &out.join("ape.csv"))?;

    let control_dt = cfg.mpc.control_dt;
    let settle = cfg.evaluation.spe_settle_s;
    let groups: [(&str, Vec<Vec<f64>>); 3] = [
        (
            "attitude",
            (0..4)
                .map(|a| series.quat_err.iter().map(|q| q[a]).collect())
                .collect(),
        ),
        (
            "omega",
            (0..3)
                .map(|a| series.omega_err.iter().map(|o| o[a]).collect())
                .collect(),
        ),
        (
            "wheels",
            (0..3)
                .map(|a| series.wheel_err.iter().map(|r| r[a]).collect())
                .collect(),
        ),
    ];
    for (name, axes) in groups {
        let result = if cfg.evaluation.spe_lag_in_steps {
            let lag = cfg.evaluation.spe_delta_s.round() as usize;
            let start = series
                .times
                .iter()
                .position(|&t| t > settle)
                .unwrap_or(series.times.len());
            spe_lagged(&axes, lag.max(1), start)
        } else {
            spe(&axes, &series.times, cfg.evaluation.spe_delta_s, settle, control_dt)
        };
        match result {
            Ok(r) => evaluation::write_spe_csv(&r, &out.join(format!("spe_{name}.csv")))?,
            Err(e) => eprintln!("skipping spe_{name}: {e}"),
        }
    }
    Ok(())
}

fn merge_tables(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut regression_rows = Vec::new();
    let mut robustness_rows = Vec::new();
    let mut produced = Vec::new();

    for dir in inputs {
        if !dir.is_dir() {
            bail!("input {} is not a directory", dir.display());
        }
        for (file, rows) in [
            ("regression_metrics.csv", &mut regression_rows),
            ("robustness.csv", &mut robustness_rows),
        ] {
            let path = dir.join(file);
            if path.exists() {
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                rows.extend(text.lines().skip(1).map(String::from));
            }
        }
    }

    if !regression_rows.is_empty() {
        let path = out.join("table_regression.csv");
        let mut text = String::from("experiment,mre,physics,mre_selfloop,physics_selfloop\n");
        for row in &regression_rows {
            text.push_str(row);
            text.push('\n');
        }
        fs::write(&path, text)?;
        produced.push(path);
    }
    if !robustness_rows.is_empty() {
        let path = out.join("table_robustness.csv");
        let mut text = String::from("experiment_variable,mae,final_error,spread\n");
        for row in &robustness_rows {
            text.push_str(row);
            text.push('\n');
        }
        fs::write(&path, text)?;
        produced.push(path);
    }
    produced.push(out.join("config.toml"));
    evaluation::write_manifest(&produced, &out.join("manifest.txt"))?;
    eprintln!("merged {} inputs", inputs.len());
    Ok(())
}
