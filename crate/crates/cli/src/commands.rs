//! Subcommand implementations. Each returns the exit code on completion;
//! errors are mapped to exit codes by the caller.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use sacflow::checkpoint::Checkpoint;
use sacflow::diagnostics::{
    format_f64, init_grad_profile, linear_velocity_profile, CsvWriter, GradNormWriter, InitProbe, MetricsRow,
    MetricsWriter,
};
use sacflow::envs::{bandit_basin_fractions, bandit_demo_actions, generate_demos, DemoDataset, EnvKind};
use sacflow::gradcheck::run_gradchecks;
use sacflow::rollout::{sample_action, TimeGrid};
use sacflow::sac::pretrain::{flow_matching_step, sample_rows};
use sacflow::sac::train::evaluate_policy;
use sacflow::sac::{Mode, Preset, ReplayBuffer, Trainer};
use sacflow::velocity::{FlowActor, VelocityKind};
use sacflow::{Error, Result, SacRng};
use sacflow_autodiff::{AdamConfig, AdamState, Tensor};
use serde_json::{json, Value};

use crate::config::{Defaults, Overrides, RunConfig};
use crate::rundir::{checkpoint_steps, RunDir, GRADNORMS_FILE, METRICS_FILE};
use crate::{Command, ConfigArgs, TrainArgs, EXIT_FAILURE, EXIT_OK};

/// Bandit actions drawn for flow-matching pretraining.
pub const BANDIT_PRETRAIN_SAMPLES: usize = 4096;
/// Policy samples scored against the bandit mode basins after pretraining.
pub const BANDIT_EVAL_SAMPLES: usize = 10_000;
/// Interpreter used by `export-plots`; override with `SACFLOW_PYTHON`.
pub const DEFAULT_PYTHON: &str = "python3";
/// Python module rendering the figures.
pub const REPORT_MODULE: &str = "sacflow_report";

pub fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::PretrainFm(args) => pretrain_fm(&args),
        Command::TrainScratch(args) => train(&args, Mode::Scratch),
        Command::TrainO2o(args) => train(&args, Mode::OfflineToOnline),
        Command::GenDemos {
            out,
            env,
            episodes,
            seed,
        } => gen_demos(&out, &env, episodes, seed),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::DiagGrads {
            out,
            seeds,
            first_seed,
            k,
            init_gain,
            alpha,
            linear_w,
        } => diag_grads(&out, first_seed..first_seed + seeds, k, init_gain, alpha, linear_w),
        Command::Eval {
            run,
            checkpoint,
            episodes,
            seed,
        } => eval(&run, checkpoint.as_deref(), episodes, seed),
        Command::ExportPlots { args } => export_plots(&args),
    }
}

/// Resolves a configuration from the command-line sources.
pub fn resolve(args: &ConfigArgs, defaults: Defaults) -> Result<RunConfig> {
    let mut overrides = Overrides::new();
    if let Some(path) = &args.config {
        overrides.push_file(path)?;
    }
    for s in &args.set {
        overrides.push_assignment(s)?;
    }
    if let Some(seed) = args.seed {
        overrides.push("seed", Value::from(seed));
    }
    RunConfig::resolve(defaults, &overrides)
}

fn validate(config: &RunConfig, mode: Mode) -> Result<()> {
    match mode {
        Mode::Scratch => config.train.validate(),
        Mode::OfflineToOnline => config.train.validate_o2o(),
    }
}

/// Demonstrations of an offline-to-online run: the configured file, or
/// scripted-expert episodes generated from the run seed.
fn demos_for(config: &RunConfig, mode: Mode) -> Result<Option<DemoDataset>> {
    if mode == Mode::Scratch {
        return Ok(None);
    }
    let demos = match &config.demos_file {
        Some(path) => DemoDataset::read(path)?,
        None => {
            let seed = config.train.seed;
            generate_demos(
                config.train.env,
                config.train.demos,
                seed,
                &mut SacRng::seed_from_u64(seed),
            )?
        }
    };
    Ok(Some(demos))
}

fn train(args: &TrainArgs, mode: Mode) -> Result<i32> {
    let (dir, config, mut trainer) = match &args.resume {
        Some(path) => {
            let (dir, config) = RunDir::open(path)?;
            validate(&config, mode)?;
            let demos = demos_for(&config, mode)?;
            let trainer = match dir.latest_step()? {
                Some(step) => {
                    let state = Checkpoint::read(&dir.checkpoint_path(step))?;
                    let buffer = ReplayBuffer::read_snapshot(&dir.replay_path(step), config.train.buffer)?;
                    dir.truncate_logs(step)?;
                    Trainer::restore(config.train.clone(), mode, demos.as_ref(), &state, buffer)?
                }
                None => {
                    dir.truncate_logs(0)?;
                    Trainer::new(config.train.clone(), mode, demos.as_ref())?
                }
            };
            (dir, config, trainer)
        }
        None => {
            let defaults = match mode {
                Mode::Scratch => Defaults {
                    preset: Preset::Scratch,
                    env: EnvKind::PointMass,
                    kind: VelocityKind::FlowG,
                },
                Mode::OfflineToOnline => Defaults {
                    preset: Preset::O2o,
                    env: EnvKind::SparseReach,
                    kind: VelocityKind::FlowG,
                },
            };
            let config = resolve(&args.config, defaults)?;
            validate(&config, mode)?;
            let demos = demos_for(&config, mode)?;
            let trainer = Trainer::new(config.train.clone(), mode, demos.as_ref())?;
            (RunDir::create(&config)?, config, trainer)
        }
    };
    let mut metrics = MetricsWriter::open(&dir.file(METRICS_FILE), config.train.k)?;
    let mut gradnorms = GradNormWriter::open(&dir.file(GRADNORMS_FILE))?;
    let every = config.checkpoint_every;
    let mut last: Option<MetricsRow> = None;
    trainer.run(|t, report| {
        if let Some(p) = &report.grad_norms {
            gradnorms.write(p)?;
        }
        if let Some(row) = &report.row {
            metrics.write(row)?;
            last = Some(row.clone());
        }
        let step = t.step();
        if (every > 0 && step % every == 0) || t.is_done() {
            dir.save(step, &t.save_state(), &t.buffer)?;
        }
        Ok(())
    })?;
    if let Some(row) = last {
        println!("{}", row_summary(&dir.path, &row));
    }
    Ok(EXIT_OK)
}

fn row_summary(dir: &Path, row: &MetricsRow) -> Value {
    json!({
        "run": dir.display().to_string(),
        "step": row.step,
        "episode_return": row.episode_return,
        "success_rate": row.success_rate,
        "alpha": row.alpha,
    })
}

/// States and pre-squash-able actions for flow-matching pretraining.
fn pretrain_data(config: &RunConfig, rng: &mut SacRng) -> Result<(Tensor, Tensor)> {
    let dataset = match (&config.demos_file, config.train.env) {
        (Some(path), _) => DemoDataset::read(path)?,
        (None, EnvKind::Bandit) => {
            let actions = bandit_demo_actions(BANDIT_PRETRAIN_SAMPLES, rng);
            let n = actions.len();
            return Ok((Tensor::matrix(n, 1, vec![0.0; n])?, Tensor::matrix(n, 1, actions)?));
        }
        (None, EnvKind::SparseReach) => {
            if config.train.demos == 0 {
                return Err(Error::config("demos", "must be positive to generate demonstrations"));
            }
            let seed = config.train.seed;
            generate_demos(EnvKind::SparseReach, config.train.demos, seed, rng)?
        }
        (None, env) => {
            return Err(Error::config(
                "demos_file",
                format!("{} has no scripted expert; provide a demonstration file", env.as_str()),
            ))
        }
    };
    if dataset.env != config.train.env {
        return Err(Error::config(
            "demos_file",
            format!(
                "demonstrations are for {}, config names {}",
                dataset.env.as_str(),
                config.train.env.as_str()
            ),
        ));
    }
    let s: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.s.as_slice()).collect();
    let a: Vec<&[f64]> = dataset.transitions.iter().map(|t| t.a.as_slice()).collect();
    Ok((Tensor::from_rows(&s)?, Tensor::from_rows(&a)?))
}

fn pretrain_fm(args: &ConfigArgs) -> Result<i32> {
    let defaults = Defaults {
        preset: Preset::Scratch,
        env: EnvKind::Bandit,
        kind: VelocityKind::FlowG,
    };
    let config = resolve(args, defaults)?;
    config.train.validate()?;
    if config.fm_steps == 0 {
        return Err(Error::config("fm_steps", "must be positive"));
    }
    let train = &config.train;
    let mut rng = SacRng::seed_from_u64(train.seed);
    let (states, actions) = pretrain_data(&config, &mut rng)?;
    let dir = RunDir::create(&config)?;
    let mut actor = FlowActor::new(train.velocity.clone(), &mut rng)?;
    let mut adam = AdamState::new(AdamConfig::new(train.fm_lr).with_b1(train.actor_b1), &actor.params);
    let mut log = CsvWriter::open(&dir.file("fm_loss.csv"), &["step".to_string(), "loss".to_string()])?;
    let (mut sum, mut count) = (0.0, 0u64);
    for step in 1..=config.fm_steps {
        let (s, a) = sample_rows(&states, &actions, train.batch, &mut rng)?;
        sum += flow_matching_step(&mut actor, &mut adam, &s, &a, &mut rng)?;
        count += 1;
        if step % train.log_every == 0 || step == config.fm_steps {
            log.write_fields(&[step.to_string(), format_f64(sum / count as f64)])?;
            (sum, count) = (0.0, 0);
        }
    }
    let mut state = Checkpoint::new();
    state.put_u64("step", vec![config.fm_steps, 0]);
    state.put_params("actor", &actor.params);
    state.put_adam("fm_adam", &adam);
    state.write(&dir.checkpoint_path(config.fm_steps))?;
    let mut summary = json!({ "run": dir.path.display().to_string(), "fm_steps": config.fm_steps });
    if train.env == EnvKind::Bandit {
        let n = BANDIT_EVAL_SAMPLES;
        let zeros = Tensor::matrix(n, 1, vec![0.0; n])?;
        let grid = TimeGrid::new(train.k)?;
        let path = sample_action(&actor.model, &actor.model, &actor.params, &zeros, &grid, &mut rng)?;
        summary["basin_fractions"] = json!(bandit_basin_fractions(path.action.data()));
    }
    println!("{summary}");
    Ok(EXIT_OK)
}

fn gen_demos(out: &Path, env: &str, episodes: usize, seed: u64) -> Result<i32> {
    let kind: EnvKind = env.parse().map_err(|e: Error| Error::config("--env", e.to_string()))?;
    let demos = generate_demos(kind, episodes, seed, &mut SacRng::seed_from_u64(seed))?;
    demos.write(out)?;
    println!(
        "{}",
        json!({ "out": out.display().to_string(), "episodes": demos.episodes, "transitions": demos.transitions.len() })
    );
    Ok(EXIT_OK)
}

fn gradcheck(seed: u64) -> Result<i32> {
    let checks = run_gradchecks(seed)?;
    for c in &checks {
        println!(
            "{:<20} max_rel_error {:.3e} tolerance {:.0e} {}",
            c.name,
            c.max_rel_error,
            c.tolerance,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok(if checks.iter().all(|c| c.passed()) {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

fn diag_grads(
    out: &Path,
    seeds: std::ops::Range<u64>,
    k: usize,
    init_gain: f64,
    alpha: f64,
    linear_w: f64,
) -> Result<i32> {
    if seeds.is_empty() {
        return Err(Error::config("--seeds", "must be positive"));
    }
    let open = |name: &str| -> Result<GradNormWriter> {
        let sub = out.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let file = sub.join(GRADNORMS_FILE);
        if file.exists() {
            return Err(Error::config("--out", format!("{} already exists", file.display())));
        }
        GradNormWriter::open(&file)
    };
    for kind in VelocityKind::ALL {
        let mut probe = InitProbe::preset(kind, k, init_gain);
        probe.alpha = alpha;
        let mut writer = open(kind.as_str())?;
        let mut ratios = Vec::new();
        let mut degenerate = Vec::new();
        for seed in seeds.clone() {
            let mut profile = init_grad_profile(&probe, seed)?;
            profile.step = seed;
            writer.write(&profile)?;
            let r = profile.ratio();
            if r.is_finite() {
                ratios.push(r);
            } else {
                degenerate.push(seed);
            }
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
        let max = ratios.iter().copied().fold(f64::NAN, f64::max);
        println!(
            "{}",
            json!({ "kind": kind.as_str(), "mean_ratio": mean, "max_ratio": max, "degenerate_seeds": degenerate })
        );
    }
    let mut linear = open("linear")?;
    let profile = linear_velocity_profile(linear_w, k)?;
    linear.write(&profile)?;
    println!("{}", json!({ "kind": "linear", "w": linear_w, "norms": profile.norms }));
    Ok(EXIT_OK)
}

fn eval(run: &Path, checkpoint: Option<&Path>, episodes: usize, seed: u64) -> Result<i32> {
    let config = RunConfig::read(&run.join(crate::rundir::RUN_FILE))?;
    let path: PathBuf = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            let step = checkpoint_steps(run)?
                .into_iter()
                .max()
                .ok_or_else(|| Error::Invalid(format!("{} holds no checkpoint", run.display())))?;
            run.join(format!("checkpoint-{step}.bin"))
        }
    };
    let state = Checkpoint::read(&path)?;
    let mut actor = FlowActor::new(config.train.velocity.clone(), &mut SacRng::seed_from_u64(0))?;
    state.load_params("actor", &mut actor.params)?;
    let grid = TimeGrid::new(config.train.k)?;
    let (ret, success) = evaluate_policy(
        &actor,
        &grid,
        config.train.env,
        episodes,
        &mut SacRng::seed_from_u64(seed),
    )?;
    println!(
        "{}",
        json!({
            "checkpoint": path.display().to_string(),
            "episodes": episodes,
            "episode_return": ret,
            "success_rate": success,
        })
    );
    Ok(EXIT_OK)
}

fn export_plots(args: &[String]) -> Result<i32> {
    let python = std::env::var_os("SACFLOW_PYTHON").unwrap_or_else(|| OsString::from(DEFAULT_PYTHON));
    let status = std::process::Command::new(&python)
        .arg("-m")
        .arg(REPORT_MODULE)
        .args(args)
        .status()
        .map_err(|e| Error::io(PathBuf::from(&python), e))?;
    if status.success() {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "error: `{} -m {REPORT_MODULE}` failed ({status})",
            python.to_string_lossy()
        );
        Ok(EXIT_FAILURE)
    }
}
