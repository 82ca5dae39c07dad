//! The rollout / estimate / update loop, run logs and experiment sweeps.
//!
//! A run directory holds `config.txt` plus one `seed_<n>/` directory per seed with
//! `log.csv` (one header line, then one row per iteration), `diagnostics.jsonl` (one
//! [`DiagnosticsRecord`] per optimized epoch), optionally `dumps.jsonl` (per-minibatch
//! ratios, advantages and masks) and `checkpoint.bin` (final parameters).

mod config;
mod plots;
mod sweep;

pub use config::{parse_assignment, ExperimentConfig, CONFIG_KEYS};
pub use plots::{export_plots, PlotOptions};
pub use sweep::{sweep, SweepRow};

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{records_from_dumps, DiagnosticsRecord};
use crate::diff::{MlpSpec, ParamVector, PolicySpec};
use crate::envs::{make_env, policy_table, ActionSpace, Collector, Environment, RewardScaler, RunningNorm};
use crate::error::{Error, Result};
use crate::estimation::Batch;
use crate::optimizers::{learning_rate, Learner, MinibatchDump, UpdateData, UpdateReport};

const ENV_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

/// Independent generator `stream` derived from a master seed.
pub fn seed_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One iteration of a run. Update fields are empty when the iteration aborted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub lr: f64,
    pub status: String,
    /// Mean undiscounted return of training episodes finished this iteration.
    pub train_return: Option<f64>,
    pub train_episodes: usize,
    /// Mean undiscounted return over the evaluation episodes.
    pub eval_return: Option<f64>,
    /// Exact discounted return of the current policy (tabular environments).
    pub exact_return: Option<f64>,
    pub surrogate_before: Option<f64>,
    pub surrogate_after: Option<f64>,
    pub kl_mean: Option<f64>,
    pub epochs_run: Option<usize>,
    pub early_stopped: Option<bool>,
    pub minibatches_skipped: Option<usize>,
    pub line_search_steps: Option<usize>,
    pub accepted: Option<bool>,
    pub value_loss: Option<f64>,
    /// Means over this iteration's diagnostics records.
    pub empirical_variance: Option<f64>,
    pub variance_bound: Option<f64>,
    pub avg_ratio_deviation: Option<f64>,
    pub mean_ratio: Option<f64>,
    pub dropout_fraction: Option<f64>,
    /// Extremes over this iteration's diagnostics records.
    pub ratio_min: Option<f64>,
    pub ratio_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub rows: Vec<LogRow>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    /// `(iteration, dump)` for every optimized minibatch.
    pub dumps: Vec<(usize, MinibatchDump)>,
    pub numerical_aborts: usize,
    pub policy_params: Option<ParamVector>,
    pub value_params: Option<ParamVector>,
    pub obs_norm: Option<RunningNorm>,
}

impl RunLog {
    pub fn final_row(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Whether every seed hit at least one numerical abort.
pub fn all_seeds_aborted(logs: &[RunLog]) -> bool {
    !logs.is_empty() && logs.iter().all(|l| l.numerical_aborts > 0)
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn build_learner(config: &ExperimentConfig, env: &dyn Environment, seed: u64) -> Result<Learner> {
    let obs = env.observation_dim();
    let mut policy_spec = match env.action_space() {
        ActionSpace::Discrete(n) => PolicySpec::categorical(obs, config.hidden.clone(), n),
        ActionSpace::Continuous(d) => PolicySpec::gaussian(obs, config.hidden.clone(), d),
    };
    policy_spec.backbone.activation = config.activation;
    let mut value_spec = MlpSpec::new(obs, config.hidden.clone(), 1);
    value_spec.activation = config.activation;
    Learner::new(policy_spec, value_spec, &mut seed_stream(seed, INIT_STREAM))
}

fn evaluate(
    learner: &Learner,
    env: &mut dyn Environment,
    norm: Option<&RunningNorm>,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let observe = |raw: Vec<f64>| match norm {
        Some(n) => n.normalize(&raw),
        None => raw,
    };
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = observe(env.reset(rng));
        loop {
            let action = learner.policy.distribution(&learner.params, &obs)?.sample(rng);
            let step = env.step(&action, rng)?;
            total += step.reward;
            if step.terminated || step.truncated {
                break;
            }
            obs = observe(step.observation);
        }
    }
    Ok(total / episodes as f64)
}

fn exact_return(learner: &Learner, env: &dyn Environment, norm: Option<&RunningNorm>) -> Result<Option<f64>> {
    match env.mdp() {
        Some(mdp) => {
            let table = policy_table(&learner.policy, &learner.params, mdp, norm)?;
            mdp.exact_return(&table).map(Some)
        }
        None => Ok(None),
    }
}

struct IterationOutcome {
    report: UpdateReport,
    records: Vec<DiagnosticsRecord>,
}

/// Runs one seed to completion in memory.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunLog> {
    config.validate()?;
    let algo = &config.algo;
    let env = make_env(&config.env)?;
    let mut eval_env = make_env(&config.env)?;
    let mut learner = build_learner(config, env.as_ref(), seed)?;
    let mut collector = Collector::new(env, seed_stream(seed, ENV_STREAM), config.normalize_obs);
    let mut shuffle_rng = seed_stream(seed, SHUFFLE_STREAM);
    let mut eval_rng = seed_stream(seed, EVAL_STREAM);
    let mut scaler = RewardScaler::new(algo.gamma);
    let iterations = config.iterations();

    let mut log = RunLog {
        seed,
        rows: Vec::with_capacity(iterations),
        diagnostics: Vec::new(),
        dumps: Vec::new(),
        numerical_aborts: 0,
        policy_params: None,
        value_params: None,
        obs_norm: None,
    };
    for iteration in 0..iterations {
        let lr = learning_rate(algo.lr, algo.lr_decay, iteration, iterations);
        let step = (|| -> Result<IterationOutcome> {
            let transitions = collector.collect(&learner.policy, &learner.params, algo.batch)?;
            let scaled: Option<Vec<f64>> = config.normalize_reward.then(|| {
                transitions
                    .iter()
                    .map(|t| scaler.scale(t.reward, t.episode_end()))
                    .collect()
            });
            let batch = Batch::build(
                transitions,
                scaled.as_deref(),
                &learner.value_net,
                &learner.value_params,
                algo.gamma,
                algo.lambda,
                config.normalize_adv,
            )?;
            let data = UpdateData::from_batch(&batch);
            let report = learner.update(&data, algo, lr, &mut shuffle_rng)?;
            let records = records_from_dumps(iteration, &report.dumps)?;
            Ok(IterationOutcome { report, records })
        })();
        let finished = collector.take_finished_returns();
        let mut row = LogRow {
            iteration,
            env_steps: (iteration + 1) * algo.batch,
            lr,
            status: "ok".into(),
            train_return: mean_of(finished.iter().copied()),
            train_episodes: finished.len(),
            eval_return: None,
            exact_return: None,
            surrogate_before: None,
            surrogate_after: None,
            kl_mean: None,
            epochs_run: None,
            early_stopped: None,
            minibatches_skipped: None,
            line_search_steps: None,
            accepted: None,
            value_loss: None,
            empirical_variance: None,
            variance_bound: None,
            avg_ratio_deviation: None,
            mean_ratio: None,
            dropout_fraction: None,
            ratio_min: None,
            ratio_max: None,
        };
        match step {
            Ok(IterationOutcome { mut report, records }) => {
                row.surrogate_before = Some(report.surrogate_before);
                row.surrogate_after = Some(report.surrogate_after);
                row.kl_mean = Some(report.kl_mean);
                row.epochs_run = Some(report.epochs_run);
                row.early_stopped = Some(report.early_stopped);
                row.minibatches_skipped = Some(report.minibatches_skipped);
                row.line_search_steps = Some(report.line_search_steps);
                row.accepted = Some(report.accepted);
                row.value_loss = Some(report.value_loss);
                row.empirical_variance = mean_of(records.iter().map(|r| r.empirical_variance));
                row.variance_bound = mean_of(records.iter().map(|r| r.variance_bound));
                row.avg_ratio_deviation = mean_of(records.iter().map(|r| r.avg_ratio_deviation));
                row.mean_ratio = mean_of(records.iter().map(|r| r.mean_ratio));
                row.dropout_fraction = mean_of(records.iter().map(|r| r.dropout_fraction));
                row.ratio_min = records.iter().map(|r| r.ratio_min).reduce(f64::min);
                row.ratio_max = records.iter().map(|r| r.ratio_max).reduce(f64::max);
                log.diagnostics.extend(records);
                if config.dump_minibatches {
                    log.dumps.extend(report.dumps.drain(..).map(|d| (iteration, d)));
                }
            }
            Err(e) if e.is_numerical() => {
                log::warn!("seed {seed} iteration {iteration}: numerical abort: {e}");
                log.numerical_aborts += 1;
                row.status = "numerical_abort".into();
            }
            Err(e) => return Err(e),
        }
        let last = iteration + 1 == iterations;
        let due = config.eval_interval > 0 && (iteration + 1) % config.eval_interval == 0;
        if last || due {
            row.eval_return = Some(evaluate(
                &learner,
                eval_env.as_mut(),
                collector.obs_norm(),
                config.eval_episodes,
                &mut eval_rng,
            )?);
        }
        row.exact_return = exact_return(&learner, collector.env(), collector.obs_norm())?;
        log::info!(
            "seed {seed} iteration {iteration}: train {:?} exact {:?}",
            row.train_return,
            row.exact_return
        );
        log.rows.push(row);
    }
    log.obs_norm = collector.obs_norm().cloned();
    log.policy_params = Some(learner.params);
    log.value_params = Some(learner.value_params);
    Ok(log)
}

/// Runs every seed (in parallel) and, when `out` is given, writes the run directory.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunLog>> {
    config.validate()?;
    let logs: Vec<RunLog> = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed))
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), config.to_text())?;
        for log in &logs {
            write_run(&dir.join(format!("seed_{}", log.seed)), log, config.checkpoint)?;
        }
    }
    Ok(logs)
}

#[derive(Serialize, Deserialize)]
struct DumpLine {
    iteration: usize,
    #[serde(flatten)]
    dump: MinibatchDump,
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::parse(format!("csv: {other:?}")),
    }
}

fn json_error(e: serde_json::Error) -> Error {
    Error::parse(format!("json: {e}"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(json_error)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(json_error))
        .collect()
}

/// Final policy, value and normalizer parameters in one file, segments prefixed with
/// `policy.`, `value.` and `obs_norm.`.
pub fn checkpoint_params(log: &RunLog) -> Option<ParamVector> {
    let policy = log.policy_params.as_ref()?;
    let value = log.value_params.as_ref()?;
    let norm = log.obs_norm.as_ref().map(|n| n.to_params("obs_norm"));
    let mut layout = Vec::new();
    let mut values = Vec::new();
    for (prefix, pv) in [("policy.", Some(policy)), ("value.", Some(value)), ("", norm.as_ref())] {
        if let Some(pv) = pv {
            for s in pv.segments() {
                layout.push((format!("{prefix}{}", s.name), s.len));
            }
            values.extend_from_slice(pv.values());
        }
    }
    let mut out = ParamVector::zeros(&layout);
    out.values_mut().copy_from_slice(&values);
    Some(out)
}

fn write_run(dir: &Path, log: &RunLog, checkpoint: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("log.csv"), &log.rows)?;
    write_jsonl(&dir.join("diagnostics.jsonl"), log.diagnostics.iter())?;
    if !log.dumps.is_empty() {
        write_jsonl(
            &dir.join("dumps.jsonl"),
            log.dumps.iter().map(|(iteration, dump)| DumpLine {
                iteration: *iteration,
                dump: dump.clone(),
            }),
        )?;
    }
    if checkpoint {
        if let Some(ckpt) = checkpoint_params(log) {
            ckpt.save(dir.join("checkpoint.bin"))?;
        }
    }
    Ok(())
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    read_jsonl(path)
}

/// Recomputes diagnostics records from a `dumps.jsonl` file.
pub fn replay_dumps(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let lines: Vec<DumpLine> = read_jsonl(path)?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        let iteration = lines[start].iteration;
        let end = lines[start..]
            .iter()
            .position(|l| l.iteration != iteration)
            .map_or(lines.len(), |p| start + p);
        let dumps: Vec<MinibatchDump> = lines[start..end].iter().map(|l| l.dump.clone()).collect();
        out.extend(records_from_dumps(iteration, &dumps)?);
        start = end;
    }
    Ok(out)
}
