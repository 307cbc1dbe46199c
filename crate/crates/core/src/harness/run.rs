//! Multi-instance training runs with periodic noise-free evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::algorithms::{Agent, AlgoError, Checkpoint, Phase, Trainer, TrainerOptions, Variant};
use crate::envs::Env;

use super::stats::{EvalRecord, RunSummary};
use super::{ExperimentConfig, HarnessError};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVALS_FILE: &str = "evals.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const INSTANCE_DIR: &str = "instances";

/// One CSV row. Training rows leave `eval_mean` empty, evaluation rows
/// leave everything but `instance`, `step`, `wall_ms` and `eval_mean`
/// empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub instance: usize,
    pub step: u64,
    pub wall_ms: Option<u64>,
    pub episode: Option<u64>,
    pub ep_return: Option<f64>,
    pub eval_mean: Option<f64>,
    pub critic_loss: Option<f64>,
    pub system_loss: Option<f64>,
    pub reward_loss: Option<f64>,
    pub w: Option<f64>,
    pub gate: Option<bool>,
}

/// What a finished run writes to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub env: String,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub stats: RunSummary,
    /// Per instance, the first step at which the forecast gate was open.
    pub gate_open_steps: Vec<Option<u64>>,
    /// Per instance, the mean return of the last evaluation.
    pub final_eval: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: ExperimentSummary,
    pub records: Vec<EvalRecord>,
}

/// Evaluation episode seeds for an instance: the same list at every
/// evaluation, drawn from a stream the training loop never touches.
pub fn eval_seeds(instance_seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    rng.set_stream(6);
    (0..episodes).map(|_| rng.next_u64()).collect()
}

/// Undiscounted return of each episode started from `seeds`.
pub fn evaluate_on_seeds<P>(mut policy: P, env: &mut dyn Env, seeds: &[u64]) -> Result<Vec<f64>, HarnessError>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>, AlgoError>,
{
    let mut returns = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut state = env.reset(seed)?;
        let mut total = 0.0;
        loop {
            let action = policy(&state)?;
            let step = env.step(&action)?;
            total += step.reward;
            if step.done {
                break;
            }
            state = step.next_state;
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Mean undiscounted return of `episodes` noise-free episodes.
pub fn evaluate_policy<P>(policy: P, env: &mut dyn Env, episodes: usize, seed: u64) -> Result<EvalRecord, HarnessError>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>, AlgoError>,
{
    if episodes == 0 {
        return Err(HarnessError::Config("evaluation needs at least one episode".into()));
    }
    let returns = evaluate_on_seeds(policy, env, &eval_seeds(seed, episodes))?;
    Ok(EvalRecord::new(0, 0, returns))
}

struct InstanceResult {
    evals: Vec<EvalRecord>,
    gate_open_step: Option<u64>,
}

/// Trains every instance, writes the run directory and returns the
/// summary. On failure the per-instance logs written so far stay on disk.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    for sub in [dir.to_path_buf(), dir.join(INSTANCE_DIR), dir.join(CHECKPOINT_DIR)] {
        fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
    }
    write_file(&dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;

    let seeds = config.instance_seeds();
    let jobs: Vec<(usize, u64)> = seeds.iter().copied().enumerate().collect();
    let mut results: Vec<Option<Result<InstanceResult, HarnessError>>> = (0..jobs.len()).map(|_| None).collect();
    let workers = config.workers.min(jobs.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let mine: Vec<(usize, u64)> = jobs.iter().copied().skip(w).step_by(workers).collect();
                scope.spawn(move || {
                    mine.into_iter()
                        .map(|(l, seed)| (l, run_instance(config, dir, l, seed)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (l, r) in h.join().expect("instance thread panicked") {
                results[l] = Some(r);
            }
        }
    });
    let mut records = Vec::new();
    let mut gate_open_steps = Vec::new();
    for r in results {
        let r = r.expect("every instance ran")?;
        gate_open_steps.push(r.gate_open_step);
        records.extend(r.evals);
    }

    merge_instance_csvs(dir, seeds.len())?;
    write_file(
        &dir.join(EVALS_FILE),
        serde_json::to_string_pretty(&records)?.as_bytes(),
    )?;
    let stats = RunSummary::from_records(&records, &config.references)?;
    let last_step = config.total_steps;
    let summary = ExperimentSummary {
        name: config.run_name(),
        env: config.env.name().to_string(),
        variant: config.agent.variant,
        seeds,
        total_steps: config.total_steps,
        eval_interval: config.eval_interval,
        stats,
        gate_open_steps,
        final_eval: records.iter().filter(|r| r.step == last_step).map(|r| r.mean).collect(),
    };
    write_file(
        &dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        summary,
        records,
    })
}

fn run_instance(config: &ExperimentConfig, dir: &Path, instance: usize, seed: u64) -> Result<InstanceResult, HarnessError> {
    let path = instance_csv(dir, instance);
    let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut csv = csv::Writer::from_writer(BufWriter::new(file));
    let started = Instant::now();
    let wall = |t: &Instant| config.record_wall_clock.then(|| t.elapsed().as_millis() as u64);

    let env = config.env.build()?;
    let mut eval_env = config.env.build()?;
    let agent = Agent::new(config.agent.clone(), env.spec(), seed)?;
    let options = TrainerOptions {
        hardcore_shaping: config.hardcore_shaping,
        ratio_admission: config.ratio_admission,
    };
    let mut trainer = Trainer::new(agent, env, options, seed)?;
    let seeds = eval_seeds(seed, config.eval_episodes);
    let forward = config.agent.variant.is_forward_looking();

    let mut evals = Vec::new();
    let mut gate_open_step = None;
    let mut evaluate = |trainer: &mut Trainer, step: u64, csv: &mut csv::Writer<BufWriter<File>>| -> Result<(), HarnessError> {
        let agent = trainer.agent_mut();
        let returns = evaluate_on_seeds(|s| agent.select_action(s, Phase::Eval), eval_env.as_mut(), &seeds)?;
        let record = EvalRecord::new(instance, step, returns);
        info!(instance, step, mean = record.mean, "evaluation");
        csv.serialize(MetricRow {
            instance,
            step,
            wall_ms: wall(&started),
            eval_mean: Some(record.mean),
            ..Default::default()
        })?;
        evals.push(record);
        Ok(())
    };

    evaluate(&mut trainer, 0, &mut csv)?;
    for step in 1..=config.total_steps {
        let m = trainer.train_iteration()?;
        if gate_open_step.is_none() && m.gate_open == Some(true) {
            gate_open_step = Some(step);
            info!(instance, step, system_loss = trainer.agent().last_system_loss(), "forecast gate opened");
        }
        if step % config.log_interval == 0 || m.episode_return.is_some() {
            csv.serialize(MetricRow {
                instance,
                step,
                wall_ms: wall(&started),
                episode: Some(m.episode),
                ep_return: m.raw_episode_return,
                eval_mean: None,
                critic_loss: m.update.critic_loss,
                system_loss: m.update.system_loss,
                reward_loss: m.update.reward_loss,
                w: forward.then_some(m.weight),
                gate: m.gate_open,
            })?;
        }
        if step % config.eval_interval == 0 {
            evaluate(&mut trainer, step, &mut csv)?;
        }
    }
    csv.flush().map_err(|e| HarnessError::io(&path, e))?;

    let (agent, buffer) = trainer.into_parts();
    let ck_path = dir.join(CHECKPOINT_DIR).join(format!("instance-{instance}.bin"));
    Checkpoint::new(agent, config.checkpoint_buffer.then_some(buffer)).save(&ck_path)?;
    Ok(InstanceResult {
        evals,
        gate_open_step,
    })
}

fn instance_csv(dir: &Path, instance: usize) -> PathBuf {
    dir.join(INSTANCE_DIR).join(format!("instance-{instance}.csv"))
}

/// Concatenates the per-instance logs in instance order under one header.
fn merge_instance_csvs(dir: &Path, instances: usize) -> Result<(), HarnessError> {
    let out_path = dir.join(METRICS_FILE);
    let out = File::create(&out_path).map_err(|e| HarnessError::io(&out_path, e))?;
    let mut out = BufWriter::new(out);
    for l in 0..instances {
        let path = instance_csv(dir, l);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let body = if l == 0 {
            text.as_str()
        } else {
            text.split_once('\n').map_or("", |(_, rest)| rest)
        };
        out.write_all(body.as_bytes()).map_err(|e| HarnessError::io(&out_path, e))?;
    }
    out.flush().map_err(|e| HarnessError::io(&out_path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Reads the evaluation records of a finished run directory.
pub fn load_records(dir: &Path) -> Result<Vec<EvalRecord>, HarnessError> {
    let path = dir.join(EVALS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_summary(dir: &Path) -> Result<ExperimentSummary, HarnessError> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::AgentConfig;
    use crate::autodiff::Matrix;
    use crate::envs::{lqr_oracle, EnvConfig, LqrEnv, LqrEnvParams, ORACLE_EPISODES};

    fn tiny(variant: Variant) -> ExperimentConfig {
        ExperimentConfig {
            env: EnvConfig::Lqr(LqrEnvParams::default()),
            agent: AgentConfig {
                variant,
                hidden: vec![8],
                system_hidden: vec![8],
                reward_hidden: vec![8],
                batch_size: 8,
                exploration_steps: 20,
                base_reward: 1.0,
                ..Default::default()
            },
            total_steps: 120,
            eval_interval: 60,
            eval_episodes: 2,
            instances: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_gives_only_the_initial_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            total_steps: 0,
            ..tiny(Variant::Td3)
        };
        let out = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.records.iter().all(|r| r.step == 0));
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn writes_schema_and_one_evaluation_per_interval() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Variant::Td3Fork);
        let out = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(out.records.len() as u64, 2 * cfg.evaluations_per_instance());
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "instance,step,wall_ms,episode,ep_return,eval_mean,critic_loss,system_loss,reward_loss,w,gate"
        );
        // two instances × (120 training rows + 3 evaluation rows)
        assert_eq!(lines.count(), 2 * (120 + 3));
        for f in [CONFIG_FILE, EVALS_FILE, SUMMARY_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(dir.path().join(CHECKPOINT_DIR).join("instance-1.bin").exists());
        let summary = load_summary(dir.path()).unwrap();
        assert_eq!(summary, out.summary);
        assert_eq!(load_records(dir.path()).unwrap(), out.records);
        assert_eq!(summary.final_eval.len(), 2);
    }

    #[test]
    fn parallel_workers_write_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny(Variant::Td3);
        run_experiment(&cfg, a.path()).unwrap();
        run_experiment(&ExperimentConfig { workers: 2, ..cfg.clone() }, b.path()).unwrap();
        for f in [METRICS_FILE, EVALS_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn one_episode_evaluation_is_that_episode() {
        let mut env = LqrEnv::new(LqrEnvParams::default()).unwrap();
        let zero = |_: &[f64]| Ok(vec![0.0, 0.0]);
        let rec = evaluate_policy(zero, &mut env, 1, 3).unwrap();
        let direct = evaluate_on_seeds(zero, &mut env, &eval_seeds(3, 1)).unwrap();
        assert_eq!(rec.returns, direct);
        assert_eq!(rec.mean, direct[0]);
        assert!(evaluate_policy(zero, &mut env, 0, 3).is_err());
    }

    #[test]
    fn zero_policy_from_origin_returns_zero() {
        let params = LqrEnvParams {
            init_low: vec![0.0, 0.0],
            init_high: vec![0.0, 0.0],
            ..Default::default()
        };
        let mut env = LqrEnv::new(params).unwrap();
        let rec = evaluate_policy(|_| Ok(vec![0.0, 0.0]), &mut env, 3, 0).unwrap();
        assert_eq!(rec.mean, 0.0);
    }

    #[test]
    fn oracle_gain_as_a_policy_reproduces_the_oracle_return() {
        let params = LqrEnvParams::default();
        let oracle = lqr_oracle(&params, 0.99, params.horizon).unwrap();
        let gain: Matrix = oracle.gain.clone();
        let bound = params.action_bound;
        let policy = |s: &[f64]| {
            Ok(gain
                .mul_vec(s)
                .unwrap()
                .into_iter()
                .map(|u| (-u).clamp(-bound, bound))
                .collect())
        };
        let mut env = LqrEnv::new(params.clone()).unwrap();
        let seeds: Vec<u64> = (0..ORACLE_EPISODES).collect();
        let returns = evaluate_on_seeds(policy, &mut env, &seeds).unwrap();
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        assert!((mean - oracle.expected_return).abs() < 1e-9, "{mean} vs {}", oracle.expected_return);
        // fresh seeds: within a 4σ band of the oracle mean
        let fresh = evaluate_policy(policy, &mut env, 100, 9).unwrap();
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (returns.len() - 1) as f64;
        let se = (var / 100.0).sqrt();
        assert!((fresh.mean - oracle.expected_return).abs() < 4.0 * se * std::f64::consts::SQRT_2);
    }

    #[test]
    fn eval_seeds_are_fixed_per_instance() {
        assert_eq!(eval_seeds(4, 5), eval_seeds(4, 5));
        assert_ne!(eval_seeds(4, 5), eval_seeds(5, 5));
        assert_eq!(eval_seeds(4, 3), eval_seeds(4, 5)[..3]);
    }
}
