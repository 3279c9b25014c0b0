//! Training and evaluation runs: per-seed loops, metrics lines, checkpoints
//! and the cross-seed report.
//!
//! Layout under `<root>/<name>/`: `config.json` (resolved config),
//! `metrics.jsonl` (one line per evaluation, deterministic),
//! `timing.jsonl` (wall-clock per seed), `checkpoints/seed-<s>.json` and
//! `final_report.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use g2a_core::ac::{self, AcAgent};
use g2a_core::comm::{self, CommPolicy, CommTrainer};
use g2a_core::diffnet::checkpoint::{Checkpoint, RngState};
use g2a_core::env::{PredatorPrey, TJConfig, TrafficJunction};
use g2a_core::MarkovGame;
use serde::{Deserialize, Serialize};

use crate::config::{curriculum_step, EnvConfig, RunConfig};

pub const RUN_ROOT_VAR: &str = "G2A_RUN_ROOT";

/// `$G2A_RUN_ROOT`, or `runs` in the working directory.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(&cfg.name)
}

pub fn checkpoint_path(root: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    run_dir(root, cfg).join("checkpoints").join(format!("seed-{seed}.json"))
}

/// splitmix64 finalizer; turns a run seed into independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    pub success_rate: Option<f64>,
    pub graph_density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mean_reward: f64,
    pub success_rate: Option<f64>,
    pub loss: f64,
    pub graph_density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub seed: u64,
    pub updates: u64,
    pub episodes: u64,
    pub env_steps: u64,
    pub train: TrainSummary,
    pub eval: EvalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub updates: u64,
    pub episodes: u64,
    pub env_steps: u64,
    /// Mean episode reward over every training episode.
    pub train_mean_reward: f64,
    pub final_eval: EvalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub eval_mean_reward: Stat,
    pub eval_success_rate: Option<Stat>,
    pub train_mean_reward: Stat,
}

impl FinalReport {
    pub fn new(cfg: &RunConfig, seeds: Vec<SeedResult>) -> Self {
        let col = |f: &dyn Fn(&SeedResult) -> f64| seeds.iter().map(f).collect::<Vec<_>>();
        let succ: Option<Vec<f64>> = seeds.iter().map(|s| s.final_eval.success_rate).collect();
        Self {
            name: cfg.name.clone(),
            config_hash: cfg.hash(),
            eval_mean_reward: Stat::of(&col(&|s| s.final_eval.mean_reward)),
            eval_success_rate: succ.map(|v| Stat::of(&v)),
            train_mean_reward: Stat::of(&col(&|s| s.train_mean_reward)),
            seeds,
        }
    }
}

/// A trained model of either family.
pub enum Learner {
    Comm(Box<CommTrainer>),
    Ac(Box<AcAgent>),
}

fn tj_env(cfg: &RunConfig) -> Option<&TJConfig> {
    match &cfg.env {
        EnvConfig::TrafficJunction(tj) => Some(tj),
        EnvConfig::PredatorPrey(_) => None,
    }
}

/// Fresh, untrained learner for `seed`.
pub fn build_learner(cfg: &RunConfig, seed: u64) -> Result<Learner> {
    Ok(match &cfg.env {
        EnvConfig::TrafficJunction(tj) => {
            let env = TrafficJunction::new(tj.clone())?;
            let policy = CommPolicy::new(cfg.comm.clone(), env.obs_dim(), env.n_actions(), derive_seed(seed, 1))?;
            Learner::Comm(Box::new(CommTrainer::new(policy, cfg.reinforce.clone(), derive_seed(seed, 2))))
        }
        EnvConfig::PredatorPrey(pp) => {
            let env = PredatorPrey::new(pp.clone())?;
            let agent = AcAgent::new(cfg.ac.clone(), env.n_agents(), env.obs_dim(), env.n_actions(), derive_seed(seed, 1))?;
            Learner::Ac(Box::new(agent))
        }
    })
}

fn eval_comm(cfg: &RunConfig, tr: &CommTrainer) -> Result<EvalSummary> {
    let tj = tj_env(cfg).context("traffic-junction learner on a predator-prey config")?;
    let env = TrafficJunction::new(tj.clone())?;
    let episodes = cfg.eval.episodes;
    let s = comm::evaluate(&tr.policy, &env, episodes, cfg.eval.seed)?;
    Ok(EvalSummary { episodes, mean_reward: s.mean_reward, success_rate: Some(s.success_rate), graph_density: s.graph_density })
}

fn eval_ac(cfg: &RunConfig, agent: &AcAgent) -> Result<EvalSummary> {
    let EnvConfig::PredatorPrey(pp) = &cfg.env else { bail!("predator-prey learner on a traffic-junction config") };
    let mut env = PredatorPrey::new(pp.clone())?;
    let episodes = cfg.eval.episodes;
    let r = ac::evaluate(agent, &mut env, episodes, cfg.eval.seed)?;
    Ok(EvalSummary { episodes, mean_reward: r, success_rate: None, graph_density: None })
}

/// Greedy evaluation on the configured environment (no curriculum) with
/// the configured evaluation seed.
pub fn evaluate(cfg: &RunConfig, learner: &Learner) -> Result<EvalSummary> {
    match learner {
        Learner::Comm(tr) => eval_comm(cfg, tr),
        Learner::Ac(agent) => eval_ac(cfg, agent),
    }
}

fn base_checkpoint(cfg: &RunConfig, seed: u64, progress: &Progress) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.hash());
    ck.meta.insert("seed".into(), seed.into());
    ck.meta.insert("updates".into(), progress.updates.into());
    ck.meta.insert("episodes".into(), progress.episodes.into());
    ck.meta.insert("env_steps".into(), progress.env_steps.into());
    ck
}

fn comm_checkpoint(cfg: &RunConfig, tr: &CommTrainer, seed: u64, progress: &Progress) -> Checkpoint {
    let mut ck = base_checkpoint(cfg, seed, progress);
    ck.add_store("policy", &tr.policy.store);
    ck.rng = Some(RngState::capture(&tr.rng));
    ck
}

fn ac_checkpoint(cfg: &RunConfig, agent: &AcAgent, seed: u64, progress: &Progress) -> Checkpoint {
    let mut ck = base_checkpoint(cfg, seed, progress);
    ck.add_store("actor", &agent.actor_store);
    ck.add_store("critic", &agent.critic_store);
    ck.add_store("target", &agent.target_store);
    ck.rng = Some(RngState::capture(&agent.rng));
    ck
}

pub fn checkpoint(cfg: &RunConfig, learner: &Learner, seed: u64, progress: &Progress) -> Checkpoint {
    match learner {
        Learner::Comm(tr) => comm_checkpoint(cfg, tr, seed, progress),
        Learner::Ac(agent) => ac_checkpoint(cfg, agent, seed, progress),
    }
}

/// Rebuilds the learner for the checkpoint's seed and loads its parameters.
pub fn restore(cfg: &RunConfig, ck: &Checkpoint) -> Result<(u64, Learner)> {
    ck.expect_config(&cfg.hash())?;
    let seed = ck.meta.get("seed").and_then(|v| v.as_u64()).context("checkpoint has no seed")?;
    let mut learner = build_learner(cfg, seed)?;
    match &mut learner {
        Learner::Comm(tr) => ck.load_store("policy", &mut tr.policy.store)?,
        Learner::Ac(agent) => {
            ck.load_store("actor", &mut agent.actor_store)?;
            ck.load_store("critic", &mut agent.critic_store)?;
            ck.load_store("target", &mut agent.target_store)?;
        }
    }
    Ok((seed, learner))
}

#[derive(Clone, Debug, Default)]
pub struct Progress {
    pub updates: u64,
    pub episodes: u64,
    pub env_steps: u64,
}

#[derive(Default)]
struct Window {
    rewards: Vec<f64>,
    successes: Vec<f64>,
    losses: Vec<f64>,
    densities: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Window {
    fn take(&mut self, with_success: bool) -> TrainSummary {
        let s = TrainSummary {
            mean_reward: mean(&self.rewards),
            success_rate: with_success.then(|| mean(&self.successes)),
            loss: mean(&self.losses),
            graph_density: (!self.densities.is_empty()).then(|| mean(&self.densities)),
        };
        *self = Window::default();
        s
    }
}

fn write_line(
    metrics: &mut dyn Write,
    seed: u64,
    p: &Progress,
    train: TrainSummary,
    eval: EvalSummary,
) -> Result<()> {
    let line = MetricsLine { seed, updates: p.updates, episodes: p.episodes, env_steps: p.env_steps, train, eval };
    writeln!(metrics, "{}", serde_json::to_string(&line)?)?;
    Ok(())
}

/// Trains one seed, appending a metrics line per evaluation to `metrics`.
/// The last line always describes the final parameters. With `ckpt` set,
/// a checkpoint is written at every evaluation and at the end.
pub fn train_seed(
    cfg: &RunConfig,
    seed: u64,
    metrics: &mut dyn Write,
    ckpt: Option<&Path>,
) -> Result<(Learner, SeedResult, Progress)> {
    let mut learner = build_learner(cfg, seed)?;
    let mut p = Progress::default();
    let mut window = Window::default();
    let mut all_rewards = Vec::new();
    let mut next_eval = cfg.eval.interval;
    let mut last: Option<(u64, EvalSummary)> = None;
    let within = |p: &Progress, episodes: u64, steps: u64| {
        cfg.budget.episodes.is_none_or(|b| p.episodes + episodes <= b)
            && cfg.budget.env_steps.is_none_or(|b| p.env_steps + steps <= b)
    };
    let with_success = tj_env(cfg).is_some();

    match (&mut learner, &cfg.env) {
        (Learner::Comm(tr), EnvConfig::TrafficJunction(tj)) => {
            let mut stage = None;
            let mut env = TrafficJunction::new(tj.clone())?;
            loop {
                let want = curriculum_step(&cfg.curriculum, tr.updates).map(|s| (s.n_max, s.p_arrive));
                if want != stage {
                    let (n_max, p_arrive) = want.unwrap_or((tj.n_max, tj.p_arrive));
                    env = TrafficJunction::new(TJConfig { n_max, p_arrive, ..tj.clone() })?;
                    stage = want;
                }
                let b = tr.config.batch_episodes.max(1) as u64;
                if !within(&p, b, b * tj.max_steps as u64) {
                    break;
                }
                let s = tr.update(&env)?;
                p.updates += 1;
                p.episodes += s.episodes as u64;
                p.env_steps += s.env_steps as u64;
                window.rewards.push(s.mean_reward);
                window.successes.push(s.success_rate);
                window.losses.push(s.loss.loss);
                window.densities.extend(s.graph_density);
                all_rewards.push(s.mean_reward);
                if p.episodes >= next_eval {
                    let eval = eval_comm(cfg, tr)?;
                    write_line(metrics, seed, &p, window.take(true), eval.clone())?;
                    if let Some(path) = ckpt {
                        comm_checkpoint(cfg, tr, seed, &p).save(path)?;
                    }
                    last = Some((p.episodes, eval));
                    while next_eval <= p.episodes {
                        next_eval += cfg.eval.interval;
                    }
                }
            }
        }
        (Learner::Ac(agent), EnvConfig::PredatorPrey(pp)) => {
            let mut env = PredatorPrey::new(pp.clone())?;
            while within(&p, 1, pp.max_steps as u64) {
                let updates_before = agent.updates;
                let (r, stats) = agent.run_episode(&mut env)?;
                p.updates += agent.updates - updates_before;
                p.episodes += 1;
                p.env_steps += pp.max_steps as u64;
                window.rewards.push(r);
                all_rewards.push(r);
                for s in stats {
                    window.losses.push(s.critic_loss);
                    window.densities.extend(s.graph_density);
                }
                if p.episodes >= next_eval {
                    let eval = eval_ac(cfg, agent)?;
                    write_line(metrics, seed, &p, window.take(false), eval.clone())?;
                    if let Some(path) = ckpt {
                        ac_checkpoint(cfg, agent, seed, &p).save(path)?;
                    }
                    last = Some((p.episodes, eval));
                    next_eval += cfg.eval.interval;
                }
            }
        }
        _ => bail!("learner does not match the configured environment"),
    }
    let final_eval = match last {
        Some((at, e)) if at == p.episodes => e,
        _ => {
            let eval = evaluate(cfg, &learner)?;
            write_line(metrics, seed, &p, window.take(with_success), eval.clone())?;
            if let Some(path) = ckpt {
                checkpoint(cfg, &learner, seed, &p).save(path)?;
            }
            eval
        }
    };
    let result = SeedResult {
        seed,
        updates: p.updates,
        episodes: p.episodes,
        env_steps: p.env_steps,
        train_mean_reward: mean(&all_rewards),
        final_eval,
    };
    Ok((learner, result, p))
}

/// Trains every seed of `cfg` under `root` and writes the report.
pub fn train(cfg: &RunConfig, root: &Path) -> Result<FinalReport> {
    let dir = run_dir(root, cfg);
    fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut timing = BufWriter::new(File::create(dir.join("timing.jsonl"))?);
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let start = Instant::now();
        let (_, result, _) = train_seed(cfg, seed, &mut metrics, Some(&checkpoint_path(root, cfg, seed)))?;
        metrics.flush()?;
        let wall = start.elapsed().as_secs_f64();
        writeln!(timing, "{}", serde_json::json!({ "seed": seed, "episodes": result.episodes, "wall_seconds": wall }))?;
        timing.flush()?;
        results.push(result);
    }
    let report = FinalReport::new(cfg, results);
    let tmp = dir.join("final_report.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&report)?)?;
    fs::rename(&tmp, dir.join("final_report.json"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub checkpoint: String,
    pub seed: u64,
    pub eval: EvalSummary,
}

/// Evaluates one checkpoint and appends the result to
/// `<root>/<name>/eval/metrics.jsonl`.
pub fn eval_checkpoint(cfg: &RunConfig, path: &Path, root: &Path) -> Result<EvalLine> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (seed, learner) = restore(cfg, &ck)?;
    let eval = evaluate(cfg, &learner)?;
    let line = EvalLine {
        checkpoint: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        seed,
        eval,
    };
    let dir = run_dir(root, cfg).join("eval");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.jsonl"), format!("{}\n", serde_json::to_string(&line)?))?;
    Ok(line)
}
