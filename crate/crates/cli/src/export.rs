//! Attention graphs from greedy episodes of a trained checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use g2a_core::ac::AcAgent;
use g2a_core::comm::CommTrainer;
use g2a_core::diffnet::checkpoint::Checkpoint;
use g2a_core::diffnet::Tape;
use g2a_core::env::{PredatorPrey, TrafficJunction};
use g2a_core::{AgentGraph, MarkovGame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, RunConfig};
use crate::run::{restore, Learner};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphLine {
    pub episode: usize,
    pub step: usize,
    pub positions: Vec<Option<[f64; 2]>>,
    /// Nearest prey per pursuer; empty on the junction.
    pub groups: Vec<usize>,
    pub graph: AgentGraph,
}

/// Mean combined weight on pairs that chase the same prey against pairs
/// that chase different ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub within_mean: f64,
    pub cross_mean: f64,
    pub within_pairs: usize,
    pub cross_pairs: usize,
}

pub fn nearest_prey(pos: &[[f64; 2]], n_adversaries: usize) -> Vec<usize> {
    let prey = &pos[n_adversaries..];
    (0..n_adversaries)
        .map(|i| {
            let d = |q: &[f64; 2]| (pos[i][0] - q[0]).hypot(pos[i][1] - q[1]);
            (0..prey.len()).min_by(|&a, &b| d(&prey[a]).total_cmp(&d(&prey[b]))).unwrap_or(0)
        })
        .collect()
}

pub fn summarize(lines: &[GraphLine]) -> GroupSummary {
    let (mut w, mut c) = (Vec::new(), Vec::new());
    for l in lines.iter().filter(|l| !l.groups.is_empty()) {
        let n = l.graph.n;
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let v = l.graph.weight(i, j);
                if l.groups[i] == l.groups[j] {
                    w.push(v);
                } else {
                    c.push(v);
                }
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    GroupSummary { within_mean: mean(&w), cross_mean: mean(&c), within_pairs: w.len(), cross_pairs: c.len() }
}

fn comm_graphs(tr: &CommTrainer, env: &TrafficJunction, episodes: usize, seed: u64) -> Result<Vec<GraphLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..episodes).map(|_| rng.gen()).collect();
    let mut envs = vec![env.clone(); episodes];
    let ro = tr.policy.rollout(&mut envs, &seeds, rng.gen(), &mut rng, false)?;
    let mut out = Vec::new();
    for step in 0..ro.vars.len() {
        for ep in 0..episodes {
            out.push(GraphLine { episode: ep, step, positions: Vec::new(), groups: Vec::new(), graph: ro.graph(step, ep) });
        }
    }
    // Replay each episode on its own to recover positions.
    for (ep, &s) in seeds.iter().enumerate() {
        let mut e = env.clone();
        e.reset(s);
        for step in 0..ro.vars.len() {
            let idx = step * episodes + ep;
            let rec = &ro.record.steps[step];
            let n = ro.record.n;
            out[idx].positions = e.positions();
            e.step(&rec.actions[ep * n..(ep + 1) * n])?;
        }
    }
    out.sort_by_key(|l| (l.episode, l.step));
    Ok(out)
}

fn ac_graphs(agent: &AcAgent, env: &mut PredatorPrey, episodes: usize, seed: u64) -> Result<Vec<GraphLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let na = env.config().n_adversaries;
    let mut out = Vec::new();
    for episode in 0..episodes {
        let mut obs = env.reset(rng.gen());
        for step in 0.. {
            let actions = agent.act(&obs, false, &mut rng)?;
            let mut tape = Tape::new();
            let q = agent.critic.forward(&mut tape, &agent.critic_store, &obs, &actions, agent.gate(), &mut rng, None)?;
            let Some(att) = q.attention else { bail!("this critic has no attention to export") };
            out.push(GraphLine {
                episode,
                step,
                positions: env.positions(),
                groups: nearest_prey(&env.state().pos, na),
                graph: att.graph(&tape, 0),
            });
            let s = env.step(&actions)?;
            obs = s.obs;
            if s.done {
                break;
            }
        }
    }
    Ok(out)
}

/// Writes `graphs.jsonl` (and `groups.json` on pursuit) into `out_dir`.
pub fn export_attention(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_dir: &Path,
    episodes: usize,
    seed: u64,
) -> Result<Option<GroupSummary>> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (_, learner) = restore(cfg, &ck)?;
    let lines = match (&learner, &cfg.env) {
        (Learner::Comm(tr), EnvConfig::TrafficJunction(tj)) => comm_graphs(tr, &TrafficJunction::new(tj.clone())?, episodes, seed)?,
        (Learner::Ac(agent), EnvConfig::PredatorPrey(pp)) => ac_graphs(agent, &mut PredatorPrey::new(pp.clone())?, episodes, seed)?,
        _ => bail!("checkpoint does not match the configured environment"),
    };
    fs::create_dir_all(out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join("graphs.jsonl"))?);
    for l in &lines {
        writeln!(w, "{}", serde_json::to_string(l)?)?;
    }
    w.flush()?;
    if matches!(cfg.env, EnvConfig::PredatorPrey(_)) {
        let s = summarize(&lines);
        fs::write(out_dir.join("groups.json"), serde_json::to_string_pretty(&s)?)?;
        return Ok(Some(s));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_prey_groups() {
        let pos = [[0.0, 0.0], [0.9, 0.9], [-0.5, 0.1], [1.0, 1.0], [-1.0, 0.0]];
        assert_eq!(nearest_prey(&pos, 3), vec![1, 0, 1]);
    }

    #[test]
    fn summary_splits_pairs() {
        let g = AgentGraph { n: 3, hard: vec![0.0; 9], soft: vec![0.0; 9], combined: vec![0.0, 0.6, 0.4, 1.0, 0.0, 0.0, 0.2, 0.8, 0.0] };
        let l = GraphLine { episode: 0, step: 0, positions: vec![], groups: vec![0, 0, 1], graph: g };
        let s = summarize(&[l]);
        assert_eq!((s.within_pairs, s.cross_pairs), (2, 4));
        assert!((s.within_mean - 0.8).abs() < 1e-12);
        assert!((s.cross_mean - 0.35).abs() < 1e-12);
    }
}
