//! Fixtures shared by the benchmarks.

use g2a_core::ac::{AcAgent, AcConfig, Transition};
use g2a_core::diffnet::{Array, ParamStore};
use g2a_core::env::{PPConfig, PredatorPrey};
use g2a_core::{Aggregator, AttentionConfig, GameAbstraction, MarkovGame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Attention module over `dim`-wide features with its parameters.
pub fn attention(kind: Aggregator, dim: usize) -> (ParamStore, GameAbstraction) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig { hard_hidden: dim, key_dim: dim / 2 };
    let ga = GameAbstraction::new(&mut store, "att", dim, &cfg, kind, &mut rng).expect("valid config");
    (store, ga)
}

/// Pursuit agent whose buffer already holds `fill` random-play transitions.
pub fn warm_ac_agent(kind: Aggregator, width: usize, batch: usize, fill: usize) -> AcAgent {
    let mut env = PredatorPrey::new(PPConfig::default()).expect("default config");
    let cfg = AcConfig {
        actor_hidden: width,
        critic_hidden: width,
        attention: AttentionConfig { hard_hidden: width, key_dim: width / 2 },
        aggregator: kind,
        batch_size: batch,
        ..AcConfig::default()
    };
    let mut agent = AcAgent::new(cfg, env.n_agents(), env.obs_dim(), env.n_actions(), 0).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut obs = env.reset(0);
    for _ in 0..fill {
        let actions: Vec<usize> = (0..env.n_agents()).map(|_| rng.gen_range(0..env.n_actions())).collect();
        let step = env.step(&actions).expect("valid actions");
        agent.buffer.push(Transition { obs: obs.clone(), actions, rewards: step.rewards, next_obs: step.obs.clone(), done: false });
        obs = if step.done { env.reset(rng.gen()) } else { step.obs };
    }
    agent
}
