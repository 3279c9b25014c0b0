use g2a_core::env::predator_prey::{DOWN, LEFT, N_ACTIONS, RIGHT, STAY, UP};
use g2a_core::env::traffic_junction::{episode_success, TJStepRecord, BRAKE, GAS};
use g2a_core::env::{Difficulty, PPConfig, PredatorPrey, TJConfig, TrafficJunction};
use g2a_core::MarkovGame;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Episode {
    seed: u64,
    records: Vec<TJStepRecord>,
}

/// Random-action episode with an independent kinematic check of every step
/// against the pre-step car table.
fn random_episode(env: &mut TrafficJunction, seed: u64, rng: &mut ChaCha8Rng) -> Episode {
    env.reset_with(seed);
    let n = env.config().n_max;
    let mut records = Vec::new();
    for _ in 0..env.config().max_steps {
        let before = env.state().cars.clone();
        let actions: Vec<usize> = (0..n).map(|_| if rng.gen_bool(0.5) { GAS } else { BRAKE }).collect();
        let rec = env.step_record(&actions).unwrap();
        for (i, car) in before.iter().enumerate() {
            let want = if !car.active {
                None
            } else if actions[i] == BRAKE {
                Some(car.cell)
            } else {
                env.routes()[car.route].cells.get(car.progress + 1).copied()
            };
            assert_eq!(rec.positions[i], want);
            assert_eq!(rec.taus[i], if car.active { car.tau } else { 0 });
        }
        for i in 0..n {
            let hit = rec.positions[i].is_some() && (0..n).any(|j| j != i && rec.positions[j] == rec.positions[i]);
            assert_eq!(rec.collided[i], hit);
        }
        records.push(rec);
    }
    Episode { seed, records }
}

#[test]
fn traffic_junction_logs_replay_and_decompose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut successes = 0;
    for k in 0..1000 {
        let difficulty = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard][k % 3];
        let mut env = TrafficJunction::new(TJConfig::preset(difficulty)).unwrap();
        let ep = random_episode(&mut env, rng.gen(), &mut rng);

        env.reset_with(ep.seed);
        for rec in &ep.records {
            let again = env.step_record(&rec.actions).unwrap();
            assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(rec).unwrap());
        }

        for rec in &ep.records {
            for i in 0..rec.rewards.len() {
                let base = -0.01 * f64::from(rec.taus[i]);
                let k = (rec.rewards[i] - base) / -10.0;
                assert!(k >= 0.0 && (k - k.round()).abs() < 1e-9, "{} {}", rec.rewards[i], rec.taus[i]);
                assert_eq!(k.round() as u32, u32::from(rec.collided[i]));
            }
        }

        let log: Vec<usize> = ep.records.iter().map(|r| r.collided.iter().filter(|&&c| c).count()).collect();
        let recount = ep.records.iter().all(|r| r.collided.iter().all(|&c| !c));
        assert_eq!(episode_success(&log), recount);
        successes += usize::from(recount);
    }
    assert!(successes > 0 && successes < 1000);
}

#[test]
fn markov_game_step_agrees_with_record() {
    let mut a = TrafficJunction::new(TJConfig::preset(Difficulty::Medium)).unwrap();
    let mut b = a.clone();
    a.reset(5);
    b.reset_with(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..a.max_steps() {
        let actions: Vec<usize> = (0..a.n_agents()).map(|_| rng.gen_range(0..2)).collect();
        let step = a.step(&actions).unwrap();
        let rec = b.step_record(&actions).unwrap();
        assert_eq!(step.rewards, rec.rewards);
        assert_eq!(step.obs, b.observations());
        assert_eq!(step.info.collisions, rec.collided.iter().filter(|&&c| c).count());
    }
}

fn pp() -> PredatorPrey {
    let mut env = PredatorPrey::new(PPConfig::default()).unwrap();
    env.reset_with(0);
    env
}

#[test]
fn capture_at_radius_plus_minus_epsilon() {
    let mut env = pp();
    let r = env.config().capture_radius;
    let eps = 1e-9;
    let dirs = [(1.0, 0.0), (0.0, -1.0), (0.6, 0.8), (-0.28, 0.96)];
    for &(dx, dy) in &dirs {
        for (d, expect) in [(r - eps, true), (r + eps, false)] {
            let s = env.state_mut();
            for p in s.pos.iter_mut() {
                *p = [0.9, 0.9];
            }
            s.pos[2] = [0.1, -0.2];
            s.pos[5] = [0.1 + d * dx, -0.2 + d * dy];
            s.pos[6] = [-0.9, -0.9];
            let caps = env.captures();
            assert_eq!(caps.contains(&(2, 0)), expect, "d={d} dir=({dx},{dy})");
            assert_eq!(caps.len(), usize::from(expect));
        }
    }
}

/// Independent copy of the point-mass update for the flee oracle.
fn next_position(cfg: &PPConfig, p: [f64; 2], v: [f64; 2], action: usize) -> [f64; 2] {
    let dir = match action {
        STAY => [0.0, 0.0],
        UP => [0.0, 1.0],
        DOWN => [0.0, -1.0],
        LEFT => [-1.0, 0.0],
        RIGHT => [1.0, 0.0],
        _ => unreachable!(),
    };
    let s = cfg.prey_speed;
    let mut nv = [v[0] * (1.0 - cfg.damping) + s * dir[0], v[1] * (1.0 - cfg.damping) + s * dir[1]];
    let norm = nv[0].hypot(nv[1]);
    if norm > s {
        nv = [nv[0] / norm * s, nv[1] / norm * s];
    }
    let w = cfg.half_width;
    [(p[0] + nv[0] * cfg.dt).clamp(-w, w), (p[1] + nv[1] * cfg.dt).clamp(-w, w)]
}

#[test]
fn prey_flee_matches_brute_force() {
    let mut env = pp();
    let cfg = env.config().clone();
    let na = cfg.n_adversaries;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let s = env.state_mut();
        for k in 0..s.pos.len() {
            s.pos[k] = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            s.vel[k] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        }
        for g in 0..cfg.n_prey {
            let e = na + g;
            let st = env.state();
            let mut best = 0;
            let mut best_d = f64::NEG_INFINITY;
            for a in 0..N_ACTIONS {
                let np = next_position(&cfg, st.pos[e], st.vel[e], a);
                let d = st.pos[..na].iter().map(|q| (np[0] - q[0]).hypot(np[1] - q[1])).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best = a;
                    best_d = d;
                }
            }
            assert_eq!(env.flee_action(g), best);
        }
    }
}

#[test]
fn predator_prey_replays_from_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let seed = rng.gen();
        let mut a = PredatorPrey::new(PPConfig::default()).unwrap();
        let mut b = PredatorPrey::new(PPConfig::default()).unwrap();
        a.reset_with(seed);
        b.reset_with(seed);
        for _ in 0..a.config().max_steps {
            let actions: Vec<usize> = (0..5).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
            assert_eq!(a.step_record(&actions).unwrap(), b.step_record(&actions).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pursuit_stays_in_bounds_with_quantized_rewards(seed in any::<u64>(), acts in prop::collection::vec(0usize..N_ACTIONS, 250)) {
        let mut env = PredatorPrey::new(PPConfig::default()).unwrap();
        env.reset_with(seed);
        for t in 0..50 {
            let rec = env.step_record(&acts[t * 5..t * 5 + 5]).unwrap();
            for p in &rec.positions {
                prop_assert!(p[0].abs() <= 1.0 && p[1].abs() <= 1.0);
            }
            for r in &rec.rewards {
                prop_assert_eq!(*r, 10.0 * rec.captures.len() as f64);
            }
        }
    }

    #[test]
    fn inactive_slots_are_inert(seed in any::<u64>(), acts in prop::collection::vec(0usize..2, 100)) {
        let mut env = TrafficJunction::new(TJConfig::preset(Difficulty::Easy)).unwrap();
        env.reset_with(seed);
        for t in 0..20 {
            let rec = env.step_record(&acts[t * 5..t * 5 + 5]).unwrap();
            for i in 0..5 {
                if rec.taus[i] == 0 {
                    prop_assert_eq!(rec.rewards[i], 0.0);
                    prop_assert!(rec.positions[i].is_none());
                }
            }
        }
    }
}
