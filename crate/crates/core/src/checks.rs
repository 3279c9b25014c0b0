//! Finite-difference reports for every tape primitive and for the full
//! learner losses on small toy batches. Shared by the command line and the
//! acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ac::{advantage_weights, AcAgent, AcConfig, Batch, Transition};
use crate::comm::{CommConfig, CommPolicy, ReinforceConfig};
use crate::diffnet::{grad_check, Array, DiffError, GateMode, GradCheckReport, Init, ParamStore, Tape, Var};
use crate::env::{Difficulty, TJConfig, TrafficJunction};
use crate::g2anet::{Aggregator, AttentionConfig};
use crate::{Error, MarkovGame};

type Op = fn(&mut Tape, &[Var]) -> Var;
type OpSpec = (&'static str, Vec<(usize, usize)>, Op);

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn primitive(name: &str, shapes: &[(usize, usize)], op: Op) -> Result<GradCheckReport, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(k, &(r, c))| store.insert(&format!("{name}.{k}"), random(&mut rng, r, c), Init::Given))
        .collect::<Result<Vec<_>, _>>()?;
    let mut probe = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect();
    let out = op(&mut probe, &vars);
    let shape = probe.value(out).shape().to_vec();
    let n = shape.iter().product();
    let weights = Array::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    grad_check(
        &store,
        |tape, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let y = op(tape, &vars);
            let w = tape.constant(weights.clone());
            let yw = tape.mul(y, w);
            Ok(tape.sum_all(yw))
        },
        1e-6,
        usize::MAX,
    )
}

/// One report per differentiable tape operation.
pub fn primitive_reports() -> Result<Vec<(&'static str, GradCheckReport)>, DiffError> {
    let ops: Vec<OpSpec> = vec![
        ("matmul", vec![(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![(3, 2), (3, 2)], |t, v| t.add(v[0], v[1])),
        ("sub", vec![(3, 2), (3, 2)], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![(3, 2), (3, 2)], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![(3, 2), (1, 2)], |t, v| t.add_row(v[0], v[1])),
        ("mul_col", vec![(3, 4), (3, 1)], |t, v| t.mul_col(v[0], v[1])),
        ("scale", vec![(2, 2)], |t, v| t.scale(v[0], -1.7)),
        ("neg", vec![(2, 2)], |t, v| t.neg(v[0])),
        ("add_scalar", vec![(2, 2)], |t, v| t.add_scalar(v[0], 0.3)),
        ("tanh", vec![(3, 3)], |t, v| t.tanh(v[0])),
        ("sigmoid", vec![(3, 3)], |t, v| t.sigmoid(v[0])),
        ("relu", vec![(3, 3)], |t, v| t.relu(v[0])),
        ("exp", vec![(3, 3)], |t, v| t.exp(v[0])),
        ("square", vec![(3, 3)], |t, v| t.square(v[0])),
        ("concat_cols", vec![(2, 1), (2, 3)], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![(1, 3), (2, 3)], |t, v| t.concat_rows(&[v[0], v[1]])),
        ("slice_cols", vec![(3, 5)], |t, v| t.slice_cols(v[0], 1, 4)),
        ("slice_rows", vec![(5, 2)], |t, v| t.slice_rows(v[0], 2, 4)),
        ("gather_rows", vec![(4, 2)], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1, 2])),
        ("reshape", vec![(2, 6)], |t, v| t.reshape(v[0], 4, 3)),
        ("sum_all", vec![(3, 2)], |t, v| t.sum_all(v[0])),
        ("mean_all", vec![(3, 2)], |t, v| t.mean_all(v[0])),
        ("sum_cols", vec![(3, 4)], |t, v| t.sum_cols(v[0])),
        ("sum_row_groups", vec![(6, 2)], |t, v| t.sum_row_groups(v[0], 3)),
        ("row_dot", vec![(3, 4), (3, 4)], |t, v| t.row_dot(v[0], v[1])),
        ("softmax", vec![(3, 4)], |t, v| t.softmax_rows(v[0], None)),
        ("masked_softmax", vec![(3, 3)], |t, v| {
            t.softmax_rows(v[0], Some(&[true, false, true, false, false, false, false, true, true]))
        }),
        ("gated_softmax", vec![(3, 3), (3, 3)], |t, v| {
            let h = t.sigmoid(v[1]);
            t.gated_softmax_rows(v[0], h, &[true, false, true, true, true, true, false, true, false])
        }),
        ("log_softmax", vec![(3, 4)], |t, v| t.log_softmax_rows(v[0])),
        ("pick_cols", vec![(3, 4)], |t, v| t.pick_cols(v[0], &[2, 0, 3])),
        ("gumbel_softmax", vec![(4, 2)], |t, v| {
            let noise = Array::matrix(4, 2, vec![0.1, -0.4, 1.2, 0.3, -0.7, 0.0, 0.5, 0.5]);
            t.gumbel_softmax_with_noise(v[0], &noise, 0.7, GateMode::Relaxed).expect("valid temperature")
        }),
    ];
    ops.into_iter().map(|(name, shapes, op)| Ok((name, primitive(name, &shapes, op)?))).collect()
}

fn toy_attention() -> AttentionConfig {
    AttentionConfig { hard_hidden: 4, key_dim: 4 }
}

/// Full GA-Comm loss on a three-car, three-step junction batch with the
/// relaxed gate. The advantage baseline is held at its base value.
pub fn comm_loss_report() -> Result<GradCheckReport, Error> {
    let mut cfg = TJConfig::preset(Difficulty::Easy);
    cfg.n_max = 3;
    cfg.max_steps = 3;
    cfg.p_arrive = 0.6;
    let env = TrafficJunction::new(cfg)?;
    let comm = CommConfig {
        encoder_hidden: 6,
        lstm_hidden: 6,
        head_hidden: 6,
        attention: toy_attention(),
        gate_mode: GateMode::Relaxed,
        ..CommConfig::default()
    };
    let policy = CommPolicy::new(comm, env.obs_dim(), 2, 8)?;
    let mut envs = vec![env];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ro = policy.rollout(&mut envs, &[21], 5, &mut rng, true)?;
    let rc = ReinforceConfig::default();
    let base: Vec<f64> = ro.vars.iter().flat_map(|v| ro.tape.value(v.value).data().to_vec()).collect();
    let mut failure = None;
    let report = grad_check(
        &policy.store,
        |tape, store| {
            let built = policy.replay(tape, store, &ro.record, None).and_then(|vars| {
                policy
                    .loss_with_baseline(tape, &vars, &ro.record, &rc, Some(&base))?
                    .map(|(l, _)| l)
                    .ok_or_else(|| Error::Config("toy batch has no live agent".into()))
            });
            built.map_err(|e| {
                failure = Some(e.to_string());
                DiffError::Shape("comm loss failed".into())
            })
        },
        1e-6,
        20,
    );
    match (report, failure) {
        (Ok(r), _) => Ok(r),
        (Err(_), Some(msg)) => Err(Error::Config(msg)),
        (Err(e), None) => Err(e.into()),
    }
}

fn toy_agent() -> Result<(AcAgent, Batch), Error> {
    let cfg = AcConfig {
        actor_hidden: 8,
        critic_hidden: 8,
        attention: toy_attention(),
        gate_mode: GateMode::Relaxed,
        ..AcConfig::default()
    };
    let (n, d, a) = (3, 4, 5);
    let agent = AcAgent::new(cfg, n, d, a, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<Transition> = (0..2)
        .map(|_| Transition {
            obs: random(&mut rng, n, d),
            actions: (0..n).map(|_| rng.gen_range(0..a)).collect(),
            rewards: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            next_obs: random(&mut rng, n, d),
            done: rng.gen_bool(0.5),
        })
        .collect();
    let batch = Batch::from_transitions(&items.iter().collect::<Vec<_>>())?;
    Ok((agent, batch))
}

/// Critic TD loss on a three-agent toy batch for the two-stage and the
/// independent critic; targets and gate noise are fixed.
pub fn critic_loss_reports() -> Result<Vec<(Aggregator, GradCheckReport)>, Error> {
    let mut out = Vec::new();
    for kind in [Aggregator::TwoStage, Aggregator::None] {
        let (mut agent, batch) = toy_agent()?;
        if kind != Aggregator::TwoStage {
            agent = AcAgent::new(AcConfig { aggregator: kind, ..agent.config.clone() }, 3, 4, 5, 11)?;
        }
        let targets = agent.td_targets(&batch, &mut ChaCha8Rng::seed_from_u64(1))?;
        let report = grad_check(
            &agent.critic_store,
            |tape, store| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                agent.critic_loss(tape, store, &batch, &targets, &mut rng).map(|(l, _)| l).map_err(|e| match e {
                    Error::Diff(d) => d,
                    other => DiffError::Shape(other.to_string()),
                })
            },
            1e-4,
            40,
        )?;
        out.push((kind, report));
    }
    Ok(out)
}

/// Actor loss on the toy batch with fixed critic values; the stopped
/// factor `π(a)(Q(a) - b)` is taken at the base parameters.
pub fn actor_loss_report() -> Result<GradCheckReport, Error> {
    let (agent, batch) = toy_agent()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random(&mut rng, batch.obs.rows(), 5).map(|v| 5.0 * v);
    let weights = advantage_weights(&agent.actor.probs(&agent.actor_store, &batch.obs)?, &q);
    Ok(grad_check(
        &agent.actor_store,
        |tape, store| {
            agent.actor_loss_with_weights(tape, store, &batch, &weights).map(|(l, _)| l).map_err(|e| match e {
                Error::Diff(d) => d,
                other => DiffError::Shape(other.to_string()),
            })
        },
        1e-6,
        40,
    )?)
}
