use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InputScaling, TdmConfig, TdmLearner, TdmNets, Trajectory};
use crate::env::{distance, EnvConfig, NavState, StartRegion};
use crate::error::{Error, Result};
use crate::tdm::ReplayBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub eval_distance_mean: f64,
    pub eval_success_rate: f64,
    pub critic_loss: f64,
    pub policy_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub nets: TdmNets,
    pub log: Vec<TrainLogRow>,
}

pub fn scaling_for(env: &EnvConfig, config: &TdmConfig) -> InputScaling {
    InputScaling {
        position_scale: env.half_side(),
        max_step: env.max_step,
        horizon: config.horizon,
    }
}

/// Collect episodes of `config.horizon` steps from uniform starts toward uniform
/// goals, running `updates_per_step` TD3 updates per environment step.
pub fn train<R: Rng + ?Sized>(env: &EnvConfig, config: &TdmConfig, budget_steps: usize, rng: &mut R) -> Result<TrainOutput> {
    train_with_checkpoints(env, config, budget_steps, rng, |_, _| Ok(()))
}

/// As [`train`], calling `on_eval(step, nets)` after every logged evaluation.
pub fn train_with_checkpoints<R, F>(
    env: &EnvConfig,
    config: &TdmConfig,
    budget_steps: usize,
    rng: &mut R,
    mut on_eval: F,
) -> Result<TrainOutput>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &TdmNets) -> Result<()>,
{
    env.validate()?;
    config.validate()?;
    let nets = TdmNets::new(config, scaling_for(env, config), rng)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut learner = TdmLearner::new(nets, config);
    let mut buffer = ReplayBuffer::new(config.replay_capacity, config.horizon);
    let mut log = Vec::new();

    let mut state = env.reset(rng, StartRegion::UniformValid)?;
    let mut goal = env.reset(rng, StartRegion::UniformValid)?;
    let mut trajectory = Trajectory::new(state, goal);
    let (mut critic_sum, mut critic_n, mut policy_sum, mut policy_n) = (0.0, 0usize, 0.0, 0usize);

    for step in 1..=budget_steps {
        let horizon = config.horizon - 1 - trajectory.len();
        let action = learner.nets.act(state, goal, horizon, config.epsilon, rng)?;
        let next = env.step(state, action);
        trajectory.push(action, next, horizon);
        state = next;
        if trajectory.len() == config.horizon {
            buffer.push(std::mem::replace(&mut trajectory, Trajectory::new(state, goal)));
            state = env.reset(rng, StartRegion::UniformValid)?;
            goal = env.reset(rng, StartRegion::UniformValid)?;
            trajectory = Trajectory::new(state, goal);
        }

        if !buffer.is_empty() {
            for _ in 0..config.updates_per_step {
                let batch: Vec<_> = buffer
                    .sample_relabeled(&config.relabel, rng, config.batch_size)?
                    .into_iter()
                    .map(|e| e.transition)
                    .collect();
                let losses = learner.update(&batch)?;
                critic_sum += losses.critic_loss;
                critic_n += 1;
                if let Some(p) = losses.policy_loss {
                    policy_sum += p;
                    policy_n += 1;
                }
            }
        }

        if step % config.eval_interval == 0 {
            let (d, s) = evaluate_reaching(&learner.nets, env, config.eval_episodes, config.eval_horizon, &mut eval_rng)?;
            log.push(TrainLogRow {
                step,
                eval_distance_mean: d,
                eval_success_rate: s,
                critic_loss: if critic_n > 0 { critic_sum / critic_n as f64 } else { 0.0 },
                policy_loss: if policy_n > 0 { policy_sum / policy_n as f64 } else { 0.0 },
            });
            (critic_sum, critic_n, policy_sum, policy_n) = (0.0, 0, 0.0, 0);
            on_eval(step, &learner.nets)?;
        }
    }
    Ok(TrainOutput {
        nets: learner.nets,
        log,
    })
}

/// True when the straight segment between two valid states stays valid.
pub fn line_of_sight(env: &EnvConfig, a: NavState, b: NavState) -> bool {
    let n = 64;
    (0..=n).all(|i| {
        let u = i as f64 / n as f64;
        env.valid_state([a.0[0] + u * (b.0[0] - a.0[0]), a.0[1] + u * (b.0[1] - a.0[1])])
    })
}

/// Short-range reaching probe: uniform start, a goal within 2 units in line of
/// sight, `horizon` policy steps. Returns mean final distance and the fraction
/// ending within one agent diameter.
pub fn evaluate_reaching<R: Rng + ?Sized>(
    nets: &TdmNets,
    env: &EnvConfig,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Ok((0.0, 0.0));
    }
    let mut total = 0.0;
    let mut hits = 0;
    for _ in 0..episodes {
        let start = env.reset(rng, StartRegion::UniformValid)?;
        let goal = nearby_goal(env, start, 2.0, rng)?;
        let mut s = start;
        for k in 0..horizon {
            s = env.step(s, nets.policy_action(s, goal, horizon - 1 - k)?);
        }
        let d = distance(s, goal);
        total += d;
        if d <= 2.0 * env.agent_radius {
            hits += 1;
        }
    }
    Ok((total / episodes as f64, hits as f64 / episodes as f64))
}

pub fn nearby_goal<R: Rng + ?Sized>(env: &EnvConfig, start: NavState, radius: f64, rng: &mut R) -> Result<NavState> {
    for _ in 0..10_000 {
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = radius * rng.gen::<f64>().sqrt();
        let g = NavState([start.0[0] + r * ang.cos(), start.0[1] + r * ang.sin()]);
        if env.valid_state(g.0) && line_of_sight(env, start, g) {
            return Ok(g);
        }
    }
    Err(Error::SamplingExhausted {
        region: "nearby goal".into(),
        draws: 10_000,
    })
}
