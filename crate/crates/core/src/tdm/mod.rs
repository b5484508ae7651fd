//! Finite-horizon goal-conditioned actor-critic (temporal difference model).
//!
//! `Q(s, a, g, t)` predicts the negative distance to `g` after taking `a` and
//! then following the policy for `t` more steps. At `t = 0` the target is the
//! distance after the single step; otherwise the critic bootstraps from
//! `Q(s', pi(s', g, t-1), g, t-1)` under the target networks. Critics and
//! policy are trained with TD3-style twin critics and delayed policy updates.
//!
//! In per-dimension mode the critic predicts `-|s'_i - g_i|` for each axis and
//! the scalar value is the negated l1 norm of that vector.

mod replay;
mod train;

pub use replay::{GoalSource, RelabelStrategy, ReplayBuffer, SampledTransition, Trajectory};
pub use train::{
    evaluate_reaching, line_of_sight, nearby_goal, scaling_for, train, train_with_checkpoints, TrainLogRow, TrainOutput,
};

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{distance, Action, NavState};
use crate::error::{Error, Result};
use crate::nn::{Adam, NetworkParams, NetworkSpec, OutputActivation};

/// Horizon reached; after this step the goal-reaching attempt ends.
pub fn tdm_reward(next_state: NavState, goal: NavState, horizon: usize, horizon_max: usize) -> f64 {
    debug_assert!(horizon <= horizon_max);
    if horizon == 0 {
        -distance(next_state, goal)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: NavState,
    pub action: Action,
    pub next_state: NavState,
    pub goal: NavState,
    /// Steps remaining after this one.
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QOutputMode {
    Scalar,
    PerDimension,
}

impl QOutputMode {
    pub fn output_dim(self) -> usize {
        match self {
            QOutputMode::Scalar => 1,
            QOutputMode::PerDimension => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdmConfig {
    pub horizon: usize,
    pub hidden_sizes: Vec<usize>,
    pub batch_size: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub q_output_mode: QOutputMode,
    pub policy_delay: usize,
    pub updates_per_step: usize,
    pub replay_capacity: usize,
    pub relabel: RelabelStrategy,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Steps allowed per reaching probe in the training log.
    pub eval_horizon: usize,
}

impl Default for TdmConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            hidden_sizes: vec![400, 300],
            batch_size: 128,
            epsilon: 0.1,
            tau: 0.005,
            learning_rate: 1e-3,
            q_output_mode: QOutputMode::PerDimension,
            policy_delay: 2,
            updates_per_step: 1,
            replay_capacity: 1_000_000,
            relabel: RelabelStrategy::TDM,
            eval_interval: 10_000,
            eval_episodes: 50,
            eval_horizon: 25,
        }
    }
}

impl TdmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
            ("policy_delay", self.policy_delay),
            ("updates_per_step", self.updates_per_step),
            ("replay_capacity", self.replay_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_horizon", self.eval_horizon),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("tdm.{name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.tau) || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("tdm: epsilon and tau must lie in [0,1], learning rate positive".into()));
        }
        self.relabel.validate()
    }
}

/// Input encoding shared by the policy and critics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    /// Positions are divided by this (half the room side).
    pub position_scale: f64,
    pub max_step: f64,
    pub horizon: usize,
}

impl InputScaling {
    fn horizon_feature(&self, t: usize) -> f64 {
        t.min(self.horizon) as f64 / self.horizon as f64
    }
}

/// Policy, twin critics and their target copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdmNets {
    pub scaling: InputScaling,
    pub q_output_mode: QOutputMode,
    pub policy: NetworkParams,
    pub q1: NetworkParams,
    pub q2: NetworkParams,
    pub target_policy: NetworkParams,
    pub target_q1: NetworkParams,
    pub target_q2: NetworkParams,
}

const POLICY_INPUT: usize = 5;
const Q_INPUT: usize = 7;

impl TdmNets {
    pub fn new<R: Rng + ?Sized>(config: &TdmConfig, scaling: InputScaling, rng: &mut R) -> Result<Self> {
        let policy = NetworkParams::init(
            NetworkSpec::new(POLICY_INPUT, &config.hidden_sizes, 2, OutputActivation::Tanh),
            rng,
        )?;
        let q_spec = NetworkSpec::new(Q_INPUT, &config.hidden_sizes, config.q_output_mode.output_dim(), OutputActivation::None);
        let q1 = NetworkParams::init(q_spec.clone(), rng)?;
        let q2 = NetworkParams::init(q_spec, rng)?;
        Ok(Self {
            scaling,
            q_output_mode: config.q_output_mode,
            target_policy: policy.clone(),
            target_q1: q1.clone(),
            target_q2: q2.clone(),
            policy,
            q1,
            q2,
        })
    }

    /// Zero every final layer (online and target), so values start at zero.
    pub fn zero_output_layers(&mut self) {
        for net in [
            &mut self.policy,
            &mut self.q1,
            &mut self.q2,
            &mut self.target_policy,
            &mut self.target_q1,
            &mut self.target_q2,
        ] {
            net.zero_output_layer();
        }
    }

    pub fn horizon(&self) -> usize {
        self.scaling.horizon
    }

    pub fn max_step(&self) -> f64 {
        self.scaling.max_step
    }

    fn policy_row(&self, s: [f64; 2], g: [f64; 2], t: usize) -> [f64; POLICY_INPUT] {
        let k = 1.0 / self.scaling.position_scale;
        [s[0] * k, s[1] * k, g[0] * k, g[1] * k, self.scaling.horizon_feature(t)]
    }

    fn q_row(&self, s: [f64; 2], a_unit: [f64; 2], g: [f64; 2], t: usize) -> [f64; Q_INPUT] {
        let k = 1.0 / self.scaling.position_scale;
        [s[0] * k, s[1] * k, a_unit[0], a_unit[1], g[0] * k, g[1] * k, self.scaling.horizon_feature(t)]
    }

    fn policy_inputs(&self, s: ArrayView2<f64>, g: ArrayView2<f64>, t: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((s.nrows(), POLICY_INPUT));
        for i in 0..s.nrows() {
            let row = self.policy_row([s[[i, 0]], s[[i, 1]]], [g[[i, 0]], g[[i, 1]]], t[i]);
            x.row_mut(i).assign(&ndarray::aview1(&row));
        }
        x
    }

    fn q_inputs(&self, s: ArrayView2<f64>, a_unit: ArrayView2<f64>, g: ArrayView2<f64>, t: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((s.nrows(), Q_INPUT));
        for i in 0..s.nrows() {
            let row = self.q_row([s[[i, 0]], s[[i, 1]]], [a_unit[[i, 0]], a_unit[[i, 1]]], [g[[i, 0]], g[[i, 1]]], t[i]);
            x.row_mut(i).assign(&ndarray::aview1(&row));
        }
        x
    }

    /// Deterministic action in env units.
    pub fn policy_action(&self, s: NavState, g: NavState, t: usize) -> Result<Action> {
        let out = self.policy.forward(&self.policy_row(s.0, g.0, t))?;
        Ok(Action([out[0] * self.max_step(), out[1] * self.max_step()]))
    }

    /// Epsilon-greedy action: uniform over the action box with probability `epsilon`.
    pub fn act<R: Rng + ?Sized>(&self, s: NavState, g: NavState, t: usize, epsilon: f64, rng: &mut R) -> Result<Action> {
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            let m = self.max_step();
            return Ok(Action([rng.gen_range(-m..=m), rng.gen_range(-m..=m)]));
        }
        self.policy_action(s, g, t)
    }

    fn aggregate(&self, q: &[f64]) -> f64 {
        match self.q_output_mode {
            QOutputMode::Scalar => q[0],
            QOutputMode::PerDimension => -q.iter().map(|x| x.abs()).sum::<f64>(),
        }
    }

    /// `V(s, g, t) = Q1(s, pi(s, g, t), g, t)`, aggregated to a scalar.
    pub fn value(&self, s: NavState, g: NavState, t: usize) -> Result<f64> {
        let a = self.policy.forward(&self.policy_row(s.0, g.0, t))?;
        let q = self.q1.forward(&self.q_row(s.0, [a[0], a[1]], g.0, t))?;
        Ok(self.aggregate(&q))
    }

    /// Values for each row of `s` and `g` at a common horizon.
    pub fn value_batch(&self, s: ArrayView2<f64>, g: ArrayView2<f64>, t: usize) -> Result<Vec<f64>> {
        let ts = vec![t; s.nrows()];
        let a = self.policy.forward_batch(self.policy_inputs(s, g, &ts).view())?;
        let q = self.q1.forward_batch(self.q_inputs(s, a.view(), g, &ts).view())?;
        Ok(q.rows().into_iter().map(|r| self.aggregate(r.as_slice().expect("row-major"))).collect())
    }

    /// Values plus their gradients with respect to `s` and `g`, through both networks.
    pub fn value_grad_batch(&self, s: ArrayView2<f64>, g: ArrayView2<f64>, t: usize) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
        let n = s.nrows();
        let ts = vec![t; n];
        let p_cache = self.policy.forward_cached(self.policy_inputs(s, g, &ts).view())?;
        let a = p_cache.output().clone();
        let q_cache = self.q1.forward_cached(self.q_inputs(s, a.view(), g, &ts).view())?;
        let q = q_cache.output();
        let mut values = Vec::with_capacity(n);
        let mut upstream = Array2::zeros(q.dim());
        for (i, row) in q.rows().into_iter().enumerate() {
            let r = row.as_slice().expect("row-major");
            values.push(self.aggregate(r));
            match self.q_output_mode {
                QOutputMode::Scalar => upstream[[i, 0]] = 1.0,
                QOutputMode::PerDimension => {
                    for (k, &x) in r.iter().enumerate() {
                        upstream[[i, k]] = -sign(x);
                    }
                }
            }
        }
        let (_, dq_in) = self.q1.backward_batch(&q_cache, upstream.view())?;
        let da = dq_in.slice(s![.., 2..4]).to_owned();
        let (_, dp_in) = self.policy.backward_batch(&p_cache, da.view())?;
        let k = 1.0 / self.scaling.position_scale;
        let ds = (&dq_in.slice(s![.., 0..2]) + &dp_in.slice(s![.., 0..2])) * k;
        let dg = (&dq_in.slice(s![.., 4..6]) + &dp_in.slice(s![.., 2..4])) * k;
        Ok((values, ds, dg))
    }

    fn target_per_row(&self, tr: &Transition) -> Option<Vec<f64>> {
        if tr.horizon > 0 {
            return None;
        }
        let d = [tr.next_state.0[0] - tr.goal.0[0], tr.next_state.0[1] - tr.goal.0[1]];
        Some(match self.q_output_mode {
            QOutputMode::Scalar => vec![-distance(tr.next_state, tr.goal)],
            QOutputMode::PerDimension => vec![-d[0].abs(), -d[1].abs()],
        })
    }

    /// Regression targets for a batch: the grounded distance at `t = 0`, else the
    /// elementwise minimum of the twin target critics one step later.
    pub fn critic_targets(&self, batch: &[Transition]) -> Result<Array2<f64>> {
        let n = batch.len();
        let dim = self.q_output_mode.output_dim();
        let mut y = Array2::zeros((n, dim));
        let boot: Vec<usize> = (0..n).filter(|&i| batch[i].horizon > 0).collect();
        for (i, tr) in batch.iter().enumerate() {
            if let Some(v) = self.target_per_row(tr) {
                y.row_mut(i).assign(&ndarray::Array1::from_vec(v));
            }
        }
        if boot.is_empty() {
            return Ok(y);
        }
        let m = boot.len();
        let mut s = Array2::zeros((m, 2));
        let mut g = Array2::zeros((m, 2));
        let mut ts = Vec::with_capacity(m);
        for (r, &i) in boot.iter().enumerate() {
            s.row_mut(r).assign(&ndarray::aview1(&batch[i].next_state.0));
            g.row_mut(r).assign(&ndarray::aview1(&batch[i].goal.0));
            ts.push(batch[i].horizon - 1);
        }
        let a = self.target_policy.forward_batch(self.policy_inputs(s.view(), g.view(), &ts).view())?;
        let x = self.q_inputs(s.view(), a.view(), g.view(), &ts);
        let q1 = self.target_q1.forward_batch(x.view())?;
        let q2 = self.target_q2.forward_batch(x.view())?;
        for (r, &i) in boot.iter().enumerate() {
            for k in 0..dim {
                y[[i, k]] = q1[[r, k]].min(q2[[r, k]]);
            }
        }
        Ok(y)
    }

    pub fn critic_target(&self, tr: &Transition) -> Result<Vec<f64>> {
        Ok(self.critic_targets(std::slice::from_ref(tr))?.row(0).to_vec())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateLosses {
    pub critic_loss: f64,
    /// Present only on policy-update steps.
    pub policy_loss: Option<f64>,
}

/// Online networks plus optimizer state for TD3-style updates.
#[derive(Debug, Clone)]
pub struct TdmLearner {
    pub nets: TdmNets,
    policy_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    tau: f64,
    policy_delay: usize,
    updates: u64,
}

impl TdmLearner {
    pub fn new(nets: TdmNets, config: &TdmConfig) -> Self {
        Self {
            nets,
            policy_opt: Adam::with_lr(config.learning_rate),
            q1_opt: Adam::with_lr(config.learning_rate),
            q2_opt: Adam::with_lr(config.learning_rate),
            tau: config.tau,
            policy_delay: config.policy_delay,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Mean squared critic error on `batch` against fixed targets `y`.
    pub fn critic_loss(&self, batch: &[Transition], y: &Array2<f64>) -> Result<[f64; 2]> {
        let (s, a, g, ts) = unpack(batch, self.nets.max_step());
        let x = self.nets.q_inputs(s.view(), a.view(), g.view(), &ts);
        let n = batch.len() as f64;
        let mut out = [0.0; 2];
        for (k, q) in [&self.nets.q1, &self.nets.q2].into_iter().enumerate() {
            let pred = q.forward_batch(x.view())?;
            out[k] = (&pred - y).mapv(|e| e * e).sum() / n;
        }
        Ok(out)
    }

    /// One critic regression step for both critics, a delayed policy step, and
    /// soft target updates.
    pub fn update(&mut self, batch: &[Transition]) -> Result<UpdateLosses> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("td3 update on an empty batch".into()));
        }
        let n = batch.len() as f64;
        let y = self.nets.critic_targets(batch)?;
        let (s, a, g, ts) = unpack(batch, self.nets.max_step());
        let x = self.nets.q_inputs(s.view(), a.view(), g.view(), &ts);

        let mut critic_loss = 0.0;
        for (net, opt) in [(&mut self.nets.q1, &mut self.q1_opt), (&mut self.nets.q2, &mut self.q2_opt)] {
            let cache = net.forward_cached(x.view())?;
            let residual = cache.output() - &y;
            critic_loss += residual.mapv(|e| e * e).sum() / n;
            let upstream = residual * (2.0 / n);
            let (grads, _) = net.backward_batch(&cache, upstream.view())?;
            net.apply_gradients(&grads, opt)?;
        }
        critic_loss *= 0.5;
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss at update {}: {critic_loss}", self.updates)));
        }

        self.updates += 1;
        let mut policy_loss = None;
        if self.updates % self.policy_delay as u64 == 0 {
            let p_cache = self.nets.policy.forward_cached(self.nets.policy_inputs(s.view(), g.view(), &ts).view())?;
            let xq = self.nets.q_inputs(s.view(), p_cache.output().view(), g.view(), &ts);
            let q_cache = self.nets.q1.forward_cached(xq.view())?;
            let loss = -q_cache.output().sum() / n;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("policy loss at update {}: {loss}", self.updates)));
            }
            let upstream = Array2::from_elem(q_cache.output().dim(), -1.0 / n);
            let (_, dx) = self.nets.q1.backward_batch(&q_cache, upstream.view())?;
            let da = dx.slice(s![.., 2..4]).to_owned();
            let (grads, _) = self.nets.policy.backward_batch(&p_cache, da.view())?;
            self.nets.policy.apply_gradients(&grads, &mut self.policy_opt)?;
            policy_loss = Some(loss);
        }

        let nets = &mut self.nets;
        nets.target_q1.soft_update(&nets.q1, self.tau)?;
        nets.target_q2.soft_update(&nets.q2, self.tau)?;
        nets.target_policy.soft_update(&nets.policy, self.tau)?;
        Ok(UpdateLosses {
            critic_loss,
            policy_loss,
        })
    }

    /// Gradient of the policy objective `-mean Q1(s, pi(s,g,t), g, t)` w.r.t. policy params.
    pub fn policy_gradient_norm(&self, batch: &[Transition]) -> Result<f64> {
        let n = batch.len() as f64;
        let (s, _, g, ts) = unpack(batch, self.nets.max_step());
        let p_cache = self.nets.policy.forward_cached(self.nets.policy_inputs(s.view(), g.view(), &ts).view())?;
        let xq = self.nets.q_inputs(s.view(), p_cache.output().view(), g.view(), &ts);
        let q_cache = self.nets.q1.forward_cached(xq.view())?;
        let upstream = Array2::from_elem(q_cache.output().dim(), -1.0 / n);
        let (_, dx) = self.nets.q1.backward_batch(&q_cache, upstream.view())?;
        let da = dx.slice(s![.., 2..4]).to_owned();
        let (grads, _) = self.nets.policy.backward_batch(&p_cache, da.view())?;
        Ok(grads.l2_norm())
    }
}

type Unpacked = (Array2<f64>, Array2<f64>, Array2<f64>, Vec<usize>);

fn unpack(batch: &[Transition], max_step: f64) -> Unpacked {
    let n = batch.len();
    let mut s = Array2::zeros((n, 2));
    let mut a = Array2::zeros((n, 2));
    let mut g = Array2::zeros((n, 2));
    let mut ts = Vec::with_capacity(n);
    for (i, tr) in batch.iter().enumerate() {
        s.row_mut(i).assign(&ndarray::aview1(&tr.state.0));
        a[[i, 0]] = tr.action.0[0] / max_step;
        a[[i, 1]] = tr.action.0[1] / max_step;
        g.row_mut(i).assign(&ndarray::aview1(&tr.goal.0));
        ts.push(tr.horizon);
    }
    (s, a, g, ts)
}
