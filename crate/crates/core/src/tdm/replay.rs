//! Trajectory replay buffer with goal relabeling.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Transition;
use crate::env::{Action, NavState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `states.len() == actions.len() + 1`.
    pub states: Vec<NavState>,
    pub actions: Vec<Action>,
    pub goal: NavState,
    /// Remaining horizon recorded at each step.
    pub horizons: Vec<usize>,
}

impl Trajectory {
    pub fn new(start: NavState, goal: NavState) -> Self {
        Self {
            states: vec![start],
            actions: Vec::new(),
            goal,
            horizons: Vec::new(),
        }
    }

    pub fn push(&mut self, action: Action, next: NavState, horizon: usize) {
        self.actions.push(action);
        self.states.push(next);
        self.horizons.push(horizon);
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.states[i],
            action: self.actions[i],
            next_state: self.states[i + 1],
            goal: self.goal,
            horizon: self.horizons[i],
        }
    }
}

/// Fractions of a batch whose goals come from each source. Must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelabelStrategy {
    pub original: f64,
    pub buffer_random: f64,
    pub future: f64,
}

impl RelabelStrategy {
    /// 20% original, 40% random buffer states, 40% future states.
    pub const TDM: Self = Self {
        original: 0.2,
        buffer_random: 0.4,
        future: 0.4,
    };
    /// 20% original, 80% future states.
    pub const HER: Self = Self {
        original: 0.2,
        buffer_random: 0.0,
        future: 0.8,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.original, self.buffer_random, self.future];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("relabel fractions must lie in [0,1] and sum to 1: {self:?}")));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> GoalSource {
        let u: f64 = rng.gen();
        if u < self.original {
            GoalSource::Original
        } else if u < self.original + self.buffer_random {
            GoalSource::BufferRandom
        } else {
            GoalSource::Future
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GoalSource {
    Original,
    BufferRandom,
    Future,
}

/// A batch entry together with where its goal came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTransition {
    pub transition: Transition,
    pub source: GoalSource,
    pub trajectory: u64,
    pub step: usize,
    /// For future goals: index of the goal state within the same trajectory.
    pub goal_step: Option<usize>,
}

/// Ring of whole trajectories; the oldest are evicted once `capacity` transitions are exceeded.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    trajectories: VecDeque<(u64, Trajectory)>,
    cumulative: Vec<usize>,
    next_id: u64,
    horizon: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, horizon: usize) -> Self {
        Self {
            capacity,
            trajectories: VecDeque::new(),
            cumulative: Vec::new(),
            next_id: 0,
            horizon,
        }
    }

    pub fn len(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn push(&mut self, trajectory: Trajectory) {
        if trajectory.is_empty() {
            return;
        }
        self.trajectories.push_back((self.next_id, trajectory));
        self.next_id += 1;
        let mut total: usize = self.trajectories.iter().map(|(_, t)| t.len()).sum();
        while total > self.capacity && self.trajectories.len() > 1 {
            let (_, old) = self.trajectories.pop_front().expect("nonempty");
            total -= old.len();
        }
        self.cumulative.clear();
        let mut acc = 0;
        for (_, t) in &self.trajectories {
            acc += t.len();
            self.cumulative.push(acc);
        }
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let traj = self.cumulative.partition_point(|&c| c <= flat);
        let start = if traj == 0 { 0 } else { self.cumulative[traj - 1] };
        (traj, flat - start)
    }

    fn uniform_step<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        self.locate(rng.gen_range(0..self.len()))
    }

    /// Sample `batch_size` transitions, relabeling goals and horizons per `strategy`.
    pub fn sample_relabeled<R: Rng + ?Sized>(
        &self,
        strategy: &RelabelStrategy,
        rng: &mut R,
        batch_size: usize,
    ) -> Result<Vec<SampledTransition>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        strategy.validate()?;
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (ti, step) = self.uniform_step(rng);
            let (id, traj) = &self.trajectories[ti];
            let mut transition = traj.transition(step);
            let source = strategy.draw(rng);
            let mut goal_step = None;
            match source {
                GoalSource::Original => {}
                GoalSource::BufferRandom => {
                    let (oi, os) = self.uniform_step(rng);
                    transition.goal = self.trajectories[oi].1.states[os + 1];
                    transition.horizon = rng.gen_range(0..=self.horizon);
                }
                GoalSource::Future => {
                    let j = rng.gen_range(step + 1..=traj.len());
                    transition.goal = traj.states[j];
                    transition.horizon = rng.gen_range(0..=self.horizon);
                    goal_step = Some(j);
                }
            }
            batch.push(SampledTransition {
                transition,
                source,
                trajectory: *id,
                step,
                goal_step,
            });
        }
        Ok(batch)
    }
}
