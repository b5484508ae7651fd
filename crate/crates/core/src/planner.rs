//! Latent subgoal planning.
//!
//! A plan is `K` latent vectors between the current state and the goal. Each
//! is decoded to a state, and consecutive pairs are scored with the
//! goal-conditioned value function over their time segment. The plan loss is
//! a norm of those value magnitudes minus `lambda` times the prior
//! log-density of the latents. Plans are found with the cross-entropy method
//! (default) or by gradient descent through the decoder and value networks,
//! and executed with replanning at the start of every segment.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{distance, EnvConfig, NavState, Rect};
use crate::error::{check_dim, Error, Result};
use crate::nn::{Adam, Optimizer, RmsProp, Sgd};
use crate::par;
use crate::tdm::TdmNets;
use crate::vae::{log_prior, Vae};

/// Rows per parallel scoring task. Fixed so results do not depend on the thread count.
pub const SCORE_CHUNK: usize = 125;

/// Segment lengths: `floor(T / (K + 1))` each, the remainder added to the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSchedule {
    pub segments: Vec<usize>,
}

impl TimeSchedule {
    pub fn total(&self) -> usize {
        self.segments.iter().sum()
    }

    pub fn num_subgoals(&self) -> usize {
        self.segments.len() - 1
    }
}

pub fn time_schedule(t_max: usize, k: usize) -> Result<TimeSchedule> {
    if t_max < k + 1 {
        return Err(Error::InvalidConfig(format!("horizon {t_max} cannot hold {} segments", k + 1)));
    }
    let base = t_max / (k + 1);
    let mut segments = vec![base; k + 1];
    segments[k] += t_max - base * (k + 1);
    Ok(TimeSchedule { segments })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    LInf,
    L1,
}

impl Norm {
    pub fn apply(self, entries: &[f64]) -> f64 {
        match self {
            Norm::LInf => entries.iter().fold(0.0, |m, v| m.max(v.abs())),
            Norm::L1 => entries.iter().map(|v| v.abs()).sum(),
        }
    }

    /// `d norm / d entry_i`; for the max norm the first maximizer takes the whole gradient.
    fn gradient(self, entries: &[f64]) -> Vec<f64> {
        match self {
            Norm::L1 => entries.iter().map(|v| v.signum()).collect(),
            Norm::LInf => {
                let mut g = vec![0.0; entries.len()];
                if let Some((i, v)) = entries.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0))) {
                    g[i] = v.signum();
                }
                g
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOptimizer {
    Cem,
    Adam,
    Sgd,
    Rmsprop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemConfig {
    pub population: usize,
    pub iterations: usize,
    pub elite_frac: f64,
    /// Elite fraction for the second half of the iterations, if different.
    #[serde(default)]
    pub late_elite_frac: Option<f64>,
}

impl CemConfig {
    pub fn standard() -> Self {
        Self {
            population: 1000,
            iterations: 15,
            elite_frac: 0.05,
            late_elite_frac: None,
        }
    }

    /// Settings for long plans: a larger population, 25% elites, then 1%.
    pub fn large() -> Self {
        Self {
            population: 10_000,
            iterations: 50,
            elite_frac: 0.25,
            late_elite_frac: Some(0.01),
        }
    }

    pub fn num_elites(&self, iteration: usize) -> usize {
        let frac = match self.late_elite_frac {
            Some(late) if iteration >= self.iterations / 2 => late,
            _ => self.elite_frac,
        };
        (frac * self.population as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("cem: iterations must be positive".into()));
        }
        for frac in std::iter::once(self.elite_frac).chain(self.late_elite_frac) {
            if !(frac > 0.0 && frac <= 1.0) || ((frac * self.population as f64).round() as usize) < 2 {
                return Err(Error::InvalidConfig(format!(
                    "cem: elite fraction {frac} of {} leaves fewer than 2 elites",
                    self.population
                )));
            }
        }
        Ok(())
    }
}

impl Default for CemConfig {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradConfig {
    pub steps: usize,
    pub adam_lr: f64,
    pub sgd_lr: f64,
    pub rmsprop_lr: f64,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            adam_lr: 0.05,
            sgd_lr: 0.05,
            rmsprop_lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub k: usize,
    pub horizon: usize,
    pub lambda: f64,
    pub norm: Norm,
    pub optimizer: PlanOptimizer,
    pub cem: CemConfig,
    pub grad: GradConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            k: 3,
            horizon: 100,
            lambda: 0.1,
            norm: Norm::LInf,
            optimizer: PlanOptimizer::Cem,
            cem: CemConfig::standard(),
            grad: GradConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("planner: lambda must be >= 0, got {}", self.lambda)));
        }
        time_schedule(self.horizon, self.k)?;
        self.cem.validate()
    }

    pub fn schedule(&self) -> Result<TimeSchedule> {
        time_schedule(self.horizon, self.k)
    }
}

/// Goal-conditioned value `V(from, to, t)` over batches of row pairs.
pub trait ValueFn: Sync {
    fn values(&self, from: ArrayView2<f64>, to: ArrayView2<f64>, t: usize) -> Result<Vec<f64>>;

    /// Values with their gradients in `from` and `to`.
    fn values_with_grads(&self, from: ArrayView2<f64>, to: ArrayView2<f64>, t: usize) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)>;
}

impl ValueFn for TdmNets {
    fn values(&self, from: ArrayView2<f64>, to: ArrayView2<f64>, t: usize) -> Result<Vec<f64>> {
        self.value_batch(from, to, t)
    }

    fn values_with_grads(&self, from: ArrayView2<f64>, to: ArrayView2<f64>, t: usize) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
        self.value_grad_batch(from, to, t)
    }
}

/// `V(a, b, t) = -|a - b|`, an idealized value that ignores walls and time.
#[derive(Debug, Clone, Copy, Default)]
pub struct NegDistance;

impl ValueFn for NegDistance {
    fn values(&self, from: ArrayView2<f64>, to: ArrayView2<f64>, _t: usize) -> Result<Vec<f64>> {
        Ok((&from - &to).rows().into_iter().map(|r| -r.dot(&r).sqrt()).collect())
    }

    fn values_with_grads(&self, from: ArrayView2<f64>, to: ArrayView2<f64>, t: usize) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
        let v = self.values(from, to, t)?;
        let mut da = &from - &to;
        for (mut row, &vi) in da.rows_mut().into_iter().zip(&v) {
            let d = (-vi).max(1e-12);
            row.mapv_inplace(|x| -x / d);
        }
        let db = -&da;
        Ok((v, da, db))
    }
}

/// Where subgoals live and how they map to states.
pub trait SubgoalSpace: Sync {
    fn dim(&self) -> usize;
    fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>>;
    /// Decoded rows and `upstream^T d decode / dz` per row.
    fn decode_vjp(&self, z: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)>;
    /// Whether the prior penalty applies.
    fn uses_prior(&self) -> bool;
    /// Initial sampling distribution, as per-dimension mean and standard deviation.
    fn initial(&self) -> (Vec<f64>, Vec<f64>);
}

impl SubgoalSpace for Vae {
    fn dim(&self) -> usize {
        self.latent_dim()
    }

    fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.decode_batch(z)
    }

    fn decode_vjp(&self, z: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        Vae::decode_vjp(self, z, upstream)
    }

    fn uses_prior(&self) -> bool {
        true
    }

    fn initial(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.latent_dim()], vec![1.0; self.latent_dim()])
    }
}

/// Subgoals as raw coordinates, clamped to a box, with no prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSpace {
    pub bounds: Rect,
}

impl RawSpace {
    fn lo_hi(&self) -> [(f64, f64); 2] {
        [(self.bounds.x0, self.bounds.x1), (self.bounds.y0, self.bounds.y1)]
    }
}

impl SubgoalSpace for RawSpace {
    fn dim(&self) -> usize {
        2
    }

    fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("raw subgoal", 2, z.ncols())?;
        let b = self.lo_hi();
        Ok(Array2::from_shape_fn(z.dim(), |(i, j)| z[[i, j]].clamp(b[j].0, b[j].1)))
    }

    fn decode_vjp(&self, z: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = self.decode(z)?;
        let b = self.lo_hi();
        let dz = Array2::from_shape_fn(z.dim(), |(i, j)| {
            if (b[j].0..=b[j].1).contains(&z[[i, j]]) {
                upstream[[i, j]]
            } else {
                0.0
            }
        });
        Ok((x, dz))
    }

    fn uses_prior(&self) -> bool {
        false
    }

    fn initial(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.lo_hi();
        (
            b.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
            b.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect(),
        )
    }
}

/// Frozen models and the fixed parts of a planning problem.
pub struct PlanProblem<'a> {
    pub value: &'a dyn ValueFn,
    pub space: &'a dyn SubgoalSpace,
    pub start: NavState,
    pub goal: NavState,
    pub schedule: &'a [usize],
    pub lambda: f64,
    pub norm: Norm,
}

impl PlanProblem<'_> {
    pub fn num_subgoals(&self) -> usize {
        self.schedule.len() - 1
    }

    pub fn plan_dim(&self) -> usize {
        self.num_subgoals() * self.space.dim()
    }

    fn repeat(&self, s: NavState, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 2), |(_, j)| s.0[j])
    }

    fn check(&self, plans: ArrayView2<f64>) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidConfig("empty time schedule".into()));
        }
        check_dim("plan width", self.plan_dim(), plans.ncols())
    }

    /// States at the ends of each segment: start, decoded subgoals, goal.
    fn waypoints(&self, plans: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check(plans)?;
        let n = plans.nrows();
        let d = self.space.dim();
        let mut points = Vec::with_capacity(self.schedule.len() + 1);
        points.push(self.repeat(self.start, n));
        for k in 0..self.num_subgoals() {
            points.push(self.space.decode(plans.slice(s![.., k * d..(k + 1) * d]))?);
        }
        points.push(self.repeat(self.goal, n));
        Ok(points)
    }

    /// Chained values, one row per plan and one column per segment.
    pub fn feasibility(&self, plans: ArrayView2<f64>) -> Result<Array2<f64>> {
        let points = self.waypoints(plans)?;
        let mut out = Array2::zeros((plans.nrows(), self.schedule.len()));
        for (i, &t) in self.schedule.iter().enumerate() {
            let v = self.value.values(points[i].view(), points[i + 1].view(), t)?;
            out.column_mut(i).assign(&Array1::from(v));
        }
        Ok(out)
    }

    fn prior_sum(&self, plan: &[f64]) -> f64 {
        let d = self.space.dim();
        plan.chunks(d.max(1)).take(self.num_subgoals()).map(log_prior).sum()
    }

    fn combine(&self, entries: &[f64], plan: &[f64]) -> f64 {
        let mut loss = self.norm.apply(entries);
        if self.space.uses_prior() && self.num_subgoals() > 0 {
            loss -= self.lambda * self.prior_sum(plan);
        }
        loss
    }

    /// Loss of every row of `plans`.
    pub fn losses(&self, plans: ArrayView2<f64>) -> Result<Vec<f64>> {
        let feas = self.feasibility(plans)?;
        let losses: Vec<f64> = feas
            .rows()
            .into_iter()
            .zip(plans.rows())
            .map(|(e, p)| self.combine(&e.to_vec(), &p.to_vec()))
            .collect();
        Ok(losses)
    }

    pub fn loss(&self, plan: &[f64]) -> Result<f64> {
        let view = ArrayView2::from_shape((1, plan.len()), plan).map_err(|_| Error::DimensionMismatch {
            context: "plan width",
            expected: self.plan_dim(),
            got: plan.len(),
        })?;
        Ok(self.losses(view)?[0])
    }

    /// Losses of a population, scored in fixed-size chunks (in parallel when enabled).
    pub fn score_population(&self, plans: ArrayView2<f64>) -> Result<Vec<f64>> {
        let rows: Vec<usize> = (0..plans.nrows()).collect();
        par::map_chunks(&rows, SCORE_CHUNK, |chunk| self.score_chunk(plans, chunk))
            .into_iter()
            .collect()
    }

    /// Sequential reference for [`Self::score_population`].
    pub fn score_population_sequential(&self, plans: ArrayView2<f64>) -> Result<Vec<f64>> {
        let rows: Vec<usize> = (0..plans.nrows()).collect();
        par::map_chunks_sequential(&rows, SCORE_CHUNK, |chunk| self.score_chunk(plans, chunk))
            .into_iter()
            .collect()
    }

    fn score_chunk(&self, plans: ArrayView2<f64>, chunk: &[usize]) -> Vec<Result<f64>> {
        let (lo, hi) = (chunk[0], chunk[chunk.len() - 1] + 1);
        match self.losses(plans.slice(s![lo..hi, ..])) {
            Ok(v) => v.into_iter().map(Ok).collect(),
            Err(e) => {
                let msg = e.to_string();
                chunk.iter().map(|_| Err(Error::NonFinite(msg.clone()))).collect()
            }
        }
    }

    /// Loss of one plan and its gradient with respect to the plan vector.
    pub fn loss_and_gradient(&self, plan: &[f64]) -> Result<(f64, Vec<f64>)> {
        let view = ArrayView2::from_shape((1, plan.len()), plan).map_err(|_| Error::DimensionMismatch {
            context: "plan width",
            expected: self.plan_dim(),
            got: plan.len(),
        })?;
        let points = self.waypoints(view)?;
        let segs = self.schedule.len();
        let mut entries = Vec::with_capacity(segs);
        let mut d_from = Vec::with_capacity(segs);
        let mut d_to = Vec::with_capacity(segs);
        for (i, &t) in self.schedule.iter().enumerate() {
            let (v, da, db) = self.value.values_with_grads(points[i].view(), points[i + 1].view(), t)?;
            entries.push(v[0]);
            d_from.push(da);
            d_to.push(db);
        }
        let loss = self.combine(&entries, plan);
        let coef = self.norm.gradient(&entries);
        let d = self.space.dim();
        let mut grad = vec![0.0; plan.len()];
        for k in 0..self.num_subgoals() {
            // Subgoal k + 1 ends segment k and starts segment k + 1.
            let up = &d_to[k] * coef[k] + &d_from[k + 1] * coef[k + 1];
            let z = view.slice(s![.., k * d..(k + 1) * d]);
            let (_, dz) = self.space.decode_vjp(z, up.view())?;
            for j in 0..d {
                let prior = if self.space.uses_prior() { self.lambda * z[[0, j]] } else { 0.0 };
                grad[k * d + j] = dz[[0, j]] + prior;
            }
        }
        Ok((loss, grad))
    }
}

/// Result of a plan search. `plan` is the best plan seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub plan: Vec<f64>,
    pub loss: f64,
    /// CEM: elite-mean loss per iteration. Gradient methods: loss per step.
    pub trace: Vec<f64>,
    /// Set when a gradient method stopped on a non-finite loss.
    pub aborted: bool,
}

pub const CEM_VARIANCE_FLOOR: f64 = 1e-6;

/// Cross-entropy method with a diagonal Gaussian, refit from the elites of each
/// iteration. Returns the best of all scored samples and the final mean.
pub fn cem_minimize<R, F>(init_mean: &[f64], init_std: &[f64], config: &CemConfig, rng: &mut R, score: F) -> Result<OptimizeResult>
where
    R: Rng + ?Sized,
    F: Fn(ArrayView2<f64>) -> Result<Vec<f64>>,
{
    config.validate()?;
    check_dim("cem std", init_mean.len(), init_std.len())?;
    let dim = init_mean.len();
    let mut mean = Array1::from(init_mean.to_vec());
    let mut std = Array1::from(init_std.to_vec());
    let mut best = (f64::INFINITY, mean.to_vec());
    let mut trace = Vec::with_capacity(config.iterations);
    let n = config.population;
    for it in 0..config.iterations {
        let mut pop = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
        pop *= &std;
        pop += &mean;
        let scores = score(pop.view())?;
        check_dim("cem scores", n, scores.len())?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        if !scores[order[0]].is_finite() {
            return Err(Error::NonFinite(format!("cem iteration {it}: no finite candidate")));
        }
        if scores[order[0]] < best.0 {
            best = (scores[order[0]], pop.row(order[0]).to_vec());
        }
        let elites = pop.select(Axis(0), &order[..config.num_elites(it)]);
        trace.push(order[..config.num_elites(it)].iter().map(|&i| scores[i]).sum::<f64>() / elites.nrows() as f64);
        mean = elites.mean_axis(Axis(0)).expect("at least two elites");
        std = elites.var_axis(Axis(0), 0.0).mapv(|v| v.max(CEM_VARIANCE_FLOOR).sqrt());
    }
    // The final fitted mean is a candidate too; it averages out the elites' spread.
    let final_mean = mean.insert_axis(Axis(0));
    let mean_score = score(final_mean.view())?;
    if mean_score.first().is_some_and(|&l| l < best.0) {
        best = (mean_score[0], final_mean.row(0).to_vec());
    }
    Ok(OptimizeResult {
        plan: best.1,
        loss: best.0,
        trace,
        aborted: false,
    })
}

/// First-order descent from a sample of the initial distribution.
pub fn grad_minimize<R, F>(
    init_mean: &[f64],
    init_std: &[f64],
    steps: usize,
    optimizer: &mut dyn Optimizer,
    rng: &mut R,
    loss_and_grad: F,
) -> Result<OptimizeResult>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_dim("initial std", init_mean.len(), init_std.len())?;
    let mut x: Vec<f64> = init_mean
        .iter()
        .zip(init_std)
        .map(|(&m, &s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut best = (f64::INFINITY, x.clone());
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grad) = loss_and_grad(&x)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok(OptimizeResult {
                plan: best.1,
                loss: best.0,
                trace,
                aborted: true,
            });
        }
        trace.push(loss);
        if loss < best.0 {
            best = (loss, x.clone());
        }
        if step < steps {
            optimizer.step(&mut x, &grad);
        }
    }
    Ok(OptimizeResult {
        plan: best.1,
        loss: best.0,
        trace,
        aborted: false,
    })
}

/// Search for the subgoals of `problem` with the configured optimizer.
pub fn optimize_plan<R: Rng + ?Sized>(problem: &PlanProblem, config: &PlannerConfig, rng: &mut R) -> Result<OptimizeResult> {
    let k = problem.num_subgoals();
    if k == 0 {
        let loss = problem.loss(&[])?;
        return Ok(OptimizeResult {
            plan: Vec::new(),
            loss,
            trace: Vec::new(),
            aborted: false,
        });
    }
    let (m, s) = problem.space.initial();
    let mean: Vec<f64> = m.iter().copied().cycle().take(k * m.len()).collect();
    let std: Vec<f64> = s.iter().copied().cycle().take(k * s.len()).collect();
    match config.optimizer {
        PlanOptimizer::Cem => cem_minimize(&mean, &std, &config.cem, rng, |pop| problem.score_population(pop)),
        kind => {
            let g = &config.grad;
            let mut opt: Box<dyn Optimizer> = match kind {
                PlanOptimizer::Adam => Box::new(Adam::with_lr(g.adam_lr)),
                PlanOptimizer::Sgd => Box::new(Sgd { learning_rate: g.sgd_lr }),
                _ => Box::new(RmsProp::new(g.rmsprop_lr)),
            };
            grad_minimize(&mean, &std, g.steps, opt.as_mut(), rng, |x| problem.loss_and_gradient(x))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub segment: usize,
    pub free_subgoals: usize,
    pub loss: f64,
    pub feasibility: Vec<f64>,
    /// Decoded subgoals of the whole remaining plan.
    pub subgoals: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub target: [f64; 2],
    pub target_valid: bool,
    pub steps: usize,
    pub end_state: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub k: usize,
    pub replans: Vec<ReplanRecord>,
    pub segments: Vec<SegmentRecord>,
    pub states: Vec<[f64; 2]>,
    pub final_distance: f64,
    pub success: bool,
}

impl EpisodeRecord {
    /// True when every subgoal the policy was sent to was a valid state.
    pub fn subgoals_valid(&self) -> bool {
        self.segments.iter().all(|s| s.target_valid)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Run one episode, replanning the remaining subgoals at the start of every
/// segment but the last and steering the policy toward the first of them.
pub fn execute_episode<R: Rng + ?Sized>(
    env: &EnvConfig,
    nets: &TdmNets,
    space: &dyn SubgoalSpace,
    config: &PlannerConfig,
    start: NavState,
    goal: NavState,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    config.validate()?;
    let schedule = config.schedule()?;
    let k = schedule.num_subgoals();
    let mut state = start;
    let mut states = vec![start.0];
    let mut replans = Vec::with_capacity(k);
    let mut segments = Vec::with_capacity(k + 1);
    for seg in 0..=k {
        let target = if seg < k {
            let problem = PlanProblem {
                value: nets,
                space,
                start: state,
                goal,
                schedule: &schedule.segments[seg..],
                lambda: config.lambda,
                norm: config.norm,
            };
            let result = optimize_plan(&problem, config, rng)?;
            let plan = ArrayView2::from_shape((1, result.plan.len()), &result.plan).expect("plan row");
            let feasibility = problem.feasibility(plan)?.row(0).to_vec();
            let waypoints = problem.waypoints(plan)?;
            let subgoals: Vec<[f64; 2]> = waypoints[1..waypoints.len() - 1].iter().map(|p| [p[[0, 0]], p[[0, 1]]]).collect();
            let first = subgoals[0];
            replans.push(ReplanRecord {
                segment: seg,
                free_subgoals: problem.num_subgoals(),
                loss: result.loss,
                feasibility,
                subgoals,
            });
            NavState(first)
        } else {
            goal
        };
        let steps = schedule.segments[seg];
        for i in 0..steps {
            state = env.step(state, nets.policy_action(state, target, steps - 1 - i)?);
            states.push(state.0);
        }
        segments.push(SegmentRecord {
            target: target.0,
            target_valid: env.valid_state(target.0),
            steps,
            end_state: state.0,
        });
    }
    Ok(EpisodeRecord {
        start: start.0,
        goal: goal.0,
        k,
        replans,
        segments,
        states,
        final_distance: distance(state, goal),
        success: env.success(state, goal),
    })
}

/// Plan in raw coordinates over the room box instead of the latent space.
pub fn plan_raw_ablation<R: Rng + ?Sized>(
    env: &EnvConfig,
    value: &dyn ValueFn,
    config: &PlannerConfig,
    start: NavState,
    goal: NavState,
    rng: &mut R,
) -> Result<(OptimizeResult, Vec<[f64; 2]>)> {
    let schedule = config.schedule()?;
    let space = RawSpace { bounds: env.center_bounds() };
    let problem = PlanProblem {
        value,
        space: &space,
        start,
        goal,
        schedule: &schedule.segments,
        lambda: 0.0,
        norm: config.norm,
    };
    let result = optimize_plan(&problem, config, rng)?;
    let subgoals = result.plan.chunks(2).map(|c| [c[0], c[1]]).map(|p| clamp_to(&space.bounds, p)).collect();
    Ok((result, subgoals))
}

fn clamp_to(b: &Rect, p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(b.x0, b.x1), p[1].clamp(b.y0, b.y1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Mutex;

    /// Identity latent space of a given width, decoding the first two coordinates.
    struct Identity(usize);

    impl SubgoalSpace for Identity {
        fn dim(&self) -> usize {
            self.0
        }
        fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
            Ok(z.slice(s![.., 0..2]).to_owned())
        }
        fn decode_vjp(&self, z: ArrayView2<f64>, up: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
            let mut dz = Array2::zeros(z.dim());
            dz.slice_mut(s![.., 0..2]).assign(&up);
            Ok((self.decode(z)?, dz))
        }
        fn uses_prior(&self) -> bool {
            true
        }
        fn initial(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![0.0; self.0], vec![1.0; self.0])
        }
    }

    struct Zero;

    impl ValueFn for Zero {
        fn values(&self, from: ArrayView2<f64>, _: ArrayView2<f64>, _: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; from.nrows()])
        }
        fn values_with_grads(&self, from: ArrayView2<f64>, _: ArrayView2<f64>, _: usize) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
            Ok((vec![0.0; from.nrows()], Array2::zeros(from.dim()), Array2::zeros(from.dim())))
        }
    }

    /// Records every call's first row and horizon.
    #[derive(Default)]
    struct Recorder(Mutex<Vec<([f64; 2], [f64; 2], usize)>>);

    impl ValueFn for Recorder {
        fn values(&self, from: ArrayView2<f64>, to: ArrayView2<f64>, t: usize) -> Result<Vec<f64>> {
            self.0.lock().unwrap().push(([from[[0, 0]], from[[0, 1]]], [to[[0, 0]], to[[0, 1]]], t));
            NegDistance.values(from, to, t)
        }
        fn values_with_grads(&self, from: ArrayView2<f64>, to: ArrayView2<f64>, t: usize) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
            NegDistance.values_with_grads(from, to, t)
        }
    }

    fn problem<'a>(value: &'a dyn ValueFn, space: &'a dyn SubgoalSpace, schedule: &'a [usize], lambda: f64, norm: Norm) -> PlanProblem<'a> {
        PlanProblem {
            value,
            space,
            start: NavState([0.0, 0.0]),
            goal: NavState([3.0, 4.0]),
            schedule,
            lambda,
            norm,
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(time_schedule(100, 3).unwrap().segments, vec![25; 4]);
        assert_eq!(time_schedule(600, 11).unwrap().segments, vec![50; 12]);
        assert_eq!(time_schedule(10, 2).unwrap().segments, vec![3, 3, 4]);
        assert_eq!(time_schedule(7, 0).unwrap().segments, vec![7]);
        assert!(time_schedule(3, 3).is_err());
        assert_eq!(time_schedule(4, 3).unwrap().segments, vec![1; 4]);
    }

    #[test]
    fn k_zero_feasibility_is_direct_value() {
        let space = Identity(2);
        let p = problem(&NegDistance, &space, &[100], 0.7, Norm::LInf);
        let f = p.feasibility(Array2::zeros((1, 0)).view()).unwrap();
        assert_eq!(f.row(0).to_vec(), vec![-5.0]);
        assert_eq!(p.loss(&[]).unwrap(), 5.0);
    }

    #[test]
    fn chained_entries_match_hand_computation() {
        let space = Identity(2);
        let p = problem(&NegDistance, &space, &[3, 3, 4], 0.0, Norm::L1);
        let plan = [1.0, 0.0, 1.0, 4.0];
        let f = p.feasibility(ndarray::aview2(&[plan])).unwrap();
        assert_eq!(f.row(0).to_vec(), vec![-1.0, -4.0, -2.0]);
        assert_eq!(p.loss(&plan).unwrap(), 7.0);
        let pinf = problem(&NegDistance, &space, &[3, 3, 4], 0.0, Norm::LInf);
        assert_eq!(pinf.loss(&plan).unwrap(), 4.0);
    }

    #[test]
    fn straight_line_waypoints_are_nearly_feasible_under_ideal_value() {
        // Ideal value: -max(0, |a - b| - reach) with reach proportional to time.
        struct Reach;
        impl ValueFn for Reach {
            fn values(&self, a: ArrayView2<f64>, b: ArrayView2<f64>, t: usize) -> Result<Vec<f64>> {
                let d = NegDistance.values(a, b, t)?;
                Ok(d.into_iter().map(|v| -((-v) - 0.15 * t as f64).max(0.0)).collect())
            }
            fn values_with_grads(&self, _: ArrayView2<f64>, _: ArrayView2<f64>, _: usize) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
                unreachable!()
            }
        }
        let space = Identity(2);
        let p = problem(&Reach, &space, &[25, 25, 25, 25], 0.0, Norm::LInf);
        let plan = [0.75, 1.0, 1.5, 2.0, 2.25, 3.0];
        assert!(p.loss(&plan).unwrap().abs() < 1e-12);
    }

    #[test]
    fn entry_depends_only_on_its_segment() {
        let rec = Recorder::default();
        let space = Identity(2);
        let p = problem(&rec, &space, &[5, 6, 7], 0.0, Norm::LInf);
        p.feasibility(ndarray::aview2(&[[1.0, 2.0, -1.0, 0.5]])).unwrap();
        let calls = rec.0.into_inner().unwrap();
        assert_eq!(
            calls,
            vec![([0.0, 0.0], [1.0, 2.0], 5), ([1.0, 2.0], [-1.0, 0.5], 6), ([-1.0, 0.5], [3.0, 4.0], 7)]
        );
    }

    #[test]
    fn zero_value_and_zero_lambda_give_zero_loss() {
        let space = Identity(3);
        let p = problem(&Zero, &space, &[10, 10, 10], 0.0, Norm::LInf);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            assert_eq!(p.loss(&z).unwrap(), 0.0);
        }
    }

    #[test]
    fn loss_is_linear_in_lambda() {
        let space = Identity(3);
        let plan = [0.5, 1.0, -2.0, 2.5, 0.0, 0.3];
        let at = |lambda| problem(&NegDistance, &space, &[10, 10, 10], lambda, Norm::LInf).loss(&plan).unwrap();
        let prior: f64 = plan.chunks(3).map(log_prior).sum();
        let (l1, l2) = (at(0.1), at(0.2));
        assert!(prior < 0.0);
        assert!((l2 - l1 - 0.1 * (-prior)).abs() < 1e-12);
        assert!((at(0.0) - at(0.1) - 0.1 * prior).abs() < 1e-12);
    }

    #[test]
    fn k_zero_loss_ignores_lambda() {
        let space = Identity(2);
        let a = problem(&NegDistance, &space, &[20], 0.0, Norm::LInf).loss(&[]).unwrap();
        let b = problem(&NegDistance, &space, &[20], 5.0, Norm::LInf).loss(&[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cem_elite_count() {
        assert_eq!(CemConfig::standard().num_elites(0), 50);
        let large = CemConfig::large();
        assert_eq!(large.num_elites(0), 2500);
        assert_eq!(large.num_elites(24), 2500);
        assert_eq!(large.num_elites(25), 100);
        let bad = CemConfig {
            population: 20,
            elite_frac: 0.05,
            ..CemConfig::standard()
        };
        assert!(bad.validate().is_err());
    }

    fn quadratic(target: &[f64]) -> impl Fn(ArrayView2<f64>) -> Result<Vec<f64>> + '_ {
        move |pop: ArrayView2<f64>| {
            Ok(pop
                .rows()
                .into_iter()
                .map(|r| r.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum())
                .collect())
        }
    }

    #[test]
    fn cem_recovers_quadratic_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let target: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let out = cem_minimize(&[0.0; 24], &[1.0; 24], &CemConfig::standard(), &mut rng, quadratic(&target)).unwrap();
        let err = out.plan.iter().zip(&target).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-2, "max error {err}");
        assert_eq!(out.trace.len(), 15);
        let non_increasing = out.trace.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(non_increasing >= 13, "trace {:?}", out.trace);
    }

    #[test]
    fn cem_variance_is_floored() {
        let flat = |pop: ArrayView2<f64>| Ok(vec![1.0; pop.nrows()]);
        let cfg = CemConfig {
            population: 40,
            iterations: 3,
            elite_frac: 0.05,
            late_elite_frac: None,
        };
        let out = cem_minimize(&[0.0; 2], &[1e-9; 2], &cfg, &mut ChaCha8Rng::seed_from_u64(0), flat).unwrap();
        assert_eq!(out.loss, 1.0);
        assert!(!out.aborted);
    }

    #[test]
    fn gradient_pulls_latents_to_prior_mode() {
        let space = Identity(3);
        let p = problem(&Zero, &space, &[10, 10], 0.5, Norm::LInf);
        let mut sgd = Sgd { learning_rate: 0.5 };
        let out = grad_minimize(&[2.0; 3], &[0.0; 3], 50, &mut sgd, &mut ChaCha8Rng::seed_from_u64(0), |x| p.loss_and_gradient(x)).unwrap();
        assert!(out.plan.iter().all(|v| v.abs() < 1e-3), "{:?}", out.plan);
    }

    #[test]
    fn grad_minimize_aborts_on_non_finite_loss() {
        let mut sgd = Sgd { learning_rate: 0.1 };
        let f = |x: &[f64]| Ok(if x[0] > 0.5 { (f64::NAN, vec![0.0]) } else { (x[0], vec![-1.0]) });
        let out = grad_minimize(&[0.0], &[0.0], 20, &mut sgd, &mut ChaCha8Rng::seed_from_u64(0), f).unwrap();
        assert!(out.aborted);
        assert_eq!(out.trace.len(), 6);
    }

    #[test]
    fn norm_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..0.0)).collect();
            let (inf, one) = (Norm::LInf.apply(&v), Norm::L1.apply(&v));
            assert!(inf <= one + 1e-12 && one <= n as f64 * inf + 1e-12);
        }
    }

    #[test]
    fn population_scoring_matches_sequential_and_single() {
        let space = Identity(2);
        let p = problem(&NegDistance, &space, &[5, 5, 5], 0.1, Norm::L1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pop = Array2::from_shape_fn((300, 4), |_| rng.gen_range(-3.0..3.0));
        let a = p.score_population(pop.view()).unwrap();
        let b = p.score_population_sequential(pop.view()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[123], p.loss(&pop.row(123).to_vec()).unwrap());
    }

    #[test]
    fn raw_space_clamps_and_masks_gradient() {
        let raw = RawSpace {
            bounds: Rect::new(-1.0, 1.0, -2.0, 2.0),
        };
        let z = ndarray::array![[1.5, 0.5]];
        let (x, dz) = raw.decode_vjp(z.view(), ndarray::array![[3.0, 4.0]].view()).unwrap();
        assert_eq!(x, ndarray::array![[1.0, 0.5]]);
        assert_eq!(dz, ndarray::array![[0.0, 4.0]]);
        assert_eq!(raw.initial(), (vec![0.0, 0.0], vec![1.0, 2.0]));
    }

    fn tiny_models(seed: u64) -> (EnvConfig, TdmNets, Vae) {
        use crate::tdm::{scaling_for, TdmConfig};
        use crate::vae::{Normalization, VaeConfig};
        let env = EnvConfig::nav2d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TdmConfig {
            hidden_sizes: vec![12, 12],
            ..TdmConfig::default()
        };
        let nets = TdmNets::new(&cfg, scaling_for(&env, &cfg), &mut rng).unwrap();
        let vcfg = VaeConfig {
            hidden_sizes: vec![10, 10],
            latent_dim: 3,
            ..VaeConfig::default()
        };
        let norm = Normalization {
            center: vec![0.0, 0.5],
            scale: vec![3.5, 3.0],
        };
        let vae = Vae::new(vcfg, norm, &mut rng).unwrap();
        (env, nets, vae)
    }

    #[test]
    fn plan_gradient_matches_finite_differences_through_real_models() {
        let (_, nets, vae) = tiny_models(30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for norm in [Norm::L1, Norm::LInf] {
            let p = PlanProblem {
                value: &nets,
                space: &vae,
                start: NavState([-2.5, 1.0]),
                goal: NavState([1.5, -2.5]),
                schedule: &[25, 25, 25, 25],
                lambda: 0.1,
                norm,
            };
            for _ in 0..5 {
                let z: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let (_, g) = p.loss_and_gradient(&z).unwrap();
                let h = 1e-6;
                for i in 0..z.len() {
                    let mut zp = z.clone();
                    zp[i] += h;
                    let mut zm = z.clone();
                    zm[i] -= h;
                    let fd = (p.loss(&zp).unwrap() - p.loss(&zm).unwrap()) / (2.0 * h);
                    let err = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-3);
                    assert!(err < 1e-3, "{norm:?} dim {i}: fd {fd} vs {}", g[i]);
                }
            }
        }
    }

    fn quick_config(k: usize) -> PlannerConfig {
        PlannerConfig {
            k,
            cem: CemConfig {
                population: 60,
                iterations: 3,
                elite_frac: 0.1,
                late_elite_frac: None,
            },
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn episode_replans_once_per_segment_but_the_last() {
        let (env, nets, vae) = tiny_models(40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let rec = execute_episode(&env, &nets, &vae, &quick_config(3), NavState([0.0, 1.0]), NavState([0.0, -2.5]), &mut rng).unwrap();
        assert_eq!(rec.replans.len(), 3);
        assert_eq!(rec.replans.iter().map(|r| r.free_subgoals).collect::<Vec<_>>(), vec![3, 2, 1]);
        assert_eq!(rec.replans.iter().map(|r| r.subgoals.len()).collect::<Vec<_>>(), vec![3, 2, 1]);
        assert_eq!(rec.segments.len(), 4);
        assert_eq!(rec.states.len(), 101);
        assert_eq!(rec.segments[3].target, [0.0, -2.5]);
        for (seg, replan) in rec.segments.iter().zip(&rec.replans) {
            assert_eq!(seg.target, replan.subgoals[0]);
            assert_eq!(replan.feasibility.len(), replan.free_subgoals + 1);
        }
        let back: EpisodeRecord = serde_json::from_str(&rec.to_json().unwrap()).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn k_zero_episode_is_plain_policy_rollout() {
        let (env, nets, vae) = tiny_models(50);
        let (s0, g) = (NavState([0.0, 1.0]), NavState([0.0, -2.5]));
        let rec = execute_episode(&env, &nets, &vae, &quick_config(0), s0, g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(rec.replans.is_empty());
        let mut s = s0;
        for i in 0..100 {
            s = env.step(s, nets.policy_action(s, g, 99 - i).unwrap());
        }
        assert_eq!(rec.states.last().unwrap(), &s.0);
    }

    #[test]
    fn raw_ablation_returns_clamped_subgoals() {
        let (env, nets, _) = tiny_models(60);
        let (out, subgoals) = plan_raw_ablation(&env, &nets, &quick_config(2), NavState([0.0, 1.0]), NavState([0.0, -2.5]), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.plan.len(), 4);
        assert_eq!(subgoals.len(), 2);
        let b = env.center_bounds();
        assert!(subgoals.iter().all(|p| b.contains(*p)));
    }
}
