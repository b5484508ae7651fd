//! Experiment configuration, artifact pipeline, evaluation and ablations.
//!
//! Every stage is keyed by a run seed. Randomness for each stage comes from a
//! separate ChaCha stream of that seed, so stages can be rerun independently
//! and produce the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, GoalRegion, NavState, StartRegion};
use crate::error::{Error, Result};
use crate::planner::{self, execute_episode, plan_raw_ablation, EpisodeRecord, Norm, PlanOptimizer, PlanProblem, PlannerConfig};
use crate::tdm::{self, TdmConfig, TdmNets, TrainLogRow};
use crate::vae::{self, log_prior, states_to_array, Vae, VaeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvPreset {
    Nav2d,
}

impl EnvPreset {
    pub fn build(self) -> EnvConfig {
        match self {
            EnvPreset::Nav2d => EnvConfig::nav2d(),
        }
    }
}

/// Dataset and model-selection settings for the VAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTraining {
    pub dataset_size: usize,
    pub held_out_size: usize,
    pub steps: usize,
    /// Models trained per run seed; the one with the lowest held-out loss is kept.
    pub candidates: usize,
}

impl Default for VaeTraining {
    fn default() -> Self {
        Self {
            dataset_size: 10_000,
            held_out_size: 2_000,
            steps: 40_000,
            candidates: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvPreset,
    pub seeds: Vec<u64>,
    /// Environment steps of TDM training.
    pub budget_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Evaluate on the hard configuration (pocket start, goal below the wall)
    /// in addition to uniform start/goal pairs.
    pub hard_eval: bool,
    pub tdm: TdmConfig,
    pub vae: VaeConfig,
    #[serde(default)]
    pub vae_training: VaeTraining,
    pub planner: PlannerConfig,
}

pub const PRESETS: [&str; 3] = ["nav2d", "nav2d-lambda-0.01", "nav2d-table1"];

impl ExperimentConfig {
    /// Named configurations. `nav2d` is sized for a single desktop core; `nav2d-table1`
    /// uses the full network sizes and budgets.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self {
            env: EnvPreset::Nav2d,
            seeds: vec![0, 1, 2],
            budget_steps: 70_000,
            eval_interval: 10_000,
            eval_episodes: 20,
            hard_eval: true,
            tdm: TdmConfig {
                hidden_sizes: vec![128, 128],
                eval_episodes: 50,
                ..TdmConfig::default()
            },
            vae: VaeConfig {
                kl_weight: 0.005,
                ..VaeConfig::default()
            },
            vae_training: VaeTraining::default(),
            planner: PlannerConfig::default(),
        };
        match name {
            "nav2d" => Ok(desk),
            "nav2d-lambda-0.01" => Ok(Self {
                planner: PlannerConfig {
                    lambda: 0.01,
                    ..desk.planner.clone()
                },
                ..desk
            }),
            "nav2d-table1" => Ok(Self {
                budget_steps: 400_000,
                eval_interval: 20_000,
                eval_episodes: 50,
                tdm: TdmConfig::default(),
                vae_training: VaeTraining {
                    candidates: 5,
                    ..VaeTraining::default()
                },
                ..desk
            }),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        if self.eval_interval == 0 || self.budget_steps < self.eval_interval {
            return Err(Error::InvalidConfig(format!(
                "budget_steps ({}) must be at least eval_interval ({}) and eval_interval positive",
                self.budget_steps, self.eval_interval
            )));
        }
        if self.eval_episodes == 0 {
            return Err(Error::InvalidConfig("eval_episodes must be positive".into()));
        }
        let v = &self.vae_training;
        if v.dataset_size < vae::MIN_DATASET || v.held_out_size == 0 || v.candidates == 0 {
            return Err(Error::InvalidConfig(format!(
                "vae_training needs dataset_size >= {}, held_out_size > 0, candidates > 0",
                vae::MIN_DATASET
            )));
        }
        if self.planner.horizon != self.tdm.horizon {
            return Err(Error::InvalidConfig(format!(
                "planner.horizon ({}) must equal tdm.horizon ({})",
                self.planner.horizon, self.tdm.horizon
            )));
        }
        self.env.build().validate()?;
        self.tdm.validate()?;
        self.vae.validate()?;
        self.planner.validate()
    }

    fn tdm_config(&self) -> TdmConfig {
        TdmConfig {
            eval_interval: self.eval_interval,
            ..self.tdm.clone()
        }
    }
}

/// Independent random stream `stream` of run seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_DATA: u64 = 1;
const STREAM_VAE: u64 = 2;
const STREAM_TDM: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_PROBES: u64 = 5;
const STREAM_PLAN: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub step: usize,
    pub method: String,
    /// `hard`, `uniform` or `reaching` (short-range probe during training).
    pub configuration: String,
    pub final_distance_mean: f64,
    pub success_rate: f64,
}

/// One statistic of one ablation arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub ablation: String,
    pub arm: String,
    pub statistic: String,
    pub value: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Trained models of one run seed.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub nets: TdmNets,
    pub vae: Vae,
}

/// Training and held-out state sets for the VAE.
pub fn collect_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<NavState>, Vec<NavState>)> {
    let env = cfg.env.build();
    let mut rng = stream_rng(seed, STREAM_DATA);
    let train = env.sample_valid_states(&mut rng, cfg.vae_training.dataset_size)?;
    let held = env.sample_valid_states(&mut rng, cfg.vae_training.held_out_size)?;
    Ok((train, held))
}

/// Train the configured number of candidate VAEs and keep the best on held-out loss.
pub fn train_vae_stage(cfg: &ExperimentConfig, seed: u64, train: &[NavState], held_out: &[NavState]) -> Result<(Vae, Vec<AblationRow>)> {
    let mut rng = stream_rng(seed, STREAM_VAE);
    let candidate_seeds: Vec<u64> = (0..cfg.vae_training.candidates).map(|_| rng.gen()).collect();
    let results = vae::train_vae_seeds(
        states_to_array(train).view(),
        states_to_array(held_out).view(),
        &cfg.vae,
        cfg.vae_training.steps,
        &candidate_seeds,
    )?;
    let best = vae::select_best(&results).expect("at least one candidate");
    let rows = results
        .iter()
        .enumerate()
        .map(|(i, r)| AblationRow {
            seed,
            ablation: "vae_selection".into(),
            arm: format!("candidate{i}"),
            statistic: if i == best { "held_out_loss_selected" } else { "held_out_loss" }.into(),
            value: r.held_out_loss,
        })
        .collect();
    Ok((results[best].trained.vae.clone(), rows))
}

pub fn train_tdm_stage(cfg: &ExperimentConfig, seed: u64) -> Result<(TdmNets, Vec<MetricsRow>)> {
    let env = cfg.env.build();
    let out = tdm::train(&env, &cfg.tdm_config(), cfg.budget_steps, &mut stream_rng(seed, STREAM_TDM))?;
    Ok((out.nets, training_rows(seed, &out.log)))
}

fn training_rows(seed: u64, log: &[TrainLogRow]) -> Vec<MetricsRow> {
    log.iter()
        .map(|r| MetricsRow {
            seed,
            step: r.step,
            method: "tdm-train".into(),
            configuration: "reaching".into(),
            final_distance_mean: r.eval_distance_mean,
            success_rate: r.eval_success_rate,
        })
        .collect()
}

/// Data, VAE and TDM for one seed, in memory.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let (train, held) = collect_data(cfg, seed)?;
    let (vae, _) = train_vae_stage(cfg, seed, &train, &held)?;
    let (nets, _) = train_tdm_stage(cfg, seed)?;
    Ok(SeedArtifacts { seed, nets, vae })
}

/// Start/goal pairs for evaluation, shared by every method of a seed.
pub fn episode_pairs(env: &EnvConfig, seed: u64, n: usize, hard: bool) -> Result<Vec<(NavState, NavState)>> {
    let mut rng = stream_rng(seed, STREAM_EVAL + if hard { 0 } else { 100 });
    (0..n)
        .map(|_| {
            if hard {
                Ok((env.reset(&mut rng, StartRegion::CenterBox)?, env.sample_goal(&mut rng, GoalRegion::BelowWall)?))
            } else {
                Ok((env.reset(&mut rng, StartRegion::UniformValid)?, env.sample_goal(&mut rng, GoalRegion::UniformValid)?))
            }
        })
        .collect()
}

/// Mean final distance and success rate of `rollout` over `pairs`.
///
/// On the hard configuration success also requires ending below the wall; on
/// uniform pairs it is distance alone.
pub fn score_rollouts<F>(env: &EnvConfig, pairs: &[(NavState, NavState)], hard: bool, mut rollout: F) -> Result<(f64, f64)>
where
    F: FnMut(usize, NavState, NavState) -> Result<NavState>,
{
    if pairs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut dist = 0.0;
    let mut hits = 0usize;
    for (i, &(s0, g)) in pairs.iter().enumerate() {
        let end = rollout(i, s0, g)?;
        let d = crate::env::distance(end, g);
        dist += d;
        let ok = if hard { env.success(end, g) } else { d <= 2.0 * env.agent_radius };
        hits += ok as usize;
    }
    Ok((dist / pairs.len() as f64, hits as f64 / pairs.len() as f64))
}

fn planner_rng(seed: u64, salt: u64, episode: usize) -> ChaCha8Rng {
    stream_rng(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15), STREAM_PLAN + episode as u64)
}

/// Episodes of the planner with `planner` settings over `pairs`, with per-episode records.
pub fn run_episodes(
    env: &EnvConfig,
    art: &SeedArtifacts,
    space: &dyn planner::SubgoalSpace,
    planner: &PlannerConfig,
    pairs: &[(NavState, NavState)],
    salt: u64,
) -> Result<Vec<EpisodeRecord>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(s0, g))| execute_episode(env, &art.nets, space, planner, s0, g, &mut planner_rng(art.seed, salt, i)))
        .collect()
}

fn summarize(env: &EnvConfig, pairs: &[(NavState, NavState)], records: &[EpisodeRecord], hard: bool) -> Result<(f64, f64)> {
    score_rollouts(env, pairs, hard, |i, _, _| Ok(NavState(*records[i].states.last().expect("start state recorded"))))
}

pub fn method_tag(planner: &PlannerConfig) -> String {
    if planner.k == 0 {
        format!("tdm-{}", planner.horizon)
    } else {
        format!("leap-k{}", planner.k)
    }
}

/// LEAP with the configured `K` and the `K = 0` baseline on the hard and uniform configurations.
pub fn evaluate(cfg: &ExperimentConfig, art: &SeedArtifacts) -> Result<Vec<MetricsRow>> {
    let env = cfg.env.build();
    let mut rows = Vec::new();
    let mut configurations = vec![false];
    if cfg.hard_eval {
        configurations.insert(0, true);
    }
    let mut ks = vec![cfg.planner.k];
    if cfg.planner.k != 0 {
        ks.push(0);
    }
    for hard in configurations {
        let pairs = episode_pairs(&env, art.seed, cfg.eval_episodes, hard)?;
        for &k in &ks {
            let planner = PlannerConfig { k, ..cfg.planner.clone() };
            let records = run_episodes(&env, art, &art.vae, &planner, &pairs, 0)?;
            let (d, s) = summarize(&env, &pairs, &records, hard)?;
            rows.push(MetricsRow {
                seed: art.seed,
                step: cfg.budget_steps,
                method: method_tag(&planner),
                configuration: if hard { "hard" } else { "uniform" }.into(),
                final_distance_mean: d,
                success_rate: s,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Norm,
    Optimizer,
    Lambda,
    RawSpace,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Norm => "norm",
            AblationKind::Optimizer => "optimizer",
            AblationKind::Lambda => "lambda",
            AblationKind::RawSpace => "raw_space",
        }
    }
}

pub const LAMBDA_SWEEP: [f64; 5] = [0.0, 0.0001, 0.01, 0.1, 1.0];
pub const OPTIMIZER_PROBES: usize = 50;

fn row(seed: u64, kind: AblationKind, arm: impl Into<String>, statistic: &str, value: f64) -> AblationRow {
    AblationRow {
        seed,
        ablation: kind.name().into(),
        arm: arm.into(),
        statistic: statistic.into(),
        value,
    }
}

fn norm_name(n: Norm) -> &'static str {
    match n {
        Norm::LInf => "l_inf",
        Norm::L1 => "l1",
    }
}

fn optimizer_name(o: PlanOptimizer) -> &'static str {
    match o {
        PlanOptimizer::Cem => "cem",
        PlanOptimizer::Adam => "adam",
        PlanOptimizer::Sgd => "sgd",
        PlanOptimizer::Rmsprop => "rmsprop",
    }
}

/// Hard-configuration episodes of one planner arm: success rate, mean final distance.
pub fn hard_arm(cfg: &ExperimentConfig, art: &SeedArtifacts, space: &dyn planner::SubgoalSpace, planner: &PlannerConfig) -> Result<(f64, f64)> {
    let env = cfg.env.build();
    let pairs = episode_pairs(&env, art.seed, cfg.eval_episodes, true)?;
    let records = run_episodes(&env, art, space, planner, &pairs, 0)?;
    let (d, s) = summarize(&env, &pairs, &records, true)?;
    Ok((s, d))
}

fn problem<'a>(art: &'a SeedArtifacts, planner: &PlannerConfig, schedule: &'a [usize], start: NavState, goal: NavState) -> PlanProblem<'a> {
    PlanProblem {
        value: &art.nets,
        space: &art.vae,
        start,
        goal,
        schedule,
        lambda: planner.lambda,
        norm: planner.norm,
    }
}

/// Final plan loss of `planner` (from the initial state, no execution) on each probe pair.
pub fn final_plan_losses(art: &SeedArtifacts, planner: &PlannerConfig, probes: &[(NavState, NavState)], salt: u64) -> Result<Vec<f64>> {
    let schedule = planner.schedule()?;
    probes
        .iter()
        .enumerate()
        .map(|(i, &(s0, g))| {
            let p = problem(art, planner, &schedule.segments, s0, g);
            Ok(planner::optimize_plan(&p, planner, &mut planner_rng(art.seed, salt, i))?.loss)
        })
        .collect()
}

/// Mean of `sum_k log p(z_k)` over chosen plans and mean feasibility entry, over `pairs`.
pub fn prior_and_feasibility(art: &SeedArtifacts, planner: &PlannerConfig, pairs: &[(NavState, NavState)]) -> Result<(f64, f64)> {
    let schedule = planner.schedule()?;
    let (mut prior, mut feas, mut entries) = (0.0, 0.0, 0usize);
    for (i, &(s0, g)) in pairs.iter().enumerate() {
        let p = problem(art, planner, &schedule.segments, s0, g);
        let out = planner::optimize_plan(&p, planner, &mut planner_rng(art.seed, 10, i))?;
        prior += out.plan.chunks(art.vae.latent_dim()).map(log_prior).sum::<f64>();
        let row = ndarray::ArrayView2::from_shape((1, out.plan.len()), &out.plan).expect("plan row");
        let f = p.feasibility(row)?;
        feas += f.sum();
        entries += f.len();
    }
    let n = pairs.len().max(1) as f64;
    Ok((prior / n, feas / entries.max(1) as f64))
}

/// Fraction of planned subgoals that are valid states, for latent and raw-state planning.
pub fn subgoal_validity(cfg: &ExperimentConfig, art: &SeedArtifacts, pairs: &[(NavState, NavState)]) -> Result<(f64, f64)> {
    let env = cfg.env.build();
    let schedule = cfg.planner.schedule()?;
    let (mut latent_ok, mut raw_ok, mut total) = (0usize, 0usize, 0usize);
    for (i, &(s0, g)) in pairs.iter().enumerate() {
        let p = problem(art, &cfg.planner, &schedule.segments, s0, g);
        let latent = planner::optimize_plan(&p, &cfg.planner, &mut planner_rng(art.seed, 20, i))?;
        for z in latent.plan.chunks(art.vae.latent_dim()) {
            latent_ok += env.valid_state(art.vae.decode_state(z)?.0) as usize;
        }
        let (_, raw) = plan_raw_ablation(&env, &art.nets, &cfg.planner, s0, g, &mut planner_rng(art.seed, 21, i))?;
        raw_ok += raw.iter().filter(|p| env.valid_state(**p)).count();
        total += raw.len();
    }
    let total = total.max(1) as f64;
    Ok((latent_ok as f64 / total, raw_ok as f64 / total))
}

pub fn ablate(cfg: &ExperimentConfig, art: &SeedArtifacts, kind: AblationKind) -> Result<Vec<AblationRow>> {
    let env = cfg.env.build();
    let seed = art.seed;
    let mut rows = Vec::new();
    let push_arm = |rows: &mut Vec<AblationRow>, arm: &str, (s, d): (f64, f64)| {
        rows.push(row(seed, kind, arm, "success_rate", s));
        rows.push(row(seed, kind, arm, "final_distance_mean", d));
    };
    match kind {
        AblationKind::Norm => {
            for norm in [Norm::LInf, Norm::L1] {
                let planner = PlannerConfig { norm, ..cfg.planner.clone() };
                push_arm(&mut rows, norm_name(norm), hard_arm(cfg, art, &art.vae, &planner)?);
            }
        }
        AblationKind::Optimizer => {
            let probes = probe_pairs(&env, seed, OPTIMIZER_PROBES)?;
            let arms = [PlanOptimizer::Cem, PlanOptimizer::Adam, PlanOptimizer::Sgd, PlanOptimizer::Rmsprop];
            let mut cem = Vec::new();
            for (a, &opt) in arms.iter().enumerate() {
                let planner = PlannerConfig {
                    optimizer: opt,
                    ..cfg.planner.clone()
                };
                let losses = final_plan_losses(art, &planner, &probes, 1 + a as u64)?;
                let name = optimizer_name(opt);
                rows.push(row(seed, kind, name, "final_plan_loss_mean", losses.iter().sum::<f64>() / losses.len() as f64));
                if a == 0 {
                    cem = losses;
                } else {
                    let wins = cem.iter().zip(&losses).filter(|(c, o)| c <= o).count();
                    rows.push(row(seed, kind, name, "cem_not_worse_fraction", wins as f64 / probes.len() as f64));
                }
                push_arm(&mut rows, name, hard_arm(cfg, art, &art.vae, &planner)?);
            }
        }
        AblationKind::Lambda => {
            let pairs = episode_pairs(&env, seed, cfg.eval_episodes, true)?;
            for &lambda in &LAMBDA_SWEEP {
                let planner = PlannerConfig { lambda, ..cfg.planner.clone() };
                let (prior, feas) = prior_and_feasibility(art, &planner, &pairs)?;
                let (s, _) = hard_arm(cfg, art, &art.vae, &planner)?;
                let arm = format!("{lambda}");
                rows.push(row(seed, kind, arm.clone(), "log_prior_sum_mean", prior));
                rows.push(row(seed, kind, arm.clone(), "feasibility_entry_mean", feas));
                rows.push(row(seed, kind, arm, "success_rate", s));
            }
        }
        AblationKind::RawSpace => {
            let pairs = episode_pairs(&env, seed, cfg.eval_episodes, true)?;
            let (latent_valid, raw_valid) = subgoal_validity(cfg, art, &pairs)?;
            let raw_space = planner::RawSpace { bounds: env.center_bounds() };
            rows.push(row(seed, kind, "latent", "subgoal_valid_rate", latent_valid));
            push_arm(&mut rows, "latent", hard_arm(cfg, art, &art.vae, &cfg.planner)?);
            rows.push(row(seed, kind, "raw", "subgoal_valid_rate", raw_valid));
            push_arm(&mut rows, "raw", hard_arm(cfg, art, &raw_space, &cfg.planner)?);
        }
    }
    Ok(rows)
}

/// Uniformly drawn start/goal pairs for optimizer probes.
pub fn probe_pairs(env: &EnvConfig, seed: u64, n: usize) -> Result<Vec<(NavState, NavState)>> {
    let mut rng = stream_rng(seed, STREAM_PROBES);
    (0..n)
        .map(|_| Ok((env.reset(&mut rng, StartRegion::UniformValid)?, env.sample_goal(&mut rng, GoalRegion::UniformValid)?)))
        .collect()
}

/// Files of a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_states(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("seed{seed}_train.csv"))
    }

    pub fn held_out_states(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("seed{seed}_held_out.csv"))
    }

    pub fn vae(&self, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("vae_seed{seed}.json"))
    }

    pub fn tdm(&self, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("tdm_seed{seed}.json"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifest_{command}.json"))
    }

    pub fn episode(&self, seed: u64) -> PathBuf {
        self.root.join("episodes").join(format!("plan_demo_seed{seed}.json"))
    }

    fn require(path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact(path.display().to_string()))
        }
    }

    pub fn load_states(&self, seed: u64) -> Result<(Vec<NavState>, Vec<NavState>)> {
        let (t, h) = (self.train_states(seed), self.held_out_states(seed));
        Self::require(&t)?;
        Self::require(&h)?;
        Ok((vae::read_states_csv(&t)?, vae::read_states_csv(&h)?))
    }

    pub fn load_artifacts(&self, seed: u64) -> Result<SeedArtifacts> {
        let (v, t) = (self.vae(seed), self.tdm(seed));
        Self::require(&v)?;
        Self::require(&t)?;
        let nets: TdmNets = serde_json::from_str(&fs::read_to_string(&t)?)?;
        Ok(SeedArtifacts {
            seed,
            nets,
            vae: Vae::load_json(&v)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// A subcommand's work, run against a resolved config and run directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CollectData,
    TrainVae,
    TrainTdm,
    Evaluate,
    Ablate(AblationKind),
    PlanDemo,
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Command::CollectData => "collect-data".into(),
            Command::TrainVae => "train-vae".into(),
            Command::TrainTdm => "train-tdm".into(),
            Command::Evaluate => "evaluate".into(),
            Command::Ablate(k) => format!("ablate-{}", k.name()),
            Command::PlanDemo => "plan-demo".into(),
        }
    }
}

/// Run `command` for every seed of `cfg`, writing outputs and a manifest under `layout`.
/// Returns the paths written, relative to the run directory.
pub fn run_command(cfg: &ExperimentConfig, layout: &RunLayout, command: Command) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut outputs = Vec::new();
    match command {
        Command::CollectData => {
            for &seed in &cfg.seeds {
                let (train, held) = collect_data(cfg, seed)?;
                for (path, states) in [(layout.train_states(seed), &train), (layout.held_out_states(seed), &held)] {
                    fs::create_dir_all(path.parent().expect("nested path"))?;
                    vae::write_states_csv(&path, states)?;
                    outputs.push(path);
                }
            }
        }
        Command::TrainVae => {
            let mut rows = Vec::new();
            let mut models = Vec::new();
            for &seed in &cfg.seeds {
                let (train, held) = layout.load_states(seed)?;
                let (vae, r) = train_vae_stage(cfg, seed, &train, &held)?;
                rows.extend(r);
                models.push((seed, vae));
            }
            for (seed, vae) in models {
                let path = layout.vae(seed);
                fs::create_dir_all(path.parent().expect("nested path"))?;
                vae.save_json(&path)?;
                outputs.push(path);
            }
            let path = layout.metrics("vae_selection");
            write_csv(&path, &rows)?;
            outputs.push(path);
        }
        Command::TrainTdm => {
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (nets, r) = train_tdm_stage(cfg, seed)?;
                rows.extend(r);
                let path = layout.tdm(seed);
                write_json_file(&path, &nets)?;
                outputs.push(path);
            }
            let path = layout.metrics("train_tdm");
            write_csv(&path, &rows)?;
            outputs.push(path);
        }
        Command::Evaluate => {
            let arts = load_all(cfg, layout)?;
            let mut rows = Vec::new();
            for art in &arts {
                rows.extend(evaluate(cfg, art)?);
            }
            let path = layout.metrics("evaluate");
            write_csv(&path, &rows)?;
            outputs.push(path);
        }
        Command::Ablate(kind) => {
            let arts = load_all(cfg, layout)?;
            let mut rows = Vec::new();
            for art in &arts {
                rows.extend(ablate(cfg, art, kind)?);
            }
            let path = layout.metrics(&format!("ablate_{}", kind.name()));
            write_csv(&path, &rows)?;
            outputs.push(path);
        }
        Command::PlanDemo => {
            let env = cfg.env.build();
            let arts = load_all(cfg, layout)?;
            for art in &arts {
                let pairs = episode_pairs(&env, art.seed, 1, true)?;
                let rec = run_episodes(&env, art, &art.vae, &cfg.planner, &pairs, 0)?.remove(0);
                let path = layout.episode(art.seed);
                write_json_file(&path, &rec)?;
                outputs.push(path);
            }
        }
    }
    let manifest = Manifest {
        command: command.name(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        seeds: cfg.seeds.clone(),
        config: cfg.clone(),
        outputs: outputs
            .iter()
            .map(|p| p.strip_prefix(&layout.root).unwrap_or(p).display().to_string())
            .collect(),
    };
    let path = layout.manifest(&command.name());
    write_json_file(&path, &manifest)?;
    outputs.push(path);
    Ok(outputs)
}

fn load_all(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Vec<SeedArtifacts>> {
    cfg.seeds.iter().map(|&s| layout.load_artifacts(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        }
        assert!(ExperimentConfig::preset("ant").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ExperimentConfig::preset("nav2d").unwrap();
        let no_seeds = ExperimentConfig { seeds: vec![], ..base.clone() };
        assert!(no_seeds.validate().is_err());
        let short = ExperimentConfig {
            budget_steps: 10,
            ..base.clone()
        };
        assert!(short.validate().is_err());
        let text = base.to_toml().replace("kl_weight", "kl_weigth");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn teleporting_and_stationary_mocks() {
        let env = EnvConfig::nav2d();
        let pairs = episode_pairs(&env, 3, 10, true).unwrap();
        let (d, s) = score_rollouts(&env, &pairs, true, |_, _, g| Ok(g)).unwrap();
        assert_eq!((d, s), (0.0, 1.0));
        let (d, s) = score_rollouts(&env, &pairs, true, |_, s0, _| Ok(s0)).unwrap();
        assert_eq!(s, 0.0);
        assert!(d > 1.0);
    }

    #[test]
    fn hard_pairs_come_from_the_hard_regions() {
        let env = EnvConfig::nav2d();
        let pocket = env.pocket();
        for (s0, g) in episode_pairs(&env, 0, 50, true).unwrap() {
            assert!(pocket.contains(s0.0));
            assert!(g.0[1] < env.walls.bar.y0);
        }
        assert_eq!(episode_pairs(&env, 7, 5, false).unwrap(), episode_pairs(&env, 7, 5, false).unwrap());
    }

    #[test]
    fn method_tags() {
        let p = PlannerConfig::default();
        assert_eq!(method_tag(&p), "leap-k3");
        assert_eq!(method_tag(&PlannerConfig { k: 0, ..p }), "tdm-100");
    }

    #[test]
    fn streams_are_independent() {
        let a: u64 = stream_rng(5, 1).gen();
        let b: u64 = stream_rng(5, 2).gen();
        let c: u64 = stream_rng(5, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
