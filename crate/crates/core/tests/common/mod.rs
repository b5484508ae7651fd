use leap::harness::{ExperimentConfig, VaeTraining};
use leap::planner::CemConfig;

/// A configuration small enough to run the full pipeline in a few seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("nav2d").unwrap();
    cfg.seeds = vec![0, 1];
    cfg.budget_steps = 600;
    cfg.eval_interval = 300;
    cfg.eval_episodes = 2;
    cfg.tdm.hidden_sizes = vec![16, 16];
    cfg.tdm.batch_size = 16;
    cfg.tdm.eval_episodes = 2;
    cfg.vae.hidden_sizes = vec![16];
    cfg.vae_training = VaeTraining {
        dataset_size: 1000,
        held_out_size: 50,
        steps: 50,
        candidates: 2,
    };
    cfg.planner.cem = CemConfig {
        population: 40,
        iterations: 2,
        elite_frac: 0.1,
        late_elite_frac: None,
    };
    cfg.planner.grad.steps = 3;
    cfg
}
