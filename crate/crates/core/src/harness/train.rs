use crate::error::{Error, Result};
use crate::layer::SamLayer;
use crate::losses::LossBreakdown;
use crate::routers::RoutingDecision;
use crate::sim::{comm_cost, load_stats, plan_dispatch};
use crate::tensor::Rng;

use super::adam::Adam;
use super::config::ExperimentConfig;
use super::objective::{evaluate, LossSettings};
use super::task::{MixtureTask, TaskBatch};

/// One row of training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub losses: LossBreakdown,
    pub comm_messages: u64,
    pub comm_bytes: u64,
    pub dropped_fraction: f64,
    pub expert_entropy: f64,
    pub flops_per_token: u64,
    pub sparsity_ratio: f64,
}

/// Routes the batch, clips to expert capacity, backpropagates the full
/// objective and applies one Adam update.
pub fn train_step(
    model: &mut SamLayer,
    batch: &TaskBatch,
    opt: &mut Adam,
    cfg: &ExperimentConfig,
    rng: &mut Rng,
    step: usize,
) -> Result<StepMetrics> {
    let decisions: Vec<RoutingDecision> = batch
        .inputs
        .iter()
        .map(|x| model.route(x, rng, true))
        .collect::<Result<_>>()?;
    let plan = plan_dispatch(&decisions, &model.topo, cfg.capacity_factor)?;
    let drops: Vec<Vec<bool>> = decisions
        .iter()
        .enumerate()
        .map(|(t, d)| plan.dropped_mask(t, d))
        .collect();
    let settings = LossSettings::new(cfg.loss_weights(), cfg.group_nll_mode);
    let mut grads = model.params.zeros_like();
    let eval = evaluate(model, batch, &decisions, &drops, &settings, Some(&mut grads))?;
    if !eval.losses.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}: {:?}", eval.losses)));
    }
    if !grads.max_abs().is_finite() {
        return Err(Error::NonFinite(format!("gradient at step {step}")));
    }
    opt.update(&mut model.params, &grads);
    if !model.params.max_abs().is_finite() {
        return Err(Error::NonFinite(format!("parameters after step {step}")));
    }
    let comm = comm_cost(&decisions, &model.topo, &cfg.comm_model(), cfg.router);
    let entropy = load_stats(&plan, &model.topo).map_or(0.0, |s| s.entropy);
    Ok(StepMetrics {
        step,
        losses: eval.losses,
        comm_messages: comm.cross_device_messages,
        comm_bytes: comm.cross_device_bytes,
        dropped_fraction: plan.dropped_fraction(),
        expert_entropy: entropy,
        flops_per_token: cfg.flops_per_token(),
        sparsity_ratio: cfg.sparsity_ratio(),
    })
}

/// Mean squared error over a batch at inference (no noise, no capacity).
pub fn eval_loss(model: &SamLayer, batch: &TaskBatch) -> Result<f64> {
    let mut rng = Rng::new(0);
    let mut total = 0.0;
    for (x, y) in batch.inputs.iter().zip(&batch.targets) {
        let (out, _, _) = model.forward(x, &mut rng, false)?;
        total += out.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (batch.len() * model.d_model()) as f64)
}

// Independent streams derived from the seed.
const STREAM_MODEL: u64 = 1;
const STREAM_TASK: u64 = 2;
const STREAM_DATA: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_NOISE: u64 = 5;

/// Model, optimizer and data streams of one run.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub model: SamLayer,
    pub opt: Adam,
    pub task: MixtureTask,
    data_rng: Rng,
    noise_rng: Rng,
    step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub metrics: Vec<StepMetrics>,
    pub final_eval_loss: f64,
    pub seed: u64,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let model = build_model(cfg, &mut root.fork(STREAM_MODEL))?;
        let task = MixtureTask::new(
            cfg.n_clusters,
            cfg.input_dim,
            cfg.d_model,
            cfg.center_scale,
            cfg.noise_std,
            &mut root.fork(STREAM_TASK),
        )?;
        let opt = Adam::new(&model.params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            task,
            data_rng: root.fork(STREAM_DATA),
            noise_rng: root.fork(STREAM_NOISE),
            step: 0,
        })
    }

    pub fn next_batch(&mut self) -> TaskBatch {
        self.task.sample(self.cfg.batch_size, &mut self.data_rng)
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch();
        let m = train_step(
            &mut self.model,
            &batch,
            &mut self.opt,
            &self.cfg,
            &mut self.noise_rng,
            self.step,
        )?;
        self.step += 1;
        Ok(m)
    }

    /// Held-out set drawn from its own stream; identical for every config
    /// sharing a seed and task parameters.
    pub fn eval_batch(&self) -> TaskBatch {
        let mut rng = Rng::new(self.cfg.seed).fork(STREAM_EVAL);
        self.task.sample(self.cfg.eval_size, &mut rng)
    }

    pub fn eval_loss(&self) -> Result<f64> {
        let b = self.eval_batch();
        if b.is_empty() {
            return Ok(f64::NAN);
        }
        eval_loss(&self.model, &b)
    }

    pub fn run(mut self) -> Result<RunSummary> {
        self.run_with(|_| {})
    }

    /// Runs all configured steps, handing each metrics row to `on_step`.
    pub fn run_with(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<RunSummary> {
        let mut metrics = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let m = self.step()?;
            on_step(&m);
            metrics.push(m);
        }
        Ok(RunSummary {
            metrics,
            final_eval_loss: self.eval_loss()?,
            seed: self.cfg.seed,
        })
    }
}

pub fn build_model(cfg: &ExperimentConfig, rng: &mut Rng) -> Result<SamLayer> {
    SamLayer::init(
        cfg.router,
        cfg.topology()?,
        cfg.k,
        cfg.d_model,
        cfg.d_ffn(),
        cfg.router_init_std,
        cfg.noise_scale,
        rng,
    )
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    Experiment::new(cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routers::RouterKind;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            d_model: 4,
            input_dim: 4,
            d_ffn_base: 8,
            n_groups: 2,
            experts_per_group: 2,
            k: 2,
            batch_size: 16,
            steps: 20,
            n_clusters: 3,
            eval_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let cfg = ExperimentConfig { lr: 0.0, ..tiny() };
        let mut exp = Experiment::new(&cfg).unwrap();
        let before = exp.model.params.clone();
        for _ in 0..3 {
            exp.step().unwrap();
        }
        assert_eq!(exp.model.params, before);
    }

    #[test]
    fn runs_are_bit_identical() {
        for router in RouterKind::ALL {
            let k = if router == RouterKind::Switch { 1 } else { 2 };
            let cfg = ExperimentConfig { router, k, ..tiny() };
            let a = run_experiment(&cfg).unwrap();
            let b = run_experiment(&cfg).unwrap();
            assert_eq!(a, b, "{router}");
        }
    }

    #[test]
    fn metrics_bookkeeping() {
        let cfg = tiny();
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.metrics.len(), cfg.steps);
        for m in &r.metrics {
            assert_eq!(m.flops_per_token, 4 * 2 * 4 * 4);
            assert_eq!(m.sparsity_ratio, 2.0);
            assert!(m.losses.total.is_finite());
        }
    }

    #[test]
    fn single_expert_fits_noise_free_linear_task() {
        // one cluster far from the origin keeps most ReLUs in their linear
        // region, so the map is learnable
        let cfg = ExperimentConfig {
            d_model: 4,
            input_dim: 4,
            d_ffn_base: 32,
            n_groups: 1,
            experts_per_group: 1,
            k: 1,
            router: RouterKind::Switch,
            n_clusters: 1,
            noise_std: 0.0,
            lr: 1e-2,
            batch_size: 32,
            steps: 2000,
            alpha_balance: 0.0,
            alpha_align: 0.0,
            capacity_factor: 2.0,
            eval_size: 256,
            seed: 1,
            ..Default::default()
        };
        let r = run_experiment(&cfg).unwrap();
        assert!(r.final_eval_loss < 1e-3, "{}", r.final_eval_loss);
    }
}
