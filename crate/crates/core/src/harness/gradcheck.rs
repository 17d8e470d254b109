//! Central-difference check of the analytic gradients.
//!
//! Routing selections, logit noise and capacity drops are frozen at the
//! unperturbed point. A perturbation that would change a selection, flip a
//! ReLU or move a hinge across its kink is excluded and counted.

use crate::error::{Error, Result};
use crate::layer::{LayerParams, SamLayer};
use crate::losses::GroupNllMode;
use crate::routers::{reroute, RoutingDecision};
use crate::sim::plan_dispatch;
use crate::tensor::Rng;

use super::config::ExperimentConfig;
use super::objective::{evaluate, LossSettings};
use super::task::TaskBatch;
use super::train::Experiment;

/// Largest model the checker accepts.
pub const MAX_PARAMS: usize = 10_000;
/// Tokens used per check.
pub const CHECK_TOKENS: usize = 4;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub const COMPONENTS: [&str; 4] = ["task", "align", "balance_group", "balance_expert"];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `total` or one of [`COMPONENTS`].
    pub objective: String,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.blocks.iter().map(|b| b.excluded).sum()
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.checked() > 0 && self.max_rel_error() < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Frozen routing state for a batch.
pub struct FrozenRouting {
    pub templates: Vec<RoutingDecision>,
    pub drops: Vec<Vec<bool>>,
}

impl FrozenRouting {
    pub fn new(model: &SamLayer, batch: &TaskBatch, capacity_factor: f64, rng: &mut Rng) -> Result<Self> {
        let templates: Vec<RoutingDecision> = batch
            .inputs
            .iter()
            .map(|x| model.route(x, rng, true))
            .collect::<Result<_>>()?;
        let plan = plan_dispatch(&templates, &model.topo, capacity_factor)?;
        let drops = templates
            .iter()
            .enumerate()
            .map(|(t, d)| plan.dropped_mask(t, d))
            .collect();
        Ok(Self { templates, drops })
    }

    fn selections_hold(&self, model: &SamLayer, batch: &TaskBatch) -> Result<bool> {
        for (x, tpl) in batch.inputs.iter().zip(&self.templates) {
            let fresh = reroute(&model.params.router, &model.topo, x, tpl)?;
            if fresh.selected_experts != tpl.selected_experts
                || fresh.selected_group != tpl.selected_group
            {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Checks `settings`' objective over the parameter blocks selected by
/// `block_filter`. `corrupt` may alter the analytic gradient before
/// comparison.
pub fn grad_check(
    model: &SamLayer,
    batch: &TaskBatch,
    routing: &FrozenRouting,
    settings: &LossSettings,
    eps: f64,
    block_filter: impl Fn(usize) -> bool,
    corrupt: Option<&dyn Fn(&mut LayerParams)>,
) -> Result<Vec<BlockReport>> {
    let mut analytic = model.params.zeros_like();
    let base = evaluate(
        model,
        batch,
        &routing.templates,
        &routing.drops,
        settings,
        Some(&mut analytic),
    )?;
    if let Some(f) = corrupt {
        f(&mut analytic);
    }
    let names: Vec<String> = model.params.blocks().into_iter().map(|(n, _)| n).collect();
    let mut reports = Vec::new();
    let mut probe = model.clone();
    for (b, name) in names.into_iter().enumerate() {
        if !block_filter(b) {
            continue;
        }
        let mut rep = BlockReport {
            name,
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        let len = model.params.blocks()[b].1.data().len();
        for j in 0..len {
            let orig = model.params.blocks()[b].1.data()[j];
            let mut side = |delta: f64| -> Result<Option<f64>> {
                probe.params.blocks_mut()[b].data_mut()[j] = orig + delta;
                let ok = routing.selections_hold(&probe, batch)?;
                let e = evaluate(&probe, batch, &routing.templates, &routing.drops, settings, None)?;
                Ok((ok && e.signature == base.signature).then_some(e.losses.total))
            };
            let plus = side(eps)?;
            let minus = side(-eps)?;
            probe.params.blocks_mut()[b].data_mut()[j] = orig;
            match (plus, minus) {
                (Some(p), Some(m)) => {
                    let numeric = (p - m) / (2.0 * eps);
                    let a = analytic.blocks()[b].1.data()[j];
                    rep.max_rel_error = rep.max_rel_error.max(relative_error(a, numeric));
                    rep.checked += 1;
                }
                _ => rep.excluded += 1,
            }
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// Small batch and model used by [`check_config`].
pub fn gradcheck_setup(cfg: &ExperimentConfig) -> Result<(SamLayer, TaskBatch, FrozenRouting)> {
    cfg.validate()?;
    let exp = Experiment::new(cfg)?;
    let model = exp.model.clone();
    let count = model.params.param_count();
    if count > MAX_PARAMS {
        return Err(Error::Config(format!(
            "model has {count} parameters; gradient checking is limited to {MAX_PARAMS}. \
             Reduce d_model, d_ffn_base or the number of experts"
        )));
    }
    let mut rng = Rng::new(cfg.seed).fork(11);
    let batch = exp.task.sample(CHECK_TOKENS, &mut rng);
    let routing = FrozenRouting::new(&model, &batch, cfg.capacity_factor, &mut rng)?;
    Ok((model, batch, routing))
}

/// Checks the total objective (all blocks, unit auxiliary weights) and each
/// loss component alone over the router blocks.
pub fn check_config(
    cfg: &ExperimentConfig,
    eps: f64,
    corrupt: Option<&dyn Fn(&mut LayerParams)>,
) -> Result<Vec<GradCheckReport>> {
    let (model, batch, routing) = gradcheck_setup(cfg)?;
    check_model(&model, &batch, &routing, cfg.group_nll_mode, eps, corrupt)
}

pub fn check_model(
    model: &SamLayer,
    batch: &TaskBatch,
    routing: &FrozenRouting,
    nll_mode: GroupNllMode,
    eps: f64,
    corrupt: Option<&dyn Fn(&mut LayerParams)>,
) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let total = LossSettings::new(
        crate::losses::LossWeights {
            alpha_balance: 1.0,
            alpha_align: 1.0,
        },
        nll_mode,
    );
    out.push(GradCheckReport {
        objective: "total".into(),
        blocks: grad_check(model, batch, routing, &total, eps, |_| true, corrupt)?,
    });
    let router_blocks = model.params.router_block_count();
    for (i, name) in COMPONENTS.iter().enumerate() {
        let settings = LossSettings::only(i, nll_mode);
        out.push(GradCheckReport {
            objective: (*name).into(),
            blocks: grad_check(model, batch, routing, &settings, eps, |b| b < router_blocks, corrupt)?,
        });
    }
    Ok(out)
}
