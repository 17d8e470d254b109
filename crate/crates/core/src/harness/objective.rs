//! Batch objective: MSE task loss plus alignment and load-balance terms,
//! evaluated with routing selections held fixed.

use crate::error::{Error, Result};
use crate::layer::{LayerCache, LayerParams, SamLayer};
use crate::losses::{
    align_group_nll_grad, align_group_nll_logits_grad, align_hinge_loss_grad, load_balance_grad,
    load_balance_loss, outside_experts, GroupNllMode, LossBreakdown, LossWeights,
};
use crate::routers::{DecisionGrad, RouterKind, RouterParams, RoutingDecision, Topology};
use crate::tensor::matvec;

use super::task::TaskBatch;

/// Which loss components enter the objective, and with what weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub nll_mode: GroupNllMode,
    /// Per-component switches: task, align, balance_group, balance_expert.
    pub mask: [bool; 4],
}

impl LossSettings {
    pub fn new(weights: LossWeights, nll_mode: GroupNllMode) -> Self {
        Self {
            weights,
            nll_mode,
            mask: [true; 4],
        }
    }

    /// Only component `i` (0 task, 1 align, 2 balance_group, 3
    /// balance_expert) with unit weight.
    pub fn only(i: usize, nll_mode: GroupNllMode) -> Self {
        let mut mask = [false; 4];
        mask[i] = true;
        Self {
            weights: LossWeights {
                alpha_balance: 1.0,
                alpha_align: 1.0,
            },
            nll_mode,
            mask,
        }
    }

    fn coef(&self) -> [f64; 4] {
        let on = |i: usize| if self.mask[i] { 1.0 } else { 0.0 };
        [
            on(0),
            self.weights.alpha_align * on(1),
            self.weights.alpha_balance * on(2),
            self.weights.alpha_balance * on(3),
        ]
    }
}

pub struct Evaluation {
    pub losses: LossBreakdown,
    pub outputs: Vec<Vec<f64>>,
    pub caches: Vec<LayerCache>,
    /// ReLU patterns and hinge activity; a change under perturbation marks
    /// a crossed kink.
    pub signature: Vec<bool>,
}

#[derive(Default, Clone)]
struct ScoreGrad {
    expert: Option<Vec<f64>>,
    group: Option<Vec<f64>>,
}

fn add_into(slot: &mut Option<Vec<f64>>, v: &[f64], scale: f64) {
    let s = slot.get_or_insert_with(|| vec![0.0; v.len()]);
    s.iter_mut().zip(v).for_each(|(a, b)| *a += scale * b);
}

fn align_terms(
    router: &RouterParams,
    topo: &Topology,
    cache: &LayerCache,
    mode: GroupNllMode,
    signature: &mut Vec<bool>,
) -> Result<(f64, ScoreGrad)> {
    let d = &cache.decision;
    match router {
        RouterParams::SamShared { .. } => {
            let (l, g) = align_hinge_loss_grad(&d.expert_scores, topo, d)?;
            let kth = d
                .selected_experts
                .iter()
                .map(|&e| d.expert_scores[e])
                .fold(f64::INFINITY, f64::min);
            let group = d.selected_group.unwrap_or(0);
            signature.extend(
                outside_experts(topo, group)
                    .into_iter()
                    .map(|e| d.expert_scores[e] > kth),
            );
            Ok((
                l,
                ScoreGrad {
                    expert: Some(g),
                    group: None,
                },
            ))
        }
        RouterParams::SamNonShared { w_group, .. } => {
            let sel = d
                .selected_group
                .ok_or(Error::Invalid("missing selected group".into()))?;
            let scores = d
                .group_scores
                .as_ref()
                .ok_or(Error::Invalid("missing group scores".into()))?;
            let (l, g) = match mode {
                GroupNllMode::Verbatim => align_group_nll_grad(scores, sel)?,
                GroupNllMode::Logits => {
                    // d/dz of the logit form equals the softmax chain of
                    // −1/g_sel on the selected score
                    let (l, _) = align_group_nll_logits_grad(&matvec(w_group, &cache.h)?, sel)?;
                    let mut g = vec![0.0; scores.len()];
                    g[sel] = -1.0 / scores[sel];
                    (l, g)
                }
            };
            Ok((
                l,
                ScoreGrad {
                    expert: None,
                    group: Some(g),
                },
            ))
        }
        _ => Ok((0.0, ScoreGrad::default())),
    }
}

/// Group and expert balance losses for a batch, with per-token gradients on
/// the decisions' scores. Dispatch fractions count routing intent (before
/// capacity) and are constants.
fn balance_terms(
    kind: RouterKind,
    topo: &Topology,
    decisions: &[&RoutingDecision],
) -> Result<(f64, f64, Vec<ScoreGrad>)> {
    let t = decisions.len();
    let tf = t as f64;
    let n = topo.n_expert();
    let g = topo.n_groups;
    let k = decisions.first().map_or(1, |d| d.k()) as f64;
    let mut grads = vec![ScoreGrad::default(); t];
    if t == 0 {
        return Ok((0.0, 0.0, grads));
    }
    match kind {
        RouterKind::Switch | RouterKind::MoeTopK | RouterKind::SamShared => {
            let mut f = vec![0.0; n];
            let mut p = vec![0.0; n];
            for d in decisions {
                for &e in &d.selected_experts {
                    f[e] += 1.0 / (tf * k);
                }
                p.iter_mut()
                    .zip(&d.expert_scores)
                    .for_each(|(a, b)| *a += b / tf);
            }
            let be = load_balance_loss(&f, &p)?;
            let dp: Vec<f64> = load_balance_grad(&f).into_iter().map(|x| x / tf).collect();
            let mut bg = 0.0;
            let mut dp_group = vec![0.0; n];
            if kind == RouterKind::SamShared {
                let mut fg = vec![0.0; g];
                let mut pg = vec![0.0; g];
                for d in decisions {
                    fg[d.selected_group.unwrap_or(0)] += 1.0 / tf;
                    for (e, s) in d.expert_scores.iter().enumerate() {
                        pg[topo.group_of(e)] += s / tf;
                    }
                }
                bg = load_balance_loss(&fg, &pg)?;
                let dg = load_balance_grad(&fg);
                for (e, v) in dp_group.iter_mut().enumerate() {
                    *v = dg[topo.group_of(e)] / tf;
                }
            }
            for gr in &mut grads {
                add_into(&mut gr.expert, &dp, 1.0);
                if kind == RouterKind::SamShared {
                    // kept apart so the two balance terms can be masked
                    gr.group = Some(dp_group.clone());
                }
            }
            Ok((bg, be, grads))
        }
        RouterKind::SamNonShared => {
            let e_per = topo.experts_per_group;
            let mut fg = vec![0.0; g];
            let mut pg = vec![0.0; g];
            let mut tokens = vec![0usize; g];
            for d in decisions {
                let s = d.selected_group.unwrap_or(0);
                fg[s] += 1.0 / tf;
                tokens[s] += 1;
                let gs = d
                    .group_scores
                    .as_ref()
                    .ok_or(Error::Invalid("missing group scores".into()))?;
                pg.iter_mut().zip(gs).for_each(|(a, b)| *a += b / tf);
            }
            let bg = load_balance_loss(&fg, &pg)?;
            let dg: Vec<f64> = load_balance_grad(&fg).into_iter().map(|x| x / tf).collect();
            // per group: f and P over that group's experts, among its tokens
            let mut fe = vec![vec![0.0; e_per]; g];
            let mut pe = vec![vec![0.0; e_per]; g];
            for d in decisions {
                let s = d.selected_group.unwrap_or(0);
                let tw = tokens[s] as f64;
                let base = topo.group_range(s).start;
                for &e in &d.selected_experts {
                    fe[s][e - base] += 1.0 / (tw * k);
                }
                pe[s].iter_mut()
                    .zip(&d.expert_scores)
                    .for_each(|(a, b)| *a += b / tw);
            }
            let mut be = 0.0;
            let mut de = vec![Vec::new(); g];
            for w in 0..g {
                if tokens[w] == 0 {
                    continue;
                }
                be += tokens[w] as f64 / tf * load_balance_loss(&fe[w], &pe[w])?;
                de[w] = load_balance_grad(&fe[w]).into_iter().map(|x| x / tf).collect();
            }
            for (gr, d) in grads.iter_mut().zip(decisions) {
                gr.group = Some(dg.clone());
                gr.expert = Some(de[d.selected_group.unwrap_or(0)].clone());
            }
            Ok((bg, be, grads))
        }
    }
}

/// Evaluates the batch objective with each token's selection fixed to
/// `templates[t]` and the experts flagged in `drops[t]` skipped. When
/// `grads` is given, parameter gradients are accumulated into it.
pub fn evaluate(
    model: &SamLayer,
    batch: &TaskBatch,
    templates: &[RoutingDecision],
    drops: &[Vec<bool>],
    settings: &LossSettings,
    grads: Option<&mut LayerParams>,
) -> Result<Evaluation> {
    let t = batch.len();
    if templates.len() != t || drops.len() != t {
        return Err(Error::Dim {
            op: "objective routing",
            expected: t,
            got: templates.len().min(drops.len()),
        });
    }
    if t == 0 {
        return Err(Error::Empty("batch"));
    }
    let d_model = model.d_model();
    let mut outputs = Vec::with_capacity(t);
    let mut caches = Vec::with_capacity(t);
    for ((x, tpl), drop) in batch.inputs.iter().zip(templates).zip(drops) {
        let (y, cache) = model.forward_frozen(x, tpl, drop)?;
        outputs.push(y);
        caches.push(cache);
    }
    let scale = 1.0 / (t * d_model) as f64;
    let mut task = 0.0;
    for (y, target) in outputs.iter().zip(&batch.targets) {
        task += y
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    task *= scale;

    let kind = model.params.router.kind();
    let mut signature: Vec<bool> = caches.iter().flat_map(|c| c.activation_pattern()).collect();
    let mut align = 0.0;
    let mut align_grads = Vec::with_capacity(t);
    for c in &caches {
        let (l, g) = align_terms(&model.params.router, &model.topo, c, settings.nll_mode, &mut signature)?;
        align += l / t as f64;
        align_grads.push(g);
    }
    let decisions: Vec<&RoutingDecision> = caches.iter().map(|c| &c.decision).collect();
    let (bg, be, balance_grads) = balance_terms(kind, &model.topo, &decisions)?;

    let [c_task, c_align, c_bg, c_be] = settings.coef();
    let mask = |on: bool, v: f64| if on { v } else { 0.0 };
    let losses = LossBreakdown {
        task,
        align,
        balance_group: bg,
        balance_expert: be,
        total: mask(settings.mask[0], task)
            + c_align * align
            + settings.weights.alpha_balance
                * (mask(settings.mask[2], bg) + mask(settings.mask[3], be)),
    };

    if let Some(acc) = grads {
        for (i, cache) in caches.iter().enumerate() {
            let dy: Vec<f64> = outputs[i]
                .iter()
                .zip(&batch.targets[i])
                .map(|(a, b)| c_task * 2.0 * scale * (a - b))
                .collect();
            let mut extra = ScoreGrad::default();
            let a = &align_grads[i];
            if let Some(v) = &a.expert {
                add_into(&mut extra.expert, v, c_align / t as f64);
            }
            if let Some(v) = &a.group {
                add_into(&mut extra.group, v, c_align / t as f64);
            }
            let b = &balance_grads[i];
            // for the shared policy the group term arrives on expert scores
            let shared = kind == RouterKind::SamShared;
            if let Some(v) = &b.expert {
                add_into(&mut extra.expert, v, c_be);
            }
            if let Some(v) = &b.group {
                if shared {
                    add_into(&mut extra.expert, v, c_bg);
                } else {
                    add_into(&mut extra.group, v, c_bg);
                }
            }
            let dg = DecisionGrad {
                combine: Vec::new(),
                expert_scores: extra.expert,
                group_scores: extra.group,
            };
            model.accumulate_backward(cache, &dy, Some(&dg), acc)?;
        }
    }

    Ok(Evaluation {
        losses,
        outputs,
        caches,
        signature,
    })
}
