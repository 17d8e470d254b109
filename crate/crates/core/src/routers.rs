//! Routing policies: flat Switch (top-1), noisy flat top-k, and the two
//! hierarchical group-then-experts policies (shared and non-shared scorer).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{argmax, gaussian, matvec, softmax, softmax_backward, topk, Matrix, Rng};

/// Expert placement: `n_groups` devices with `experts_per_group` experts
/// each. Expert `e` lives in group `e / experts_per_group`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub n_groups: usize,
    pub experts_per_group: usize,
    /// Group treated as "local" when a single fixed home device is used
    /// for communication accounting.
    pub local_group: usize,
}

impl Topology {
    pub fn new(n_groups: usize, experts_per_group: usize) -> Result<Self> {
        if n_groups == 0 || experts_per_group == 0 {
            return Err(Error::Config(
                "n_groups and experts_per_group must be at least 1".into(),
            ));
        }
        Ok(Self {
            n_groups,
            experts_per_group,
            local_group: 0,
        })
    }

    pub fn with_local_group(mut self, g: usize) -> Result<Self> {
        if g >= self.n_groups {
            return Err(Error::Config(format!(
                "local_group {g} out of range for {} groups",
                self.n_groups
            )));
        }
        self.local_group = g;
        Ok(self)
    }

    pub fn n_expert(&self) -> usize {
        self.n_groups * self.experts_per_group
    }

    pub fn group_of(&self, expert: usize) -> usize {
        expert / self.experts_per_group
    }

    pub fn group_range(&self, group: usize) -> std::ops::Range<usize> {
        group * self.experts_per_group..(group + 1) * self.experts_per_group
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouterKind {
    Switch,
    MoeTopK,
    SamShared,
    SamNonShared,
}

impl RouterKind {
    pub const ALL: [RouterKind; 4] = [
        RouterKind::Switch,
        RouterKind::MoeTopK,
        RouterKind::SamShared,
        RouterKind::SamNonShared,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Switch => "switch",
            RouterKind::MoeTopK => "moe_topk",
            RouterKind::SamShared => "sam_shared",
            RouterKind::SamNonShared => "sam_nonshared",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, RouterKind::SamShared | RouterKind::SamNonShared)
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown router kind {s:?} (expected switch, moe_topk, sam_shared or sam_nonshared)"
                ))
            })
    }
}

/// Router weights. Each variant carries exactly the matrices its policy
/// reads; every matrix has `d_model` columns.
#[derive(Debug, Clone, PartialEq)]
pub enum RouterParams {
    /// `w`: n_expert × d_model.
    Switch { w: Matrix },
    /// `w`: n_expert × d_model. Gaussian logit noise of std `noise_scale`
    /// is added in train mode.
    MoeTopK { w: Matrix, noise_scale: f64 },
    /// One scorer over all experts; drives both the group and expert choice.
    SamShared { w: Matrix },
    /// `w_group`: n_groups × d_model; `w_mixture[g]`: experts_per_group × d_model.
    SamNonShared {
        w_group: Matrix,
        w_mixture: Vec<Matrix>,
    },
}

impl RouterParams {
    /// Weights drawn from N(0, std²); `std = 0` gives an all-zero router.
    pub fn init(
        kind: RouterKind,
        topo: &Topology,
        d_model: usize,
        std: f64,
        noise_scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let n = topo.n_expert();
        match kind {
            RouterKind::Switch => RouterParams::Switch {
                w: Matrix::gaussian(n, d_model, std, rng),
            },
            RouterKind::MoeTopK => RouterParams::MoeTopK {
                w: Matrix::gaussian(n, d_model, std, rng),
                noise_scale,
            },
            RouterKind::SamShared => RouterParams::SamShared {
                w: Matrix::gaussian(n, d_model, std, rng),
            },
            RouterKind::SamNonShared => RouterParams::SamNonShared {
                w_group: Matrix::gaussian(topo.n_groups, d_model, std, rng),
                w_mixture: (0..topo.n_groups)
                    .map(|_| Matrix::gaussian(topo.experts_per_group, d_model, std, rng))
                    .collect(),
            },
        }
    }

    pub fn kind(&self) -> RouterKind {
        match self {
            RouterParams::Switch { .. } => RouterKind::Switch,
            RouterParams::MoeTopK { .. } => RouterKind::MoeTopK,
            RouterParams::SamShared { .. } => RouterKind::SamShared,
            RouterParams::SamNonShared { .. } => RouterKind::SamNonShared,
        }
    }

    /// Same shape, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        match self {
            RouterParams::Switch { w } => RouterParams::Switch { w: w.zeros_like() },
            RouterParams::MoeTopK { w, noise_scale } => RouterParams::MoeTopK {
                w: w.zeros_like(),
                noise_scale: *noise_scale,
            },
            RouterParams::SamShared { w } => RouterParams::SamShared { w: w.zeros_like() },
            RouterParams::SamNonShared { w_group, w_mixture } => RouterParams::SamNonShared {
                w_group: w_group.zeros_like(),
                w_mixture: w_mixture.iter().map(Matrix::zeros_like).collect(),
            },
        }
    }

    /// Named weight blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        match self {
            RouterParams::Switch { w }
            | RouterParams::MoeTopK { w, .. }
            | RouterParams::SamShared { w } => vec![("router.w".into(), w)],
            RouterParams::SamNonShared { w_group, w_mixture } => {
                let mut v = vec![("router.w_group".to_string(), w_group)];
                v.extend(
                    w_mixture
                        .iter()
                        .enumerate()
                        .map(|(g, m)| (format!("router.w_mixture[{g}]"), m)),
                );
                v
            }
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            RouterParams::Switch { w }
            | RouterParams::MoeTopK { w, .. }
            | RouterParams::SamShared { w } => vec![w],
            RouterParams::SamNonShared { w_group, w_mixture } => {
                let mut v = vec![w_group];
                v.extend(w_mixture.iter_mut());
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Checks matrix shapes against the topology and model width.
    pub fn validate(&self, topo: &Topology, d_model: usize) -> Result<()> {
        let check = |m: &Matrix, rows: usize| -> Result<()> {
            if m.rows() != rows {
                return Err(Error::Dim {
                    op: "router rows",
                    expected: rows,
                    got: m.rows(),
                });
            }
            if m.cols() != d_model {
                return Err(Error::Dim {
                    op: "router cols",
                    expected: d_model,
                    got: m.cols(),
                });
            }
            Ok(())
        };
        match self {
            RouterParams::Switch { w }
            | RouterParams::MoeTopK { w, .. }
            | RouterParams::SamShared { w } => check(w, topo.n_expert()),
            RouterParams::SamNonShared { w_group, w_mixture } => {
                check(w_group, topo.n_groups)?;
                if w_mixture.len() != topo.n_groups {
                    return Err(Error::Dim {
                        op: "mixture router count",
                        expected: topo.n_groups,
                        got: w_mixture.len(),
                    });
                }
                w_mixture
                    .iter()
                    .try_for_each(|m| check(m, topo.experts_per_group))
            }
        }
    }
}

/// Outcome of routing one token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Chosen group for hierarchical policies, `None` for flat ones.
    pub selected_group: Option<usize>,
    /// Global expert indices, best first. Length k.
    pub selected_experts: Vec<usize>,
    /// Output weight for each selected expert.
    pub combine_weights: Vec<f64>,
    /// Probabilities over all experts (flat and shared policies) or over the
    /// selected group's experts (non-shared policy).
    pub expert_scores: Vec<f64>,
    /// Per-group scores for hierarchical policies. For the shared policy
    /// these are the sums of each group's top-k probabilities; for the
    /// non-shared policy, the group router's softmax.
    pub group_scores: Option<Vec<f64>>,
    /// Logit noise used by the noisy top-k policy (train mode only).
    pub logit_noise: Option<Vec<f64>>,
}

impl RoutingDecision {
    pub fn k(&self) -> usize {
        self.selected_experts.len()
    }

    /// Group hosting each selected expert.
    pub fn expert_groups(&self, topo: &Topology) -> Vec<usize> {
        self.selected_experts
            .iter()
            .map(|&e| topo.group_of(e))
            .collect()
    }
}

fn expect_dim(h: &[f64], d_model: usize) -> Result<()> {
    if h.len() != d_model {
        return Err(Error::Dim {
            op: "router input",
            expected: d_model,
            got: h.len(),
        });
    }
    Ok(())
}

fn wrong(op: &'static str, p: &RouterParams) -> Error {
    Error::WrongRouter {
        op,
        got: p.kind().name(),
    }
}

/// Top-1 routing with the combine weight equal to the winner's softmax
/// probability.
pub fn route_switch(params: &RouterParams, h: &[f64]) -> Result<RoutingDecision> {
    let RouterParams::Switch { w } = params else {
        return Err(wrong("route_switch", params));
    };
    expect_dim(h, w.cols())?;
    let p = softmax(&matvec(w, h)?)?;
    let best = argmax(&p).ok_or(Error::Empty("router scores"))?;
    Ok(RoutingDecision {
        selected_group: None,
        selected_experts: vec![best],
        combine_weights: vec![p[best]],
        expert_scores: p,
        group_scores: None,
        logit_noise: None,
    })
}

/// Noisy flat top-k. Selection uses the (possibly noisy) logits; combine
/// weights are a softmax over the k surviving logits only.
pub fn route_moe_topk(
    params: &RouterParams,
    h: &[f64],
    k: usize,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<RoutingDecision> {
    let RouterParams::MoeTopK { w, noise_scale } = params else {
        return Err(wrong("route_moe_topk", params));
    };
    expect_dim(h, w.cols())?;
    if k == 0 || k > w.rows() {
        return Err(Error::KOutOfRange { k, max: w.rows() });
    }
    let noise = (train_mode && *noise_scale > 0.0).then(|| {
        gaussian(rng, w.rows())
            .into_iter()
            .map(|z| z * noise_scale)
            .collect::<Vec<_>>()
    });
    moe_topk_with_noise(w, h, k, noise, None)
}

fn moe_topk_with_noise(
    w: &Matrix,
    h: &[f64],
    k: usize,
    noise: Option<Vec<f64>>,
    fixed: Option<&[usize]>,
) -> Result<RoutingDecision> {
    let mut logits = matvec(w, h)?;
    if let Some(n) = &noise {
        logits.iter_mut().zip(n).for_each(|(l, z)| *l += z);
    }
    let selected = match fixed {
        Some(s) => s.to_vec(),
        None => topk(&logits, k)?,
    };
    let kept: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
    Ok(RoutingDecision {
        selected_group: None,
        combine_weights: softmax(&kept)?,
        selected_experts: selected,
        expert_scores: softmax(&logits)?,
        group_scores: None,
        logit_noise: noise,
    })
}

/// Sum of the `k` largest probabilities inside each group, and the
/// global indices of those members.
fn group_topk_sums(p: &[f64], topo: &Topology, k: usize) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    let mut sums = Vec::with_capacity(topo.n_groups);
    let mut members = Vec::with_capacity(topo.n_groups);
    for g in 0..topo.n_groups {
        let range = topo.group_range(g);
        let local = topk(&p[range.clone()], k)?;
        let global: Vec<usize> = local.iter().map(|&i| range.start + i).collect();
        sums.push(global.iter().map(|&i| p[i]).sum());
        members.push(global);
    }
    Ok((sums, members))
}

fn check_group_k(topo: &Topology, k: usize) -> Result<()> {
    if k == 0 || k > topo.experts_per_group {
        return Err(Error::KOutOfRange {
            k,
            max: topo.experts_per_group,
        });
    }
    Ok(())
}

/// Hierarchical routing with one shared scorer. Each group is scored by the
/// sum of its top-k expert probabilities; the best group's top-k experts are
/// selected and weighted by their raw global probabilities (not
/// renormalized, so the weights need not sum to 1).
pub fn route_sam_shared(
    params: &RouterParams,
    topo: &Topology,
    h: &[f64],
    k: usize,
) -> Result<RoutingDecision> {
    let RouterParams::SamShared { w } = params else {
        return Err(wrong("route_sam_shared", params));
    };
    expect_dim(h, w.cols())?;
    check_group_k(topo, k)?;
    let p = softmax(&matvec(w, h)?)?;
    let (sums, members) = group_topk_sums(&p, topo, k)?;
    let g = argmax(&sums).ok_or(Error::Empty("group scores"))?;
    let selected = members[g].clone();
    Ok(RoutingDecision {
        selected_group: Some(g),
        combine_weights: selected.iter().map(|&i| p[i]).collect(),
        selected_experts: selected,
        expert_scores: p,
        group_scores: Some(sums),
        logit_noise: None,
    })
}

/// Hierarchical routing with a group router and one expert router per
/// group. Combine weight of expert i is `g_selected · p_group(i)`.
pub fn route_sam_nonshared(
    params: &RouterParams,
    topo: &Topology,
    h: &[f64],
    k: usize,
) -> Result<RoutingDecision> {
    let RouterParams::SamNonShared { w_group, w_mixture } = params else {
        return Err(wrong("route_sam_nonshared", params));
    };
    expect_dim(h, w_group.cols())?;
    check_group_k(topo, k)?;
    let g = softmax(&matvec(w_group, h)?)?;
    let sel = argmax(&g).ok_or(Error::Empty("group scores"))?;
    nonshared_in_group(w_mixture, topo, h, k, g, sel, None)
}

fn nonshared_in_group(
    w_mixture: &[Matrix],
    topo: &Topology,
    h: &[f64],
    k: usize,
    g: Vec<f64>,
    sel: usize,
    fixed: Option<&[usize]>,
) -> Result<RoutingDecision> {
    let p = softmax(&matvec(&w_mixture[sel], h)?)?;
    let base = topo.group_range(sel).start;
    let selected: Vec<usize> = match fixed {
        Some(s) => s.to_vec(),
        None => topk(&p, k)?.into_iter().map(|i| base + i).collect(),
    };
    let gs = g[sel];
    Ok(RoutingDecision {
        selected_group: Some(sel),
        combine_weights: selected.iter().map(|&i| gs * p[i - base]).collect(),
        selected_experts: selected,
        expert_scores: p,
        group_scores: Some(g),
        logit_noise: None,
    })
}

/// Dispatches on the router kind. Switch routing requires `k = 1`.
pub fn route(
    params: &RouterParams,
    topo: &Topology,
    h: &[f64],
    k: usize,
    rng: &mut Rng,
    train_mode: bool,
) -> Result<RoutingDecision> {
    match params.kind() {
        RouterKind::Switch => {
            if k != 1 {
                return Err(Error::KOutOfRange { k, max: 1 });
            }
            route_switch(params, h)
        }
        RouterKind::MoeTopK => route_moe_topk(params, h, k, rng, train_mode),
        RouterKind::SamShared => route_sam_shared(params, topo, h, k),
        RouterKind::SamNonShared => route_sam_nonshared(params, topo, h, k),
    }
}

/// Routes `h` afresh but reuses the logit noise recorded in `template`, so
/// the result differs from `template` only through the parameters or `h`.
pub fn reroute(
    params: &RouterParams,
    topo: &Topology,
    h: &[f64],
    template: &RoutingDecision,
) -> Result<RoutingDecision> {
    match params {
        RouterParams::MoeTopK { w, .. } => {
            expect_dim(h, w.cols())?;
            moe_topk_with_noise(w, h, template.k(), template.logit_noise.clone(), None)
        }
        _ => route(params, topo, h, template.k(), &mut Rng::new(0), false),
    }
}

/// Recomputes scores and combine weights for `h` while holding the
/// selection (and any logit noise) of `fixed` constant.
pub fn rescore(
    params: &RouterParams,
    topo: &Topology,
    h: &[f64],
    fixed: &RoutingDecision,
) -> Result<RoutingDecision> {
    match params {
        RouterParams::Switch { w } => {
            expect_dim(h, w.cols())?;
            let p = softmax(&matvec(w, h)?)?;
            Ok(RoutingDecision {
                combine_weights: fixed.selected_experts.iter().map(|&i| p[i]).collect(),
                expert_scores: p,
                ..fixed.clone()
            })
        }
        RouterParams::MoeTopK { w, .. } => {
            expect_dim(h, w.cols())?;
            moe_topk_with_noise(
                w,
                h,
                fixed.k(),
                fixed.logit_noise.clone(),
                Some(&fixed.selected_experts),
            )
        }
        RouterParams::SamShared { w } => {
            expect_dim(h, w.cols())?;
            let p = softmax(&matvec(w, h)?)?;
            let (sums, _) = group_topk_sums(&p, topo, fixed.k())?;
            Ok(RoutingDecision {
                combine_weights: fixed.selected_experts.iter().map(|&i| p[i]).collect(),
                expert_scores: p,
                group_scores: Some(sums),
                ..fixed.clone()
            })
        }
        RouterParams::SamNonShared { w_group, w_mixture } => {
            expect_dim(h, w_group.cols())?;
            let sel = fixed.selected_group.ok_or(Error::Invalid(
                "non-shared decision without a selected group".into(),
            ))?;
            let g = softmax(&matvec(w_group, h)?)?;
            nonshared_in_group(
                w_mixture,
                topo,
                h,
                fixed.k(),
                g,
                sel,
                Some(&fixed.selected_experts),
            )
        }
    }
}

/// Upstream gradients arriving at a routing decision.
#[derive(Debug, Clone, Default)]
pub struct DecisionGrad {
    /// d loss / d combine_weights (one per selected expert).
    pub combine: Vec<f64>,
    /// d loss / d expert_scores, same length as `expert_scores`.
    pub expert_scores: Option<Vec<f64>>,
    /// d loss / d group_scores.
    pub group_scores: Option<Vec<f64>>,
}

/// Backpropagates `grad` through the router for one token. Selection is
/// treated as a constant. Router weight gradients are added to `acc` and
/// the input gradient to `dh`.
pub fn router_backward(
    params: &RouterParams,
    topo: &Topology,
    h: &[f64],
    decision: &RoutingDecision,
    grad: &DecisionGrad,
    acc: &mut RouterParams,
    dh: &mut [f64],
) -> Result<()> {
    if grad.combine.len() != decision.k() {
        return Err(Error::Dim {
            op: "router_backward combine grad",
            expected: decision.k(),
            got: grad.combine.len(),
        });
    }
    let add = |x: &mut Vec<f64>, y: &Option<Vec<f64>>| {
        if let Some(y) = y {
            x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
        }
    };
    match (params, acc) {
        (RouterParams::Switch { w }, RouterParams::Switch { w: gw })
        | (RouterParams::SamShared { w }, RouterParams::SamShared { w: gw }) => {
            let p = &decision.expert_scores;
            let mut dp = vec![0.0; p.len()];
            for (&e, &dc) in decision.selected_experts.iter().zip(&grad.combine) {
                dp[e] += dc;
            }
            add(&mut dp, &grad.expert_scores);
            if let Some(dg) = &grad.group_scores {
                let (_, members) = group_topk_sums(p, topo, decision.k())?;
                for (g, m) in members.iter().enumerate() {
                    for &i in m {
                        dp[i] += dg[g];
                    }
                }
            }
            let dz = softmax_backward(p, &dp);
            gw.add_outer(&dz, h);
            w.add_tmatvec(&dz, dh);
        }
        (RouterParams::MoeTopK { w, .. }, RouterParams::MoeTopK { w: gw, .. }) => {
            let mut dz = vec![0.0; w.rows()];
            if let Some(ds) = &grad.expert_scores {
                dz = softmax_backward(&decision.expert_scores, ds);
            }
            let dsel = softmax_backward(&decision.combine_weights, &grad.combine);
            for (&e, d) in decision.selected_experts.iter().zip(dsel) {
                dz[e] += d;
            }
            gw.add_outer(&dz, h);
            w.add_tmatvec(&dz, dh);
        }
        (
            RouterParams::SamNonShared { w_group, w_mixture },
            RouterParams::SamNonShared {
                w_group: gw_group,
                w_mixture: gw_mixture,
            },
        ) => {
            let sel = decision
                .selected_group
                .ok_or(Error::Invalid("missing selected group".into()))?;
            let g = decision
                .group_scores
                .as_ref()
                .ok_or(Error::Invalid("missing group scores".into()))?;
            let p = &decision.expert_scores;
            let base = topo.group_range(sel).start;
            let mut dg = vec![0.0; g.len()];
            let mut dp = vec![0.0; p.len()];
            for (&e, &dc) in decision.selected_experts.iter().zip(&grad.combine) {
                dg[sel] += dc * p[e - base];
                dp[e - base] += dc * g[sel];
            }
            add(&mut dg, &grad.group_scores);
            add(&mut dp, &grad.expert_scores);
            let dzg = softmax_backward(g, &dg);
            gw_group.add_outer(&dzg, h);
            w_group.add_tmatvec(&dzg, dh);
            let dzp = softmax_backward(p, &dp);
            gw_mixture[sel].add_outer(&dzp, h);
            w_mixture[sel].add_tmatvec(&dzp, dh);
        }
        (p, _) => return Err(wrong("router_backward (accumulator kind differs)", p)),
    }
    Ok(())
}
