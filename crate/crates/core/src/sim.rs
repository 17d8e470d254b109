//! Expert-parallel dispatch simulation.
//!
//! Each expert group is one simulated device. Tokens are sharded over the
//! devices and every routed token that leaves its home device costs one
//! message to reach the expert and one to return. Traffic is counted, not
//! timed.

use crate::error::{Error, Result};
use crate::routers::{RouterKind, RoutingDecision, Topology};
use crate::tensor::Rng;

/// Messages per remote routing: dispatch to the expert, gather back.
pub const DISPATCH_AND_GATHER: u64 = 2;

/// How tokens are assigned a home device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sharding {
    /// Token `t` of a batch lives on device `t mod n_groups`.
    #[default]
    RoundRobin,
    /// Every token lives on `Topology::local_group`.
    Fixed,
}

impl Sharding {
    pub fn name(self) -> &'static str {
        match self {
            Sharding::RoundRobin => "round_robin",
            Sharding::Fixed => "fixed",
        }
    }

    pub fn home(self, token: usize, topo: &Topology) -> usize {
        match self {
            Sharding::RoundRobin => token % topo.n_groups,
            Sharding::Fixed => topo.local_group,
        }
    }
}

impl std::str::FromStr for Sharding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round_robin" => Ok(Sharding::RoundRobin),
            "fixed" => Ok(Sharding::Fixed),
            _ => Err(Error::Config(format!(
                "unknown sharding {s:?} (expected round_robin or fixed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommModel {
    pub bytes_per_element: u64,
    pub d_model: u64,
    pub sharding: Sharding,
}

impl CommModel {
    pub fn new(d_model: usize) -> Self {
        Self {
            bytes_per_element: 4,
            d_model: d_model as u64,
            sharding: Sharding::RoundRobin,
        }
    }

    pub fn bytes_per_message(&self) -> u64 {
        self.d_model * self.bytes_per_element
    }
}

/// Maximum tokens per expert: `ceil(capacity_factor · n_tokens · k / n_expert)`.
pub fn expert_capacity(capacity_factor: f64, n_tokens: usize, k: usize, n_expert: usize) -> usize {
    (capacity_factor * (n_tokens * k) as f64 / n_expert as f64).ceil() as usize
}

/// Token-to-expert assignments after capacity clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub capacity: usize,
    /// Surviving `(expert, combine weight)` pairs per token.
    pub assignments: Vec<Vec<(usize, f64)>>,
    /// Experts each token was routed to but that were already full.
    pub overflow: Vec<Vec<usize>>,
    /// Surviving assignments per expert.
    pub expert_counts: Vec<usize>,
}

impl DispatchPlan {
    pub fn n_tokens(&self) -> usize {
        self.assignments.len()
    }

    pub fn total_assignments(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    pub fn total_overflow(&self) -> usize {
        self.overflow.iter().map(Vec::len).sum()
    }

    /// Drop flags for token `t`, aligned with its decision's selected experts.
    pub fn dropped_mask(&self, t: usize, decision: &RoutingDecision) -> Vec<bool> {
        decision
            .selected_experts
            .iter()
            .map(|e| self.overflow[t].contains(e))
            .collect()
    }

    pub fn dropped_fraction(&self) -> f64 {
        let routed = self.total_assignments() + self.total_overflow();
        if routed == 0 {
            0.0
        } else {
            self.total_overflow() as f64 / routed as f64
        }
    }

    pub const CSV_HEADER: &'static str = "token,expert,weight,status";

    /// One row per routed (token, expert) pair, kept rows first within a token.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (t, (kept, dropped)) in self.assignments.iter().zip(&self.overflow).enumerate() {
            for (e, w) in kept {
                out.push_str(&format!("{t},{e},{w},kept\n"));
            }
            for e in dropped {
                out.push_str(&format!("{t},{e},,dropped\n"));
            }
        }
        out
    }
}

/// Fills experts in batch order; an assignment to a full expert becomes
/// overflow.
pub fn plan_dispatch(
    decisions: &[RoutingDecision],
    topo: &Topology,
    capacity_factor: f64,
) -> Result<DispatchPlan> {
    if !(capacity_factor > 0.0 && capacity_factor.is_finite()) {
        return Err(Error::Config(format!(
            "capacity_factor must be positive and finite, got {capacity_factor}"
        )));
    }
    let n = topo.n_expert();
    let k = decisions.first().map_or(0, RoutingDecision::k);
    let capacity = expert_capacity(capacity_factor, decisions.len(), k, n);
    let mut counts = vec![0usize; n];
    let mut assignments = Vec::with_capacity(decisions.len());
    let mut overflow = Vec::with_capacity(decisions.len());
    for d in decisions {
        let mut kept = Vec::with_capacity(d.k());
        let mut dropped = Vec::new();
        for (&e, &w) in d.selected_experts.iter().zip(&d.combine_weights) {
            if e >= n {
                return Err(Error::Invalid(format!("expert {e} out of range for {n} experts")));
            }
            if counts[e] < capacity {
                counts[e] += 1;
                kept.push((e, w));
            } else {
                dropped.push(e);
            }
        }
        assignments.push(kept);
        overflow.push(dropped);
    }
    Ok(DispatchPlan {
        capacity,
        assignments,
        overflow,
        expert_counts: counts,
    })
}

/// Cross-device traffic of one batch under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct CommReport {
    pub policy: RouterKind,
    pub k: usize,
    pub n_tokens: usize,
    pub cross_device_messages: u64,
    pub cross_device_bytes: u64,
    /// Expert evaluations executed on each device.
    pub per_device_load: Vec<f64>,
}

impl CommReport {
    pub const CSV_HEADER: &'static str =
        "policy,k,n_tokens,cross_device_messages,cross_device_bytes,per_device_load";

    /// `per_device_load` is written as `;`-separated values.
    pub fn csv_row(&self) -> String {
        let load: Vec<String> = self.per_device_load.iter().map(|x| x.to_string()).collect();
        format!(
            "{},{},{},{},{},{}",
            self.policy,
            self.k,
            self.n_tokens,
            self.cross_device_messages,
            self.cross_device_bytes,
            load.join(";")
        )
    }
}

/// Counts messages for a batch of decisions.
///
/// Flat policies pay for every selected expert hosted off the token's home
/// device. Hierarchical policies pay once per token whose selected group is
/// remote, whatever `k` is, since its experts share a device and their
/// outputs are combined there.
pub fn comm_cost(
    decisions: &[RoutingDecision],
    topo: &Topology,
    model: &CommModel,
    policy: RouterKind,
) -> CommReport {
    let mut messages = 0u64;
    let mut load = vec![0.0; topo.n_groups];
    for (t, d) in decisions.iter().enumerate() {
        let home = model.sharding.home(t, topo);
        for &e in &d.selected_experts {
            load[topo.group_of(e)] += 1.0;
        }
        if policy.is_hierarchical() {
            let g = d
                .selected_group
                .unwrap_or_else(|| topo.group_of(d.selected_experts[0]));
            if g != home {
                messages += DISPATCH_AND_GATHER;
            }
        } else {
            let remote = d
                .selected_experts
                .iter()
                .filter(|&&e| topo.group_of(e) != home)
                .count() as u64;
            messages += DISPATCH_AND_GATHER * remote;
        }
    }
    CommReport {
        policy,
        k: decisions.first().map_or(0, RoutingDecision::k),
        n_tokens: decisions.len(),
        cross_device_messages: messages,
        cross_device_bytes: messages * model.bytes_per_message(),
        per_device_load: load,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadStats {
    /// Surviving assignments per expert over all surviving assignments.
    pub expert_fractions: Vec<f64>,
    pub group_fractions: Vec<f64>,
    /// Entropy of `expert_fractions`, in nats.
    pub entropy: f64,
    pub group_entropy: f64,
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

pub fn load_stats(plan: &DispatchPlan, topo: &Topology) -> Result<LoadStats> {
    let total = plan.total_assignments();
    if total == 0 {
        return Err(Error::Empty("dispatch plan"));
    }
    let expert_fractions: Vec<f64> = plan
        .expert_counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    let mut group_fractions = vec![0.0; topo.n_groups];
    for (e, f) in expert_fractions.iter().enumerate() {
        group_fractions[topo.group_of(e)] += f;
    }
    Ok(LoadStats {
        entropy: entropy(&expert_fractions),
        group_entropy: entropy(&group_fractions),
        expert_fractions,
        group_fractions,
    })
}

/// Seeded random routing for traffic studies, without running a model.
///
/// Token `t` draws from its own stream `seed.fork(t)`. Hierarchical
/// policies draw the group first, then `k` distinct experts inside it, so
/// the group sequence does not depend on `k`. Flat policies draw `k`
/// distinct experts uniformly over all experts (`k = 1` for switch).
/// Scores are left empty and combine weights are `1/k`.
pub fn synthetic_decisions(
    policy: RouterKind,
    topo: &Topology,
    k: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<Vec<RoutingDecision>> {
    let k = if policy == RouterKind::Switch { 1 } else { k };
    let limit = if policy.is_hierarchical() {
        topo.experts_per_group
    } else {
        topo.n_expert()
    };
    if k == 0 || k > limit {
        return Err(Error::KOutOfRange { k, max: limit });
    }
    let base = Rng::new(seed);
    Ok((0..n_tokens)
        .map(|t| {
            let mut rng = base.fork(t as u64);
            let (group, experts) = if policy.is_hierarchical() {
                let g = rng.below(topo.n_groups);
                let start = topo.group_range(g).start;
                let local = rng.sample_distinct(topo.experts_per_group, k);
                (Some(g), local.into_iter().map(|i| start + i).collect())
            } else {
                (None, rng.sample_distinct(topo.n_expert(), k))
            };
            RoutingDecision {
                selected_group: group,
                selected_experts: experts,
                combine_weights: vec![1.0 / k as f64; k],
                expert_scores: Vec::new(),
                group_scores: None,
                logit_noise: None,
            }
        })
        .collect())
}
