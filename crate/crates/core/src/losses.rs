//! Alignment losses for hierarchical routing and the load-balance
//! auxiliary loss.

use crate::error::{Error, Result};
use crate::routers::{RoutingDecision, Topology};

/// Mixing coefficients for the auxiliary losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_balance: f64,
    pub alpha_align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_balance: 0.01,
            alpha_align: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(alpha_balance: f64, alpha_align: f64) -> Result<Self> {
        for (name, v) in [("alpha_balance", alpha_balance), ("alpha_align", alpha_align)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self {
            alpha_balance,
            alpha_align,
        })
    }
}

/// Which form of the group log-loss to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupNllMode {
    /// `−log(g_sel / Σ_w g_w)` on the group router's softmax scores.
    #[default]
    Verbatim,
    /// `−z_sel + log Σ_w exp z_w` on the raw group logits.
    Logits,
}

impl GroupNllMode {
    pub fn name(self) -> &'static str {
        match self {
            GroupNllMode::Verbatim => "verbatim",
            GroupNllMode::Logits => "logits",
        }
    }
}

impl std::str::FromStr for GroupNllMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(GroupNllMode::Verbatim),
            "logits" => Ok(GroupNllMode::Logits),
            _ => Err(Error::Config(format!(
                "unknown group_nll_mode {s:?} (expected verbatim or logits)"
            ))),
        }
    }
}

/// Experts outside the selected group, i.e. the candidates the hinge
/// compares against the selected set.
pub fn outside_experts(topo: &Topology, selected_group: usize) -> Vec<usize> {
    (0..topo.n_expert())
        .filter(|&e| topo.group_of(e) != selected_group)
        .collect()
}

/// Hinge alignment loss with its subgradient over `expert_scores`.
///
/// `Σ_{e outside} max(p_e − p_K, 0)`, where `p_K` is the smallest score
/// among the selected experts. The subgradient at `p_e = p_K` is 0.
pub fn align_hinge_loss_grad(
    expert_scores: &[f64],
    topo: &Topology,
    decision: &RoutingDecision,
) -> Result<(f64, Vec<f64>)> {
    if decision.selected_experts.is_empty() {
        return Err(Error::Empty("selected experts"));
    }
    if expert_scores.len() != topo.n_expert() {
        return Err(Error::Dim {
            op: "align_hinge_loss scores",
            expected: topo.n_expert(),
            got: expert_scores.len(),
        });
    }
    let group = decision
        .selected_group
        .unwrap_or_else(|| topo.group_of(decision.selected_experts[0]));
    // k-th highest selected score; first occurrence on ties
    let mut kth = decision.selected_experts[0];
    for &e in &decision.selected_experts {
        if expert_scores[e] < expert_scores[kth] {
            kth = e;
        }
    }
    let threshold = expert_scores[kth];
    let mut loss = 0.0;
    let mut grad = vec![0.0; expert_scores.len()];
    for e in outside_experts(topo, group) {
        let gap = expert_scores[e] - threshold;
        if gap > 0.0 {
            loss += gap;
            grad[e] += 1.0;
            grad[kth] -= 1.0;
        }
    }
    Ok((loss, grad))
}

pub fn align_hinge_loss(
    expert_scores: &[f64],
    topo: &Topology,
    decision: &RoutingDecision,
) -> Result<f64> {
    Ok(align_hinge_loss_grad(expert_scores, topo, decision)?.0)
}

/// `−log(g_sel / Σ_w g_w)` and its gradient over `group_scores`.
pub fn align_group_nll_grad(group_scores: &[f64], selected_group: usize) -> Result<(f64, Vec<f64>)> {
    let Some(&gs) = group_scores.get(selected_group) else {
        return Err(Error::Invalid(format!(
            "selected group {selected_group} out of range for {} groups",
            group_scores.len()
        )));
    };
    if gs <= 0.0 || !gs.is_finite() {
        return Err(Error::Invalid(format!(
            "selected group score must be positive, got {gs}"
        )));
    }
    let total: f64 = group_scores.iter().sum();
    let loss = -(gs / total).ln();
    let mut grad = vec![1.0 / total; group_scores.len()];
    grad[selected_group] -= 1.0 / gs;
    Ok((loss, grad))
}

pub fn align_group_nll(group_scores: &[f64], selected_group: usize) -> Result<f64> {
    Ok(align_group_nll_grad(group_scores, selected_group)?.0)
}

/// Cross-entropy of the selected group computed from raw logits, and its
/// gradient over the logits.
pub fn align_group_nll_logits_grad(logits: &[f64], selected_group: usize) -> Result<(f64, Vec<f64>)> {
    if selected_group >= logits.len() {
        return Err(Error::Invalid(format!(
            "selected group {selected_group} out of range for {} groups",
            logits.len()
        )));
    }
    let s = crate::tensor::softmax(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = s;
    grad[selected_group] -= 1.0;
    Ok((lse - logits[selected_group], grad))
}

/// `N · Σ f_i P_i` where `f` are dispatch fractions and `P` mean router
/// probabilities over the same N units.
pub fn load_balance_loss(f: &[f64], p: &[f64]) -> Result<f64> {
    if f.len() != p.len() {
        return Err(Error::Dim {
            op: "load_balance_loss",
            expected: f.len(),
            got: p.len(),
        });
    }
    if f.is_empty() {
        return Err(Error::Empty("load balance units"));
    }
    let n = f.len() as f64;
    Ok(n * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
}

/// d loss / d P for [`load_balance_loss`]; `f` is treated as constant.
pub fn load_balance_grad(f: &[f64]) -> Vec<f64> {
    let n = f.len() as f64;
    f.iter().map(|x| n * x).collect()
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub task: f64,
    pub align: f64,
    pub balance_group: f64,
    pub balance_expert: f64,
    pub total: f64,
}

/// `task + α_align·align + α_balance·(balance_group + balance_expert)`.
pub fn total_loss(
    task: f64,
    align: f64,
    balance_group: f64,
    balance_expert: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        task,
        align,
        balance_group,
        balance_expert,
        total: task
            + weights.alpha_align * align
            + weights.alpha_balance * (balance_group + balance_expert),
    }
}
