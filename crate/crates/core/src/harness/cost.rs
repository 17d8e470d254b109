//! Per-token compute and per-layer parameter accounting.

use crate::error::{Error, Result};
use crate::routers::{RouterKind, Topology};

use super::config::ExperimentConfig;

/// Multiply-adds of the `k` active experts for one token, counted as two
/// flops each: `4 · k · d_model · d_ffn`.
pub fn flop_count(k: usize, d_model: usize, d_ffn: usize) -> u64 {
    4 * k as u64 * d_model as u64 * d_ffn as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// `n_expert · d_model · d_ffn` (one weight block per expert).
    pub nominal: u64,
    /// Both FFN matrices: `2 · nominal`.
    pub actual: u64,
}

/// Expert parameters of one layer, router excluded.
pub fn param_count(n_expert: usize, d_model: usize, d_ffn: usize) -> ParamCount {
    let nominal = n_expert as u64 * d_model as u64 * d_ffn as u64;
    ParamCount {
        nominal,
        actual: 2 * nominal,
    }
}

pub fn router_param_count(kind: RouterKind, topo: &Topology, d_model: usize) -> u64 {
    let rows = match kind {
        RouterKind::SamNonShared => topo.n_groups + topo.n_expert(),
        _ => topo.n_expert(),
    };
    (rows * d_model) as u64
}

/// `n_expert / k`.
pub fn sparsity_ratio(n_expert: usize, k: usize) -> f64 {
    n_expert as f64 / k as f64
}

/// Returns the shared per-token flop count, or an error naming the first
/// config that differs.
pub fn ensure_iso_flop(configs: &[ExperimentConfig]) -> Result<u64> {
    let first = configs
        .first()
        .ok_or(Error::Empty("comparison set"))?
        .flops_per_token();
    for (i, c) in configs.iter().enumerate() {
        if c.flops_per_token() != first {
            return Err(Error::Config(format!(
                "config {i} costs {} flops per token but config 0 costs {first}; refusing to compare",
                c.flops_per_token()
            )));
        }
    }
    Ok(first)
}
