//! Per-step metrics as CSV.

use sam_core::harness::StepMetrics;

pub const HEADER: &str = "step,task_loss,align_loss,balance_group_loss,balance_expert_loss,\
total_loss,comm_messages,comm_bytes,dropped_fraction,expert_entropy,flops_per_token,sparsity_ratio";

/// One CSV row. Floats are written in their shortest exact form.
pub fn row(m: &StepMetrics) -> String {
    let l = &m.losses;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        m.step,
        l.task,
        l.align,
        l.balance_group,
        l.balance_expert,
        l.total,
        m.comm_messages,
        m.comm_bytes,
        m.dropped_fraction,
        m.expert_entropy,
        m.flops_per_token,
        m.sparsity_ratio
    )
}
