//! Subcommand bodies. Each writes its report to the given writers so the
//! binary and the tests share one code path.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sam_core::harness::cost::router_param_count;
use sam_core::harness::gradcheck::{check_config, GradCheckReport, TOLERANCE};
use sam_core::harness::{param_count, Experiment, ExperimentConfig, RunSummary};
use sam_core::layer::LayerParams;
use sam_core::routers::{RouterKind, RoutingDecision};
use sam_core::sim::{comm_cost, synthetic_decisions, CommReport};
use sam_core::tensor::Rng;

use crate::{metrics, CliError};

/// Central-difference step used by `gradcheck`.
pub const GRADCHECK_EPS: f64 = 1e-5;

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

/// Trains and writes one CSV row per step to `out`, or to `stdout` when no
/// path is given. The summary line goes to `stdout` in the first case and
/// `stderr` in the second.
pub fn train(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<RunSummary, CliError> {
    let mut exp = Experiment::new(cfg)?;
    let mut file;
    let (csv, summary): (&mut dyn Write, &mut dyn Write) = match out {
        Some(p) => {
            file = BufWriter::new(
                File::create(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            );
            (&mut file, stdout)
        }
        None => (stdout, stderr),
    };
    writeln!(csv, "{}", metrics::HEADER)?;
    let mut io_err = None;
    let run = exp.run_with(|m| {
        if io_err.is_none() {
            io_err = writeln!(csv, "{}", metrics::row(m)).err();
        }
    });
    csv.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let run = run?;
    let last = run.metrics.last().map_or(f64::NAN, |m| m.losses.task);
    writeln!(
        summary,
        "final task_loss={} eval_loss={} sparsity_ratio={} policy={} k={} seed={}",
        last,
        run.final_eval_loss,
        cfg.sparsity_ratio(),
        cfg.router,
        cfg.k,
        run.seed
    )?;
    Ok(run)
}

/// Parses a vector written as numbers separated by whitespace or commas.
pub fn parse_vector(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::Usage(format!("not a number: {s:?}")))
        })
        .collect()
}

/// Routes one input vector through the freshly initialised model at
/// inference (no noise) and prints the decision.
pub fn route(cfg: &ExperimentConfig, input: &str, out: &mut dyn Write) -> Result<RoutingDecision, CliError> {
    let h = parse_vector(input)?;
    if h.len() != cfg.d_model {
        return Err(CliError::Usage(format!(
            "input has {} values, expected d_model = {}",
            h.len(),
            cfg.d_model
        )));
    }
    let model = Experiment::new(cfg)?.model;
    let d = model.route(&h, &mut Rng::new(cfg.seed), false)?;
    writeln!(out, "policy: {}", cfg.router)?;
    writeln!(out, "seed: {}", cfg.seed)?;
    writeln!(out, "k: {}", cfg.k)?;
    match &d.group_scores {
        Some(g) => writeln!(out, "group_scores: {}", join(g))?,
        None => writeln!(out, "group_scores: -")?,
    }
    match d.selected_group {
        Some(g) => writeln!(out, "selected_group: {g}")?,
        None => writeln!(out, "selected_group: -")?,
    }
    if cfg.router == RouterKind::SamNonShared {
        // second level: the selected group's own router
        writeln!(out, "expert_router: {}", d.selected_group.unwrap_or(0))?;
    }
    writeln!(out, "expert_scores: {}", join(&d.expert_scores))?;
    writeln!(out, "selected_experts: {}", join(&d.selected_experts))?;
    writeln!(out, "combine_weights: {}", join(&d.combine_weights))?;
    Ok(d)
}

/// Parses `1,2,4`.
pub fn parse_k_list(text: &str) -> Result<Vec<usize>, CliError> {
    let ks: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad k in --k-list: {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Usage("--k-list needs positive integers".into()));
    }
    Ok(ks)
}

/// Traffic of seeded synthetic routing for every policy and every `k`.
/// Switch routing has one row, at `k = 1`.
pub fn simulate_comm(
    cfg: &ExperimentConfig,
    n_tokens: usize,
    k_list: &[usize],
) -> Result<Vec<CommReport>, CliError> {
    let topo = cfg.topology()?;
    let model = cfg.comm_model();
    let mut rows = Vec::new();
    for policy in RouterKind::ALL {
        let ks: &[usize] = if policy == RouterKind::Switch { &[1] } else { k_list };
        for &k in ks {
            let decisions = synthetic_decisions(policy, &topo, k, n_tokens, cfg.seed)?;
            let mut report = comm_cost(&decisions, &topo, &model, policy);
            report.k = k;
            rows.push(report);
        }
    }
    Ok(rows)
}

pub fn write_comm_csv(rows: &[CommReport], out: &mut dyn Write) -> Result<(), CliError> {
    writeln!(out, "{}", CommReport::CSV_HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn flops(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let n = cfg.n_expert();
    let p = param_count(n, cfg.d_model, cfg.d_ffn());
    writeln!(out, "policy: {}", cfg.router)?;
    writeln!(out, "seed: {}", cfg.seed)?;
    writeln!(out, "n_expert: {n}")?;
    writeln!(out, "k: {}", cfg.k)?;
    writeln!(out, "d_model: {}", cfg.d_model)?;
    writeln!(out, "d_ffn: {}", cfg.d_ffn())?;
    writeln!(out, "flop_count: {}", cfg.flops_per_token())?;
    writeln!(out, "param_count_nominal: {}", p.nominal)?;
    writeln!(out, "param_count_actual: {}", p.actual)?;
    writeln!(
        out,
        "router_param_count: {}",
        router_param_count(cfg.router, &cfg.topology()?, cfg.d_model)
    )?;
    writeln!(out, "sparsity_ratio: {}", cfg.sparsity_ratio())?;
    Ok(())
}

/// Gradient check with an optional hook that alters the analytic gradient
/// before comparison. Prints one line per (objective, block) and fails with
/// a numerical error when any relative error reaches the tolerance.
pub fn gradcheck_with(
    cfg: &ExperimentConfig,
    corrupt: Option<&dyn Fn(&mut LayerParams)>,
    out: &mut dyn Write,
) -> Result<Vec<GradCheckReport>, CliError> {
    let reports = check_config(cfg, GRADCHECK_EPS, corrupt)?;
    writeln!(out, "policy: {}", cfg.router)?;
    writeln!(out, "seed: {}", cfg.seed)?;
    writeln!(out, "objective,block,max_rel_error,checked,excluded")?;
    for r in &reports {
        for b in &r.blocks {
            writeln!(
                out,
                "{},{},{:e},{},{}",
                r.objective, b.name, b.max_rel_error, b.checked, b.excluded
            )?;
        }
    }
    let worst = reports
        .iter()
        .map(GradCheckReport::max_rel_error)
        .fold(0.0, f64::max);
    let ok = reports.iter().all(|r| r.passed(TOLERANCE));
    writeln!(
        out,
        "max_rel_error: {worst:e} (tolerance {TOLERANCE:e}) {}",
        if ok { "PASS" } else { "FAIL" }
    )?;
    if ok {
        Ok(reports)
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {worst:e}"
        )))
    }
}

pub fn gradcheck(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Vec<GradCheckReport>, CliError> {
    gradcheck_with(cfg, None, out)
}
