//! Expert FFNs and the sparse routed layer.

use crate::error::{Error, Result};
use crate::routers::{
    rescore, route, router_backward, DecisionGrad, RouterKind, RouterParams, RoutingDecision,
    Topology,
};
use crate::tensor::{dot, matvec, Matrix, Rng};

/// Two-matrix ReLU feed-forward expert: `w_out · relu(w_in · h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// d_ffn × d_model
    pub w_in: Matrix,
    /// d_model × d_ffn
    pub w_out: Matrix,
}

impl ExpertParams {
    pub fn new(w_in: Matrix, w_out: Matrix) -> Result<Self> {
        if w_in.cols() != w_out.rows() || w_in.rows() != w_out.cols() {
            return Err(Error::Dim {
                op: "ExpertParams::new",
                expected: w_in.rows(),
                got: w_out.cols(),
            });
        }
        Ok(Self { w_in, w_out })
    }

    /// He-style init: `w_in ~ N(0, 2/d_model)`, `w_out ~ N(0, 1/d_ffn)`.
    pub fn init(d_model: usize, d_ffn: usize, rng: &mut Rng) -> Self {
        Self {
            w_in: Matrix::gaussian(d_ffn, d_model, (2.0 / d_model as f64).sqrt(), rng),
            w_out: Matrix::gaussian(d_model, d_ffn, (1.0 / d_ffn as f64).sqrt(), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_in: self.w_in.zeros_like(),
            w_out: self.w_out.zeros_like(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_in.cols()
    }

    pub fn d_ffn(&self) -> usize {
        self.w_in.rows()
    }
}

/// Intermediate values of one expert evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTrace {
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

pub fn expert_forward(e: &ExpertParams, h: &[f64]) -> Result<Vec<f64>> {
    Ok(expert_trace(e, h)?.out)
}

fn expert_trace(e: &ExpertParams, h: &[f64]) -> Result<ExpertTrace> {
    let pre = matvec(&e.w_in, h)?;
    let act: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let out = matvec(&e.w_out, &act)?;
    Ok(ExpertTrace { pre, out })
}

/// Adds the gradients of `⟨d_out, E(h)⟩` into `acc` and `dh`.
fn expert_backward(
    e: &ExpertParams,
    h: &[f64],
    trace: &ExpertTrace,
    d_out: &[f64],
    acc: &mut ExpertParams,
    dh: &mut [f64],
) {
    let act: Vec<f64> = trace.pre.iter().map(|&a| a.max(0.0)).collect();
    acc.w_out.add_outer(d_out, &act);
    let mut d_act = vec![0.0; e.d_ffn()];
    e.w_out.add_tmatvec(d_out, &mut d_act);
    let d_pre: Vec<f64> = d_act
        .iter()
        .zip(&trace.pre)
        .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
        .collect();
    acc.w_in.add_outer(&d_pre, h);
    e.w_in.add_tmatvec(&d_pre, dh);
}

/// All trainable weights of a layer. Also used as the gradient and
/// optimizer-moment container, since those share its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub router: RouterParams,
    pub experts: Vec<ExpertParams>,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            router: self.router.zeros_like(),
            experts: self.experts.iter().map(ExpertParams::zeros_like).collect(),
        }
    }

    /// Named blocks: router blocks first, then `expert[i].w_in`,
    /// `expert[i].w_out` in expert order.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut v = self.router.blocks();
        for (i, e) in self.experts.iter().enumerate() {
            v.push((format!("expert[{i}].w_in"), &e.w_in));
            v.push((format!("expert[{i}].w_out"), &e.w_out));
        }
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.router.blocks_mut();
        for e in &mut self.experts {
            v.push(&mut e.w_in);
            v.push(&mut e.w_out);
        }
        v
    }

    pub fn router_block_count(&self) -> usize {
        self.router.blocks().len()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// `self += scale · other`, block by block.
    pub fn add_scaled(&mut self, other: &LayerParams, scale: f64) {
        for (a, (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.data_mut()
                .iter_mut()
                .zip(b.data())
                .for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, m)| m.data().iter())
            .fold(0.0, |a: f64, &x| a.max(x.abs()))
    }
}

/// Sparse expert layer: a router over `topo.n_expert()` experts, of which
/// `k` run per token.
#[derive(Debug, Clone, PartialEq)]
pub struct SamLayer {
    pub topo: Topology,
    pub k: usize,
    pub params: LayerParams,
}

/// Forward values retained for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub h: Vec<f64>,
    pub decision: RoutingDecision,
    /// Per selected expert: `None` if dropped by capacity.
    pub traces: Vec<Option<ExpertTrace>>,
}

impl LayerCache {
    /// ReLU on/off pattern of every evaluated expert, for kink detection.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.traces
            .iter()
            .flatten()
            .flat_map(|t| t.pre.iter().map(|&a| a > 0.0))
            .collect()
    }

    /// Smallest |pre-activation| over evaluated experts.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.traces
            .iter()
            .flatten()
            .flat_map(|t| t.pre.iter())
            .fold(f64::INFINITY, |m, &a| m.min(a.abs()))
    }
}

/// Gradients for one backward call.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub params: LayerParams,
    pub dh: Vec<f64>,
}

impl SamLayer {
    pub fn new(topo: Topology, k: usize, router: RouterParams, experts: Vec<ExpertParams>) -> Result<Self> {
        if experts.len() != topo.n_expert() {
            return Err(Error::Dim {
                op: "SamLayer expert count",
                expected: topo.n_expert(),
                got: experts.len(),
            });
        }
        let d_model = experts[0].d_model();
        let d_ffn = experts[0].d_ffn();
        if experts
            .iter()
            .any(|e| e.d_model() != d_model || e.d_ffn() != d_ffn)
        {
            return Err(Error::Config("all experts must share d_model and d_ffn".into()));
        }
        router.validate(&topo, d_model)?;
        match router.kind() {
            RouterKind::Switch if k != 1 => return Err(Error::KOutOfRange { k, max: 1 }),
            RouterKind::MoeTopK if k == 0 || k > topo.n_expert() => {
                return Err(Error::KOutOfRange {
                    k,
                    max: topo.n_expert(),
                })
            }
            kind if kind.is_hierarchical() && (k == 0 || k > topo.experts_per_group) => {
                return Err(Error::KOutOfRange {
                    k,
                    max: topo.experts_per_group,
                })
            }
            _ => {}
        }
        Ok(Self {
            topo,
            k,
            params: LayerParams { router, experts },
        })
    }

    /// Random layer: experts He-initialised, router weights N(0, router_std²).
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        kind: RouterKind,
        topo: Topology,
        k: usize,
        d_model: usize,
        d_ffn: usize,
        router_std: f64,
        noise_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let router = RouterParams::init(kind, &topo, d_model, router_std, noise_scale, rng);
        let experts = (0..topo.n_expert())
            .map(|_| ExpertParams::init(d_model, d_ffn, rng))
            .collect();
        Self::new(topo, k, router, experts)
    }

    pub fn d_model(&self) -> usize {
        self.params.experts[0].d_model()
    }

    pub fn d_ffn(&self) -> usize {
        self.params.experts[0].d_ffn()
    }

    pub fn route(&self, h: &[f64], rng: &mut Rng, train_mode: bool) -> Result<RoutingDecision> {
        route(&self.params.router, &self.topo, h, self.k, rng, train_mode)
    }

    /// Runs the experts chosen by `decision`, skipping those whose
    /// `dropped` flag is set, and combines their outputs.
    pub fn forward_routed(
        &self,
        h: &[f64],
        decision: RoutingDecision,
        dropped: &[bool],
    ) -> Result<(Vec<f64>, LayerCache)> {
        if h.len() != self.d_model() {
            return Err(Error::Dim {
                op: "layer input",
                expected: self.d_model(),
                got: h.len(),
            });
        }
        if dropped.len() != decision.k() {
            return Err(Error::Dim {
                op: "drop mask",
                expected: decision.k(),
                got: dropped.len(),
            });
        }
        let mut y = vec![0.0; self.d_model()];
        let mut traces = Vec::with_capacity(decision.k());
        for ((&e, &w), &drop) in decision
            .selected_experts
            .iter()
            .zip(&decision.combine_weights)
            .zip(dropped)
        {
            if drop {
                traces.push(None);
                continue;
            }
            let t = expert_trace(&self.params.experts[e], h)?;
            y.iter_mut().zip(&t.out).for_each(|(a, b)| *a += w * b);
            traces.push(Some(t));
        }
        Ok((
            y,
            LayerCache {
                h: h.to_vec(),
                decision,
                traces,
            },
        ))
    }

    /// Route then combine the selected experts' outputs.
    pub fn forward(
        &self,
        h: &[f64],
        rng: &mut Rng,
        train_mode: bool,
    ) -> Result<(Vec<f64>, RoutingDecision, LayerCache)> {
        let d = self.route(h, rng, train_mode)?;
        let (y, cache) = self.forward_routed(h, d, &vec![false; self.k])?;
        Ok((y, cache.decision.clone(), cache))
    }

    /// Forward with the selection of `fixed` held constant. Scores and
    /// weights are recomputed from the current parameters.
    pub fn forward_frozen(
        &self,
        h: &[f64],
        fixed: &RoutingDecision,
        dropped: &[bool],
    ) -> Result<(Vec<f64>, LayerCache)> {
        let d = rescore(&self.params.router, &self.topo, h, fixed)?;
        self.forward_routed(h, d, dropped)
    }

    /// Adds the gradients of `⟨dy, y⟩ + score terms` into `acc` and
    /// returns d/dh. `extra` carries gradients on the decision's scores from
    /// auxiliary losses; its `combine` field is ignored.
    pub fn accumulate_backward(
        &self,
        cache: &LayerCache,
        dy: &[f64],
        extra: Option<&DecisionGrad>,
        acc: &mut LayerParams,
    ) -> Result<Vec<f64>> {
        if dy.len() != self.d_model() {
            return Err(Error::Dim {
                op: "layer_backward dy",
                expected: self.d_model(),
                got: dy.len(),
            });
        }
        let d = &cache.decision;
        if cache.traces.len() != d.k() || cache.h.len() != self.d_model() {
            return Err(Error::Invalid("cache does not match this layer".into()));
        }
        let mut dh = vec![0.0; self.d_model()];
        let mut grad = DecisionGrad {
            combine: vec![0.0; d.k()],
            ..extra.cloned().unwrap_or_default()
        };
        for (j, trace) in cache.traces.iter().enumerate() {
            let Some(t) = trace else { continue };
            let e = d.selected_experts[j];
            if e >= self.params.experts.len() || t.out.len() != self.d_model() {
                return Err(Error::Invalid("cache does not match this layer".into()));
            }
            grad.combine[j] = dot(dy, &t.out);
            let d_out: Vec<f64> = dy.iter().map(|v| v * d.combine_weights[j]).collect();
            expert_backward(
                &self.params.experts[e],
                &cache.h,
                t,
                &d_out,
                &mut acc.experts[e],
                &mut dh,
            );
        }
        router_backward(
            &self.params.router,
            &self.topo,
            &cache.h,
            d,
            &grad,
            &mut acc.router,
            &mut dh,
        )?;
        Ok(dh)
    }

    /// Gradients of `⟨dy, y⟩` for one token. Experts that were not run
    /// receive exactly zero gradient.
    pub fn backward(&self, cache: &LayerCache, dy: &[f64]) -> Result<LayerGrads> {
        let mut params = self.params.zeros_like();
        let dh = self.accumulate_backward(cache, dy, None, &mut params)?;
        Ok(LayerGrads { params, dh })
    }
}
