use crate::error::{Error, Result};
use crate::losses::{GroupNllMode, LossWeights};
use crate::routers::{RouterKind, Topology};
use crate::sim::{CommModel, Sharding};

use super::cost::{flop_count, sparsity_ratio};

/// Every knob of one experiment. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub d_model: usize,
    /// FFN width of a single-expert model; each expert gets `d_ffn_base / k`.
    pub d_ffn_base: usize,
    pub n_groups: usize,
    pub experts_per_group: usize,
    pub k: usize,
    pub router: RouterKind,
    pub capacity_factor: f64,
    pub alpha_balance: f64,
    pub alpha_align: f64,
    pub group_nll_mode: GroupNllMode,
    pub noise_scale: f64,
    pub router_init_std: f64,
    pub sharding: Sharding,
    pub bytes_per_element: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub n_clusters: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    pub center_scale: f64,
    pub eval_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_ffn_base: 64,
            n_groups: 2,
            experts_per_group: 2,
            k: 2,
            router: RouterKind::SamNonShared,
            capacity_factor: 1.25,
            alpha_balance: 0.01,
            alpha_align: 0.01,
            group_nll_mode: GroupNllMode::Verbatim,
            noise_scale: 1.0,
            router_init_std: 0.1,
            sharding: Sharding::RoundRobin,
            bytes_per_element: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr: 1e-3,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            n_clusters: 16,
            input_dim: 32,
            noise_std: 0.0,
            center_scale: 1.0,
            eval_size: 1024,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 26] = [
        "d_model",
        "d_ffn_base",
        "n_groups",
        "experts_per_group",
        "k",
        "router",
        "capacity_factor",
        "alpha_balance",
        "alpha_align",
        "group_nll_mode",
        "noise_scale",
        "router_init_std",
        "sharding",
        "bytes_per_element",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "lr",
        "batch_size",
        "steps",
        "seed",
        "n_clusters",
        "input_dim",
        "noise_std",
        "center_scale",
        "eval_size",
    ];

    /// Sets one field from its textual value. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "d_ffn_base" => self.d_ffn_base = parse(key, value)?,
            "n_groups" => self.n_groups = parse(key, value)?,
            "experts_per_group" => self.experts_per_group = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "router" => self.router = value.parse()?,
            "capacity_factor" => self.capacity_factor = parse(key, value)?,
            "alpha_balance" => self.alpha_balance = parse(key, value)?,
            "alpha_align" => self.alpha_align = parse(key, value)?,
            "group_nll_mode" => self.group_nll_mode = value.parse()?,
            "noise_scale" => self.noise_scale = parse(key, value)?,
            "router_init_std" => self.router_init_std = parse(key, value)?,
            "sharding" => self.sharding = value.parse()?,
            "bytes_per_element" => self.bytes_per_element = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_clusters" => self.n_clusters = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "center_scale" => self.center_scale = parse(key, value)?,
            "eval_size" => self.eval_size = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// All fields as `(key, value)` text, in [`Self::KEYS`] order. Floats use
    /// the shortest representation that parses back to the same value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let v = [
            self.d_model.to_string(),
            self.d_ffn_base.to_string(),
            self.n_groups.to_string(),
            self.experts_per_group.to_string(),
            self.k.to_string(),
            self.router.name().to_string(),
            self.capacity_factor.to_string(),
            self.alpha_balance.to_string(),
            self.alpha_align.to_string(),
            self.group_nll_mode.name().to_string(),
            self.noise_scale.to_string(),
            self.router_init_std.to_string(),
            self.sharding.name().to_string(),
            self.bytes_per_element.to_string(),
            self.adam_beta1.to_string(),
            self.adam_beta2.to_string(),
            self.adam_eps.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.steps.to_string(),
            self.seed.to_string(),
            self.n_clusters.to_string(),
            self.input_dim.to_string(),
            self.noise_std.to_string(),
            self.center_scale.to_string(),
            self.eval_size.to_string(),
        ];
        Self::KEYS.into_iter().zip(v).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ffn_base", self.d_ffn_base),
            ("n_groups", self.n_groups),
            ("experts_per_group", self.experts_per_group),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("n_clusters", self.n_clusters),
            ("input_dim", self.input_dim),
            ("bytes_per_element", self.bytes_per_element as usize),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !self.d_ffn_base.is_multiple_of(self.k) {
            return bad(format!(
                "k must divide d_ffn_base (k = {}, d_ffn_base = {})",
                self.k, self.d_ffn_base
            ));
        }
        if self.input_dim != self.d_model {
            return bad(format!(
                "input_dim ({}) must equal d_model ({}): inputs feed the routed layer directly",
                self.input_dim, self.d_model
            ));
        }
        match self.router {
            RouterKind::Switch if self.k != 1 => {
                return bad(format!("switch routing activates one expert; got k = {}", self.k))
            }
            RouterKind::MoeTopK if self.k > self.n_expert() => {
                return bad(format!(
                    "k = {} exceeds the {} available experts",
                    self.k,
                    self.n_expert()
                ))
            }
            kind if kind.is_hierarchical() && self.k > self.experts_per_group => {
                return bad(format!(
                    "k = {} exceeds experts_per_group = {}",
                    self.k, self.experts_per_group
                ))
            }
            _ => {}
        }
        if !(self.capacity_factor > 0.0 && self.capacity_factor.is_finite()) {
            return bad("capacity_factor must be positive".into());
        }
        LossWeights::new(self.alpha_balance, self.alpha_align)?;
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("router_init_std", self.router_init_std),
            ("lr", self.lr),
            ("noise_std", self.noise_std),
            ("center_scale", self.center_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad("adam_eps must be positive".into());
        }
        Ok(())
    }

    pub fn n_expert(&self) -> usize {
        self.n_groups * self.experts_per_group
    }

    pub fn d_ffn(&self) -> usize {
        self.d_ffn_base / self.k
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::new(self.n_groups, self.experts_per_group)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_balance: self.alpha_balance,
            alpha_align: self.alpha_align,
        }
    }

    pub fn comm_model(&self) -> CommModel {
        CommModel {
            bytes_per_element: self.bytes_per_element,
            d_model: self.d_model as u64,
            sharding: self.sharding,
        }
    }

    pub fn flops_per_token(&self) -> u64 {
        flop_count(self.k, self.d_model, self.d_ffn())
    }

    pub fn sparsity_ratio(&self) -> f64 {
        sparsity_ratio(self.n_expert(), self.k)
    }

    /// Single-expert model of width `d_ffn_base`.
    pub fn dense(&self) -> Self {
        Self {
            n_groups: 1,
            experts_per_group: 1,
            k: 1,
            router: RouterKind::Switch,
            ..self.clone()
        }
    }
}
