//! Synthetic mixture-of-linear-maps regression task.

use crate::error::{Error, Result};
use crate::tensor::{matvec, Matrix, Rng};

/// Inputs, targets and the latent cluster of each sample. Cluster ids are
/// for diagnostics only; models never see them.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub cluster_ids: Vec<usize>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range.clone()].to_vec(),
            cluster_ids: self.cluster_ids[range].to_vec(),
        }
    }
}

/// Cluster `c` has center `μ_c ~ N(0, center_scale²·I)` and map
/// `W_c ~ N(0, 1/input_dim)`. A sample draws `c` uniformly,
/// `x = μ_c + N(0, I)` and `y = W_c·x + noise_std·N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTask {
    pub centers: Vec<Vec<f64>>,
    pub maps: Vec<Matrix>,
    pub noise_std: f64,
}

impl MixtureTask {
    pub fn new(
        n_clusters: usize,
        input_dim: usize,
        output_dim: usize,
        center_scale: f64,
        noise_std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_clusters == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::Config(
                "mixture task needs at least one cluster and positive dims".into(),
            ));
        }
        let centers = (0..n_clusters)
            .map(|_| (0..input_dim).map(|_| center_scale * rng.normal()).collect())
            .collect();
        let std = 1.0 / (input_dim as f64).sqrt();
        let maps = (0..n_clusters)
            .map(|_| Matrix::gaussian(output_dim, input_dim, std, rng))
            .collect();
        Ok(Self {
            centers,
            maps,
            noise_std,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> TaskBatch {
        let mut batch = TaskBatch {
            inputs: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
            cluster_ids: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let c = rng.below(self.n_clusters());
            let x: Vec<f64> = self.centers[c].iter().map(|m| m + rng.normal()).collect();
            let mut y = matvec(&self.maps[c], &x).expect("task dims are consistent");
            if self.noise_std > 0.0 {
                y.iter_mut().for_each(|v| *v += self.noise_std * rng.normal());
            }
            batch.inputs.push(x);
            batch.targets.push(y);
            batch.cluster_ids.push(c);
        }
        batch
    }
}
