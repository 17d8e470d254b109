use crate::layer::LayerParams;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: LayerParams,
    v: LayerParams,
}

impl Adam {
    pub fn new(shape: &LayerParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: shape.zeros_like(),
            v: shape.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn update(&mut self, params: &mut LayerParams, grads: &LayerParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
            .zip(grads.blocks());
        for (((p, m), v), (_, g)) in blocks {
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
