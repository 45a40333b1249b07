//! Adam optimiser and global-norm gradient clipping.

use crate::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed by parameter slot
/// and created lazily on first update.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub step: u64,
    /// `(first, second)` moment per parameter slot.
    pub moments: Vec<Option<(Tensor<F>, Tensor<F>)>>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig, slots: usize) -> Self {
        Adam {
            config,
            step: 0,
            moments: vec![None; slots],
        }
    }

    /// Apply one update to every `(slot, param, grad)` triple.
    pub fn step<'a>(
        &mut self,
        lr: f64,
        updates: impl IntoIterator<Item = (usize, &'a mut Tensor<F>, &'a Tensor<F>)>,
    ) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let step_size = F::from_f64_lossy(lr / bc1);
        let bc2_sqrt = F::from_f64_lossy(bc2.sqrt());
        let eps = F::from_f64_lossy(c.eps);
        for (slot, param, grad) in updates {
            if slot >= self.moments.len() {
                self.moments.resize(slot + 1, None);
            }
            let (m, v) = self.moments[slot]
                .get_or_insert_with(|| (param.zeros_like(), param.zeros_like()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            let pd = param.data_mut();
            for (((p, &g), m), v) in pd.iter_mut().zip(grad.data()).zip(md).zip(vd) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *p -= step_size * *m / denom;
            }
        }
    }
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    let coef = max_norm / (total + 1e-6);
    if coef < 1.0 {
        let c = F::from_f64_lossy(coef);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    total
}
