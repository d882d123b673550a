use serde::{Deserialize, Serialize};

use super::params::ParamGroup;

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub backbone: f64,
    pub feature_roi: f64,
    pub regression: f64,
    pub prototypes: f64,
}

impl GroupRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::FeatureRoi => self.feature_roi,
            ParamGroup::Regression => self.regression,
            ParamGroup::Prototypes => self.prototypes,
        }
    }
}

/// One optimizable tensor, flattened, with its gradient.
pub struct ParamSlice<'a> {
    pub name: &'a str,
    pub group: ParamGroup,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// First/second moment buffers of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction and per-group learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, slots: Vec::new() }
    }
}

impl Adam {
    /// Applies one update. Slots are matched to slices by position and
    /// created lazily on the first step.
    pub fn update(&mut self, params: Vec<ParamSlice<'_>>, rates: &GroupRates) {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| AdamSlot {
                    name: p.name.to_string(),
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
                .collect();
        }
        assert_eq!(self.slots.len(), params.len(), "optimizer state does not match parameters");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, p) in self.slots.iter_mut().zip(params) {
            debug_assert_eq!(slot.name, p.name);
            let lr = rates.get(p.group);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
