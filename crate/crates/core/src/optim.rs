//! Momentum-free gradient descent shared by every strategy.

use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};
use crate::field::ParamLayout;

/// Plain gradient descent with separate step sizes for grid and decoder
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    pub grid_lr: f64,
    pub decoder_lr: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            grid_lr: 1.0,
            decoder_lr: 1e-3,
        }
    }
}

impl DescentConfig {
    pub fn uniform(lr: f64) -> Self {
        Self {
            grid_lr: lr,
            decoder_lr: lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_lr >= 0.0 && self.decoder_lr >= 0.0)
            || !self.grid_lr.is_finite()
            || !self.decoder_lr.is_finite()
        {
            return Err(MapError::Config(
                "step sizes must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn lr_for(&self, layout: &ParamLayout, index: usize) -> f64 {
        if layout.is_grid(index) {
            self.grid_lr
        } else {
            self.decoder_lr
        }
    }

    /// `params -= lr * grad`, entrywise.
    pub fn apply(&self, layout: &ParamLayout, params: &mut [f64], grad: &[f64]) {
        let g = layout.grid_len();
        for (p, d) in params[..g].iter_mut().zip(&grad[..g]) {
            *p -= self.grid_lr * d;
        }
        for (p, d) in params[g..].iter_mut().zip(&grad[g..]) {
            *p -= self.decoder_lr * d;
        }
    }

    /// Descent step on `data + ½ Σ k_i (θ_i − anchor_i)²` that treats the
    /// quadratic anchor implicitly, so arbitrarily stiff `k` stays stable.
    pub fn apply_anchored(
        &self,
        layout: &ParamLayout,
        params: &mut [f64],
        grad: &[f64],
        anchor: &[f64],
        stiffness: &[f64],
    ) {
        for i in 0..params.len() {
            let lr = self.lr_for(layout, i);
            let k = stiffness.get(i).copied().unwrap_or(0.0);
            let a = anchor.get(i).copied().unwrap_or(params[i]);
            params[i] = (params[i] - lr * grad[i] + lr * k * a) / (1.0 + lr * k);
        }
    }
}
