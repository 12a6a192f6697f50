//! Dense → ReLU → dropout → dense → sigmoid multi-label head.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::PredictionMatrix;
use crate::error::{Error, Result};
use crate::loss::{LossGradient, DEFAULT_EPSILON};

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// D×H
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// H×U
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub dropout_rate: f64,
}

/// Parameter gradients, shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    pre_hidden: Array2<f64>,
    /// Post-ReLU, post-dropout activations.
    hidden: Array2<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1−rate)); `None` when inactive.
    dropout_mask: Option<Array2<f64>>,
    output: Array2<f64>,
    epsilon: f64,
}

impl ForwardCache {
    pub fn dropout_mask(&self) -> Option<&Array2<f64>> {
        self.dropout_mask.as_ref()
    }

    pub fn pre_hidden(&self) -> &Array2<f64> {
        &self.pre_hidden
    }
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = self.w1.dim();
        let (h2, u) = self.w2.dim();
        if h == 0 || h != h2 || self.b1.len() != h || self.b2.len() != u || d == 0 || u == 0 {
            return Err(Error::Shape(format!(
                "inconsistent parameter shapes: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                self.w1.dim(),
                self.b1.len(),
                self.w2.dim(),
                self.b2.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Flat views in the fixed order w1, b1, w2, b2.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice_memory_order().expect("contiguous"),
            self.b1.as_slice_memory_order().expect("contiguous"),
            self.w2.as_slice_memory_order().expect("contiguous"),
            self.b2.as_slice_memory_order().expect("contiguous"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_memory_order_mut().expect("contiguous"),
            self.b1.as_slice_memory_order_mut().expect("contiguous"),
            self.w2.as_slice_memory_order_mut().expect("contiguous"),
            self.b2.as_slice_memory_order_mut().expect("contiguous"),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl ParamGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            w1: Array2::zeros(p.w1.raw_dim()),
            b1: Array1::zeros(p.b1.raw_dim()),
            w2: Array2::zeros(p.w2.raw_dim()),
            b2: Array1::zeros(p.b2.raw_dim()),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice_memory_order().expect("contiguous"),
            self.b1.as_slice_memory_order().expect("contiguous"),
            self.w2.as_slice_memory_order().expect("contiguous"),
            self.b2.as_slice_memory_order().expect("contiguous"),
        ]
    }
}

/// Uniform fan-in scaled initialisation, zero biases.
///
/// Hidden weights use the ReLU-gain limit sqrt(6/D), output weights
/// sqrt(3/H).
pub fn init_params(d: usize, h: usize, u: usize, seed: u64) -> Result<MlpParams> {
    if d == 0 || h == 0 || u == 0 {
        return Err(Error::Config(format!(
            "dimensions must be positive, got D={d} H={h} U={u}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l1 = (6.0 / d as f64).sqrt();
    let l2 = (3.0 / h as f64).sqrt();
    let w1 = Array2::from_shape_simple_fn((d, h), || rng.random_range(-l1..l1));
    let w2 = Array2::from_shape_simple_fn((h, u), || rng.random_range(-l2..l2));
    Ok(MlpParams {
        w1,
        b1: Array1::zeros(h),
        w2,
        b2: Array1::zeros(u),
        dropout_rate: DEFAULT_DROPOUT,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Forward pass. Dropout is drawn from `seed` and applied only when `training`.
pub fn forward(
    params: &MlpParams,
    x: ArrayView2<'_, f64>,
    training: bool,
    seed: u64,
) -> Result<(PredictionMatrix, ForwardCache)> {
    if x.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, model expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let pre_hidden = x.dot(&params.w1) + &params.b1;
    let mut hidden = pre_hidden.mapv(|v| v.max(0.0));
    let dropout_mask = if training && params.dropout_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - params.dropout_rate;
        let mask = Array2::from_shape_simple_fn(hidden.raw_dim(), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        hidden *= &mask;
        Some(mask)
    } else {
        None
    };
    let logits = hidden.dot(&params.w2) + &params.b2;
    let eps = DEFAULT_EPSILON;
    let output = logits.mapv(|z| sigmoid(z).clamp(eps, 1.0 - eps));
    let preds = PredictionMatrix::new(output.clone())?;
    Ok((
        preds,
        ForwardCache {
            x: x.to_owned(),
            pre_hidden,
            hidden,
            dropout_mask,
            output,
            epsilon: eps,
        },
    ))
}

/// Deterministic evaluation-mode forward pass.
pub fn predict(params: &MlpParams, x: ArrayView2<'_, f64>) -> Result<PredictionMatrix> {
    Ok(forward(params, x, false, 0)?.0)
}

/// Chain rule from ∂loss/∂ŷ back to every parameter.
pub fn backward(params: &MlpParams, cache: &ForwardCache, loss_grad: &LossGradient) -> Result<ParamGrads> {
    let g = loss_grad.values();
    let (n, u) = cache.output.dim();
    if g.dim() != (n, u)
        || u != params.output_dim()
        || cache.hidden.ncols() != params.hidden_dim()
        || cache.x.ncols() != params.input_dim()
    {
        return Err(Error::Contract(format!(
            "cache/gradient shapes {:?}/{:?} do not match the parameters",
            cache.output.dim(),
            g.dim()
        )));
    }
    let eps = cache.epsilon;
    // sigmoid'(z) = ŷ(1−ŷ); zero where the output clamp is engaged
    let mut d_logits = g.to_owned();
    ndarray::Zip::from(&mut d_logits)
        .and(&cache.output)
        .for_each(|d, &y| {
            *d = if y <= eps || y >= 1.0 - eps {
                0.0
            } else {
                *d * y * (1.0 - y)
            };
        });
    let w2 = cache.hidden.t().dot(&d_logits);
    let b2 = d_logits.sum_axis(Axis(0));
    let mut d_hidden = d_logits.dot(&params.w2.t());
    if let Some(mask) = &cache.dropout_mask {
        d_hidden *= mask;
    }
    ndarray::Zip::from(&mut d_hidden)
        .and(&cache.pre_hidden)
        .for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
    let w1 = cache.x.t().dot(&d_hidden);
    let b1 = d_hidden.sum_axis(Axis(0));
    Ok(ParamGrads { w1, b1, w2, b2 })
}
