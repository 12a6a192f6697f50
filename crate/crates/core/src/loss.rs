//! Binary cross-entropy, the correlation-matching penalty and their blend.
//!
//! The blended objective for a batch is
//!
//! ```text
//! total = (1 − ρ) · mean_i(e_i) + ρ · c / 2
//! e_i   = −(1/U) Σ_k [ y log ŷ + (1 − y) log(1 − ŷ) ]
//! c     = Σ_{(a,b) ∈ mask} | p_y(a,b) − p_ŷ(a,b) | / (0.5 (U² − U))
//! ```
//!
//! `c` lives in [0, 2] for the full upper-triangle mask, so `c / 2` and the
//! mean BCE are on comparable scales. Gradients are analytic; the Pearson
//! term is differentiated through both the covariance and the two spread
//! factors.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::correlation::{
    ColumnStats, CorrelationMatrix, LabelMatrix, PairMask, PredictionMatrix, DEFAULT_SIGMA_FLOOR,
};
use crate::error::{Error, Result};

/// Default clamp margin for predicted probabilities.
pub const DEFAULT_EPSILON: f64 = 1e-7;

/// Where the ground-truth correlation target comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrTarget {
    /// Recompute from each batch's labels.
    #[default]
    Batch,
    /// A fixed (e.g. dataset-level) matrix.
    Fixed(CorrelationMatrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub sigma_floor: f64,
    pub mask: PairMask,
    #[serde(default)]
    pub target: CorrTarget,
}

impl LossConfig {
    /// Full upper-triangle mask over `u` classes with default ε and σ floor.
    pub fn new(rho: f64, u: usize) -> Result<Self> {
        let cfg = Self {
            rho,
            epsilon: DEFAULT_EPSILON,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            mask: PairMask::full(u),
            target: CorrTarget::Batch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_mask(mut self, mask: PairMask) -> Result<Self> {
        self.mask = mask;
        self.validate()?;
        Ok(self)
    }

    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        self.rho = rho;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.1) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.1), got {}",
                self.epsilon
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        if let CorrTarget::Fixed(m) = &self.target {
            if m.dim() != self.mask.dim() {
                return Err(Error::Config(format!(
                    "fixed target is {0}x{0} but mask is {1}x{1}",
                    m.dim(),
                    self.mask.dim()
                )));
            }
        }
        Ok(())
    }

    /// Number of class pairs the penalty is normalised by, 0.5(U² − U).
    pub fn pair_norm(&self) -> f64 {
        let u = self.mask.dim() as f64;
        0.5 * (u * u - u)
    }
}

/// One evaluation of the blended objective and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossValue {
    pub total: f64,
    /// Mean per-sample BCE.
    pub bce_part: f64,
    /// Correlation penalty `c` (before halving).
    pub corr_part: f64,
}

impl LossValue {
    pub fn compose(rho: f64, bce_part: f64, corr_part: f64) -> Self {
        Self {
            total: (1.0 - rho) * bce_part + rho * corr_part / 2.0,
            bce_part,
            corr_part,
        }
    }
}

/// ∂total/∂ŷ, same shape as the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient(pub Array2<f64>);

impl LossGradient {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

fn check_shapes(y: &LabelMatrix, yhat: &PredictionMatrix) -> Result<()> {
    if y.values().dim() != yhat.values().dim() {
        return Err(Error::Shape(format!(
            "labels are {:?} but predictions are {:?}",
            y.values().dim(),
            yhat.values().dim()
        )));
    }
    Ok(())
}

fn check_mask(cfg: &LossConfig, u: usize) -> Result<()> {
    if cfg.mask.dim() != u {
        return Err(Error::Shape(format!(
            "mask is {0}x{0} but batch has {1} classes",
            cfg.mask.dim(),
            u
        )));
    }
    Ok(())
}

/// Per-sample binary cross-entropy, averaged over classes. Predictions are
/// clamped into `[epsilon, 1 − epsilon]` before the logarithm.
pub fn bce(y: &LabelMatrix, yhat: &PredictionMatrix, epsilon: f64) -> Result<Vec<f64>> {
    check_shapes(y, yhat)?;
    let u = y.n_classes() as f64;
    Ok(y.values()
        .rows()
        .into_iter()
        .zip(yhat.values().rows())
        .map(|(yr, pr)| {
            let s: f64 = yr
                .iter()
                .zip(pr.iter())
                .map(|(&t, &p)| {
                    let p = p.clamp(epsilon, 1.0 - epsilon);
                    t * p.ln() + (1.0 - t) * (1.0 - p).ln()
                })
                .sum();
            -s / u
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ground-truth correlations for the batch according to the configured target.
fn target_matrix(y: &LabelMatrix, cfg: &LossConfig) -> Result<CorrelationMatrix> {
    match &cfg.target {
        CorrTarget::Batch => Ok(ColumnStats::new(y.view(), cfg.sigma_floor)?.matrix()),
        CorrTarget::Fixed(m) => Ok(m.clone()),
    }
}

/// Sum of masked |p_y − p_ŷ| over pairs valid in both matrices, unnormalised.
pub(crate) fn masked_abs_diff(target: &CorrelationMatrix, pred: &CorrelationMatrix, mask: &PairMask) -> f64 {
    mask.pairs()
        .filter(|&(a, b)| target.valid[[a, b]] && pred.valid[[a, b]])
        .map(|(a, b)| ((target.values[[a, b]] + 1.0) - (pred.values[[a, b]] + 1.0)).abs())
        .sum()
}

/// Correlation-matching penalty `c` for one batch.
pub fn corr_loss(y: &LabelMatrix, yhat: &PredictionMatrix, cfg: &LossConfig) -> Result<f64> {
    check_shapes(y, yhat)?;
    check_mask(cfg, y.n_classes())?;
    let target = target_matrix(y, cfg)?;
    let pred = ColumnStats::new(yhat.view(), cfg.sigma_floor)?.matrix();
    Ok(masked_abs_diff(&target, &pred, &cfg.mask) / cfg.pair_norm())
}

/// Blended objective for one batch.
pub fn combined_loss(y: &LabelMatrix, yhat: &PredictionMatrix, cfg: &LossConfig) -> Result<LossValue> {
    let e = bce(y, yhat, cfg.epsilon)?;
    let c = corr_loss(y, yhat, cfg)?;
    Ok(LossValue::compose(cfg.rho, mean(&e), c))
}

/// Analytic ∂total/∂ŷ.
pub fn combined_loss_gradient(
    y: &LabelMatrix,
    yhat: &PredictionMatrix,
    cfg: &LossConfig,
) -> Result<LossGradient> {
    Ok(loss_and_gradient(y, yhat, cfg)?.1)
}

/// Value and gradient in one pass over the batch.
///
/// With ρ = 0 the correlation gradient is skipped entirely, so the result is
/// bit-identical to a plain mean-BCE backward pass.
pub fn loss_and_gradient(
    y: &LabelMatrix,
    yhat: &PredictionMatrix,
    cfg: &LossConfig,
) -> Result<(LossValue, LossGradient)> {
    check_shapes(y, yhat)?;
    check_mask(cfg, y.n_classes())?;
    let (n, u) = y.values().dim();
    let e = bce(y, yhat, cfg.epsilon)?;

    let target = target_matrix(y, cfg)?;
    let pstats = ColumnStats::new(yhat.view(), cfg.sigma_floor)?;
    let pred = pstats.matrix();
    let c = masked_abs_diff(&target, &pred, &cfg.mask) / cfg.pair_norm();
    let value = LossValue::compose(cfg.rho, mean(&e), c);

    let mut grad = bce_gradient(
        y.view(),
        yhat.view(),
        cfg.epsilon,
        (1.0 - cfg.rho) / (n * u) as f64,
    );
    if cfg.rho > 0.0 {
        let scale = cfg.rho / 2.0 / cfg.pair_norm();
        add_corr_gradient(&mut grad, &target, &pstats, &cfg.mask, scale);
    }
    Ok((value, LossGradient(grad)))
}

/// `scale · (ŷ − y) / (ŷ(1 − ŷ))`, zero where the clamp is active.
fn bce_gradient(y: ArrayView2<'_, f64>, yhat: ArrayView2<'_, f64>, epsilon: f64, scale: f64) -> Array2<f64> {
    let mut g = Array2::zeros(y.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(&y)
        .and(&yhat)
        .for_each(|g, &t, &p| {
            *g = if p < epsilon || p > 1.0 - epsilon {
                0.0
            } else {
                scale * (p - t) / (p * (1.0 - p))
            };
        });
    g
}

/// Accumulate `scale · Σ_pairs ∂|p_y − p_ŷ|/∂ŷ` into `grad`.
///
/// For p = C / (Sa·Sb) with C = Σ(a−ā)(b−b̄) and S = sqrt(Σ(x−x̄)²):
/// ∂p/∂a_i = [(b_i − b̄)/Sb − p·(a_i − ā)/Sa] / Sa, dropping the second term
/// when Sa sits at the floor (the floor is a constant).
fn add_corr_gradient(
    grad: &mut Array2<f64>,
    target: &CorrelationMatrix,
    stats: &ColumnStats,
    mask: &PairMask,
    scale: f64,
) {
    for (a, b) in mask.pairs() {
        if !(target.valid[[a, b]] && stats.pair_valid(a, b)) {
            continue;
        }
        let p = stats.raw_pearson(a, b);
        let diff = target.values[[a, b]] - p.clamp(-1.0, 1.0);
        if diff == 0.0 {
            continue;
        }
        // d|t − p|/dp = −sign(t − p)
        let outer = -diff.signum() * scale;
        let (sa, sb) = (stats.sigma[a], stats.sigma[b]);
        let ca = stats.centered.column(a);
        let cb = stats.centered.column(b);
        let self_a = if stats.is_floored(a) { 0.0 } else { p / sa };
        let self_b = if stats.is_floored(b) { 0.0 } else { p / sb };
        for i in 0..ca.len() {
            grad[[i, a]] += outer * (cb[i] / sb - self_a * ca[i]) / sa;
            grad[[i, b]] += outer * (ca[i] / sa - self_b * cb[i]) / sb;
        }
    }
}
