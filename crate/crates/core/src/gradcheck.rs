//! Central finite-difference check of the model + loss gradient.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::correlation::{correlation_matrix, LabelMatrix, DEFAULT_SIGMA_FLOOR};
use crate::error::Result;
use crate::loss::{combined_loss, loss_and_gradient, LossConfig};
use crate::model::{backward, forward, init_params, MlpParams};

/// Instances whose ReLU inputs or masked correlation gaps come closer than
/// this to a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub step: f64,
    pub rhos: [f64; 3],
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            instances: 100,
            step: 1e-5,
            rhos: [0.0, 0.45, 1.0],
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub redrawn: usize,
    pub parameters_checked: usize,
    pub max_relative_error: f64,
}

/// |a − n| / max(|a|, |n|, 1e-3): relative error with an absolute fallback
/// near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(KINK_MARGIN)
}

struct Instance {
    params: MlpParams,
    x: Array2<f64>,
    y: LabelMatrix,
    loss: LossConfig,
}

fn draw(rng: &mut ChaCha8Rng, rho: f64) -> Result<Instance> {
    let u = rng.random_range(2..=8);
    let n = rng.random_range(4..=64);
    let d = rng.random_range(2..=6);
    let h = rng.random_range(2..=6);
    let mut params = init_params(d, h, u, rng.random())?.with_dropout(0.0)?;
    params
        .b1
        .mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    params
        .b2
        .mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let x = Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
    let y = LabelMatrix::new(Array2::from_shape_simple_fn((n, u), || {
        if rng.random::<f64>() < 0.5 {
            1.0
        } else {
            0.0
        }
    }))?;
    Ok(Instance {
        params,
        x,
        y,
        loss: LossConfig::new(rho, u)?,
    })
}

fn near_kink(inst: &Instance) -> Result<bool> {
    let (yhat, cache) = forward(&inst.params, inst.x.view(), false, 0)?;
    if cache.pre_hidden().iter().any(|z| z.abs() < KINK_MARGIN) {
        return Ok(true);
    }
    if yhat
        .values()
        .iter()
        .any(|&p| p <= inst.loss.epsilon || p >= 1.0 - inst.loss.epsilon)
    {
        return Ok(true);
    }
    let gt = correlation_matrix(inst.y.view(), DEFAULT_SIGMA_FLOOR)?;
    let pr = correlation_matrix(yhat.view(), DEFAULT_SIGMA_FLOOR)?;
    Ok(inst.loss.mask.pairs().any(|(a, b)| {
        gt.valid[[a, b]] && pr.valid[[a, b]] && (gt.values[[a, b]] - pr.values[[a, b]]).abs() < KINK_MARGIN
    }))
}

fn total(inst: &Instance, params: &MlpParams) -> Result<f64> {
    let (yhat, _) = forward(params, inst.x.view(), false, 0)?;
    Ok(combined_loss(&inst.y, &yhat, &inst.loss)?.total)
}

fn check(inst: &Instance, step: f64) -> Result<(usize, f64)> {
    let (yhat, cache) = forward(&inst.params, inst.x.view(), false, 0)?;
    let (_, g) = loss_and_gradient(&inst.y, &yhat, &inst.loss)?;
    let grads = backward(&inst.params, &cache, &g)?;
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();

    let mut p = inst.params.clone();
    let mut worst = 0.0f64;
    let mut k = 0;
    for t in 0..4 {
        let len = p.tensors()[t].len();
        for i in 0..len {
            let orig = p.tensors()[t][i];
            p.tensors_mut()[t][i] = orig + step;
            let up = total(inst, &p)?;
            p.tensors_mut()[t][i] = orig - step;
            let down = total(inst, &p)?;
            p.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[k], numeric));
            k += 1;
        }
    }
    Ok((k, worst))
}

/// Draw `instances` random problems (cycling through `rhos`) and compare
/// the analytic gradient of every parameter with central differences.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        instances: 0,
        redrawn: 0,
        parameters_checked: 0,
        max_relative_error: 0.0,
    };
    while report.instances < cfg.instances {
        let rho = cfg.rhos[report.instances % cfg.rhos.len()];
        let inst = draw(&mut rng, rho)?;
        if near_kink(&inst)? {
            report.redrawn += 1;
            continue;
        }
        let (k, worst) = check(&inst, cfg.step)?;
        report.parameters_checked += k;
        report.max_relative_error = report.max_relative_error.max(worst);
        report.instances += 1;
    }
    Ok(report)
}
