//! Synthetic multi-label data with controllable co-occurrence.
//!
//! Labels come from a Gaussian copula: a latent multivariate normal whose
//! pairwise correlations are solved so that, after thresholding each latent
//! coordinate at its marginal quantile, the observed Phi coefficient of every
//! coupled pair equals the requested strength. Features are a sum of the
//! prototypes of active classes plus a per-subject offset and noise, then
//! passed through the domain transform.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use crate::dataset::DatasetTable;

use crate::correlation::LabelSpace;
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coupling {
    pub a: String,
    pub b: String,
    /// Target Phi coefficient of the pair, in [−1, 1].
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// Marginal activation probability per class.
    pub base_activation: Vec<f64>,
    #[serde(default)]
    pub coupling: Vec<Coupling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default)]
    pub id: u32,
    #[serde(default)]
    pub feature_noise_scale: f64,
    #[serde(default)]
    pub feature_rotation_seed: u64,
    /// 0 keeps the identity; 1 is a fully random orthogonal rotation.
    #[serde(default)]
    pub rotation_strength: f64,
    /// Per-class probability of forcing a label on (positive) or off
    /// (negative). Empty means no drift.
    #[serde(default)]
    pub marginal_drift: Vec<f64>,
}

impl DomainSpec {
    pub fn identity(id: u32) -> Self {
        Self {
            id,
            feature_noise_scale: 0.0,
            feature_rotation_seed: 0,
            rotation_strength: 0.0,
            marginal_drift: Vec::new(),
        }
    }

    fn has_drift(&self) -> bool {
        self.marginal_drift.iter().any(|&d| d != 0.0)
    }

    pub fn validate(&self, u: usize) -> Result<()> {
        if !(self.feature_noise_scale >= 0.0) {
            return Err(Error::Config("feature_noise_scale must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.rotation_strength) {
            return Err(Error::Config("rotation_strength must lie in [0, 1]".into()));
        }
        if !self.marginal_drift.is_empty() && self.marginal_drift.len() != u {
            return Err(Error::Config(format!(
                "marginal_drift has {} entries for {u} classes",
                self.marginal_drift.len()
            )));
        }
        if self.marginal_drift.iter().any(|d| !(-1.0..=1.0).contains(d)) {
            return Err(Error::Config("marginal_drift entries must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub classes: LabelSpace,
    pub feature_dim: usize,
    pub subjects: usize,
    pub tasks: Vec<TaskSpec>,
    pub samples_per_subject_per_task: usize,
    /// Prototype scale per class; empty means 1 for every class.
    #[serde(default)]
    pub class_signal: Vec<f64>,
    #[serde(default = "default_subject_scale")]
    pub subject_scale: f64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    /// Seeds the class prototypes; keep it fixed across domains so they share
    /// the label-to-feature mapping.
    #[serde(default)]
    pub prototype_seed: u64,
    /// First subject id, so that several generated domains can use disjoint ids.
    #[serde(default)]
    pub subject_offset: u32,
    pub domain: DomainSpec,
    pub seed: u64,
}

fn default_subject_scale() -> f64 {
    0.5
}

fn default_noise_scale() -> f64 {
    1.0
}

impl GeneratorSpec {
    /// U=7, D=16, 20 subjects, 4 tasks with distinct co-occurrence patterns,
    /// 100 samples per subject and task.
    pub fn desk_default(seed: u64) -> Self {
        let classes = LabelSpace::new(["AU01", "AU02", "AU06", "AU07", "AU12", "AU17", "AU24"]).unwrap();
        let c = |a: &str, b: &str, s: f64| Coupling {
            a: a.into(),
            b: b.into(),
            strength: s,
        };
        let tasks = vec![
            TaskSpec {
                name: "happiness".into(),
                base_activation: vec![0.3, 0.25, 0.6, 0.55, 0.65, 0.2, 0.15],
                coupling: vec![
                    c("AU01", "AU02", 0.7),
                    c("AU06", "AU12", 0.6),
                    c("AU06", "AU07", 0.5),
                    c("AU07", "AU12", 0.4),
                    c("AU17", "AU24", 0.5),
                ],
            },
            TaskSpec {
                name: "sadness".into(),
                base_activation: vec![0.5, 0.3, 0.2, 0.3, 0.15, 0.5, 0.4],
                coupling: vec![
                    c("AU01", "AU02", 0.5),
                    c("AU17", "AU24", 0.5),
                    c("AU06", "AU07", 0.4),
                    c("AU12", "AU17", -0.2),
                ],
            },
            TaskSpec {
                name: "surprise".into(),
                base_activation: vec![0.6, 0.55, 0.15, 0.2, 0.3, 0.15, 0.1],
                coupling: vec![
                    c("AU01", "AU02", 0.8),
                    c("AU06", "AU07", 0.5),
                    c("AU17", "AU24", 0.4),
                ],
            },
            TaskSpec {
                name: "pain".into(),
                base_activation: vec![0.2, 0.15, 0.55, 0.6, 0.35, 0.4, 0.45],
                coupling: vec![
                    c("AU06", "AU07", 0.7),
                    c("AU06", "AU12", 0.3),
                    c("AU07", "AU12", 0.3),
                    c("AU17", "AU24", 0.6),
                    c("AU01", "AU02", 0.5),
                ],
            },
        ];
        Self {
            classes,
            feature_dim: 16,
            subjects: 20,
            tasks,
            samples_per_subject_per_task: 100,
            class_signal: Vec::new(),
            subject_scale: default_subject_scale(),
            noise_scale: default_noise_scale(),
            prototype_seed: 0,
            subject_offset: 0,
            domain: DomainSpec::identity(0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.classes.len();
        if self.feature_dim == 0 || self.subjects == 0 || self.tasks.is_empty() {
            return Err(Error::Config(
                "feature_dim, subjects and tasks must be positive".into(),
            ));
        }
        if !self.class_signal.is_empty() && self.class_signal.len() != u {
            return Err(Error::Config(format!(
                "class_signal has {} entries for {u} classes",
                self.class_signal.len()
            )));
        }
        if !(self.subject_scale >= 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::Config("scales must be non-negative".into()));
        }
        let mut names = std::collections::HashSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
            if t.base_activation.len() != u {
                return Err(Error::Config(format!(
                    "task `{}` has {} activation probabilities for {u} classes",
                    t.name,
                    t.base_activation.len()
                )));
            }
            if t.base_activation.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!(
                    "task `{}` has an activation probability outside [0, 1]",
                    t.name
                )));
            }
        }
        self.domain.validate(u)
    }

    fn signal(&self, k: usize) -> f64 {
        self.class_signal.get(k).copied().unwrap_or(1.0)
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// P(X > h, Y > k) for a standard bivariate normal with correlation `r`.
///
/// Uses Φ2(−h, −k; r) = Φ(−h)Φ(−k) + (1/2π) ∫_0^{asin r}
/// exp(−(h² − 2hk sinθ + k²) / (2cos²θ)) dθ, integrated with composite
/// Simpson; the integrand stays bounded for |r| → 1.
pub(crate) fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    let n = std_normal();
    let base = n.cdf(-h) * n.cdf(-k);
    if r == 0.0 {
        return base;
    }
    let end = r.clamp(-1.0, 1.0).asin();
    let f = |t: f64| {
        let (s, c) = t.sin_cos();
        let c2 = c * c;
        if c2 <= 0.0 {
            return if (h - s * k).abs() < 1e-12 {
                (-(h * h) / 2.0).exp()
            } else {
                0.0
            };
        }
        (-(h * h - 2.0 * h * k * s + k * k) / (2.0 * c2)).exp()
    };
    let steps = 256;
    let dt = end / steps as f64;
    let mut acc = f(0.0) + f(end);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * dt);
    }
    base + acc * dt / 3.0 / (2.0 * PI)
}

/// Phi coefficient of two thresholded latent normals with marginals `pa`, `pb`.
pub(crate) fn phi_from_latent(pa: f64, pb: f64, r: f64) -> f64 {
    let n = std_normal();
    let (ta, tb) = (n.inverse_cdf(1.0 - pa), n.inverse_cdf(1.0 - pb));
    let p11 = upper_orthant(ta, tb, r);
    (p11 - pa * pb) / (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt()
}

/// Attainable Phi range for binary marginals `pa`, `pb`.
pub(crate) fn phi_bounds(pa: f64, pb: f64) -> (f64, f64) {
    let sd = (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt();
    let lo = ((pa + pb - 1.0).max(0.0) - pa * pb) / sd;
    let hi = (pa.min(pb) - pa * pb) / sd;
    (lo, hi)
}

/// Latent correlation giving observed Phi `target` (bisection; Phi is
/// monotone in the latent correlation).
fn solve_latent(pa: f64, pb: f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if phi_from_latent(pa, pb, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Lower-triangular Cholesky factor, or the index of the first non-positive pivot.
fn cholesky(m: &Array2<f64>) -> std::result::Result<Array2<f64>, usize> {
    let n = m.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = m[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 1e-10 {
            return Err(j);
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in j + 1..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Sampling plan for one task: latent Cholesky factor and thresholds.
#[derive(Debug, Clone)]
pub(crate) struct TaskSampler {
    chol: Array2<f64>,
    thresholds: Vec<f64>,
}

impl TaskSampler {
    pub fn new(task: &TaskSpec, classes: &LabelSpace) -> Result<Self> {
        let u = classes.len();
        let infeasible = |pairs: Vec<String>| Error::InfeasibleCoupling {
            task: task.name.clone(),
            pairs: pairs.join(", "),
        };
        let mut latent = Array2::<f64>::eye(u);
        let mut seen = std::collections::HashSet::new();
        for cp in &task.coupling {
            let label = format!("({}, {}) = {}", cp.a, cp.b, cp.strength);
            let (ia, ib) = match (classes.index_of(&cp.a), classes.index_of(&cp.b)) {
                (Some(a), Some(b)) if a != b => (a.min(b), a.max(b)),
                _ => {
                    return Err(Error::Config(format!(
                        "task `{}`: coupling {label} names an unknown or repeated class",
                        task.name
                    )))
                }
            };
            if !seen.insert((ia, ib)) {
                return Err(Error::Config(format!(
                    "task `{}`: pair ({}, {}) coupled twice",
                    task.name, cp.a, cp.b
                )));
            }
            if cp.strength == 0.0 {
                continue;
            }
            let (pa, pb) = (task.base_activation[ia], task.base_activation[ib]);
            if !(pa > 0.0 && pa < 1.0 && pb > 0.0 && pb < 1.0) {
                return Err(infeasible(vec![format!("{label} (a class never varies)")]));
            }
            let (lo, hi) = phi_bounds(pa, pb);
            if !(-1.0..=1.0).contains(&cp.strength) || cp.strength < lo || cp.strength > hi {
                return Err(infeasible(vec![format!(
                    "{label} (attainable range [{lo:.3}, {hi:.3}])"
                )]));
            }
            let r = solve_latent(pa, pb, cp.strength);
            latent[[ia, ib]] = r;
            latent[[ib, ia]] = r;
        }
        let chol = cholesky(&latent).map_err(|pivot| {
            let names = classes.names();
            let pairs = (0..pivot)
                .filter(|&i| latent[[i, pivot]] != 0.0)
                .map(|i| format!("({}, {})", names[i], names[pivot]))
                .collect::<Vec<_>>();
            let pairs = if pairs.is_empty() {
                vec!["joint coupling set is not positive definite".to_string()]
            } else {
                pairs
            };
            infeasible(pairs)
        })?;
        let n = std_normal();
        let thresholds = task
            .base_activation
            .iter()
            .map(|&p| n.inverse_cdf(1.0 - p))
            .collect();
        Ok(Self { chol, thresholds })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u = self.thresholds.len();
        let g: Vec<f64> = (0..u).map(|_| rng.sample(StandardNormal)).collect();
        (0..u)
            .map(|i| {
                let z: f64 = (0..=i).map(|k| self.chol[[i, k]] * g[k]).sum();
                if z > self.thresholds[i] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormalised (I + strength·G), rows as basis vectors.
pub(crate) fn rotation_matrix(d: usize, strength: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::<f64>::eye(d) + gaussian_matrix(d, d, strength, &mut rng);
    for i in 0..d {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

/// Draw a table according to `spec`.
pub fn generate(spec: &GeneratorSpec) -> Result<DatasetTable> {
    spec.validate()?;
    let u = spec.classes.len();
    let d = spec.feature_dim;
    let samplers = spec
        .tasks
        .iter()
        .map(|t| TaskSampler::new(t, &spec.classes))
        .collect::<Result<Vec<_>>>()?;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
    let mut prototypes = gaussian_matrix(u, d, 1.0, &mut proto_rng);
    for k in 0..u {
        let s = spec.signal(k);
        prototypes.row_mut(k).mapv_inplace(|v| v * s);
    }

    let per_block = spec.samples_per_subject_per_task;
    let m = spec.subjects * spec.tasks.len() * per_block;
    let mut features = Array2::<f64>::zeros((m, d));
    let mut labels = Array2::<f64>::zeros((m, u));
    let mut subject = Vec::with_capacity(m);
    let mut task = Vec::with_capacity(m);
    let mut row = 0;
    for s in 0..spec.subjects {
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[stream::SUBJECT, s as u64]));
        let offset: Array1<f64> =
            Array1::from_shape_simple_fn(d, || spec.subject_scale * srng.sample::<f64, _>(StandardNormal));
        for (t, sampler) in samplers.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[stream::LABELS, s as u64, t as u64]));
            for _ in 0..per_block {
                let y = sampler.sample(&mut rng);
                let mut x = offset.clone();
                for (k, &on) in y.iter().enumerate() {
                    if on == 1.0 {
                        x += &prototypes.row(k);
                    }
                }
                for v in x.iter_mut() {
                    *v += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
                }
                features.row_mut(row).assign(&x);
                labels.row_mut(row).assign(&Array1::from(y));
                subject.push(spec.subject_offset + s as u32);
                task.push(t as u32);
                row += 1;
            }
        }
    }
    let table = DatasetTable::new(
        features,
        labels,
        subject,
        task,
        vec![spec.domain.id; m],
        spec.tasks.iter().map(|t| t.name.clone()).collect(),
        spec.classes.clone(),
    )?;
    shift_domain(&table, &spec.domain, derive_seed(spec.seed, &[stream::DOMAIN]))
}

/// Move `table` into another recording domain: rotate and perturb the
/// features, optionally drift the label marginals. Label couplings are left
/// alone unless drift is requested.
pub fn shift_domain(table: &DatasetTable, domain: &DomainSpec, seed: u64) -> Result<DatasetTable> {
    domain.validate(table.space().len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = table.features().clone();
    if domain.rotation_strength > 0.0 {
        let rot = rotation_matrix(
            table.feature_dim(),
            domain.rotation_strength,
            domain.feature_rotation_seed,
        );
        features = features.dot(&rot.t());
    }
    if domain.feature_noise_scale > 0.0 {
        features += &gaussian_matrix(
            features.nrows(),
            features.ncols(),
            domain.feature_noise_scale,
            &mut rng,
        );
    }
    let mut out = table.clone().with_features(features).with_domain(domain.id);
    if domain.has_drift() {
        let mut labels = table.labels().clone();
        for mut row in labels.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                let dk = domain.marginal_drift[k];
                if dk != 0.0 && rng.random::<f64>() < dk.abs() {
                    *v = if dk > 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
        out = out.with_labels(labels);
    }
    Ok(out)
}

/// Split into rows not belonging to `task_name` and rows that do, each in
/// original order.
pub fn split_by_task(table: &DatasetTable, task_name: &str) -> Result<(DatasetTable, DatasetTable)> {
    let t = table
        .task_index(task_name)
        .ok_or_else(|| Error::Config(format!("unknown task `{task_name}`")))?;
    let (only, without): (Vec<usize>, Vec<usize>) = (0..table.len()).partition(|&r| table.tasks()[r] == t);
    Ok((table.select_rows(&without), table.select_rows(&only)))
}
