//! Batch-level Pearson / Phi correlation between label columns.
//!
//! All correlation code in the crate funnels through [`ColumnStats`], which
//! centres each column once and keeps the raw root-sum-of-squares so callers
//! can tell a genuinely constant column (invalid pair) apart from a column
//! whose spread is merely below the floor.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor applied to each standard-deviation factor.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-7;

/// Ordered, unique class identifiers shared by every matrix in a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "label space needs at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Config("empty class name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// `AU01`, `AU02`, ... style names for quick setups.
    pub fn numbered(prefix: &str, count: usize) -> Result<Self> {
        Self::new((1..=count).map(|i| format!("{prefix}{i:02}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Indices (into `self`) of the classes shared with `other`, in `self` order.
    pub fn intersection(&self, other: &LabelSpace) -> Vec<(usize, usize)> {
        self.names
            .iter()
            .enumerate()
            .filter_map(|(i, n)| other.index_of(n).map(|j| (i, j)))
            .collect()
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(s: LabelSpace) -> Self {
        s.names
    }
}

/// N×U ground-truth labels, every entry 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix(Array2<f64>);

impl LabelMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!(
                "label entry ({r},{c}) = {v} is not binary"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        Self::new(rows_to_array(
            rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()),
        )?)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn n_rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// N×U predicted probabilities.
///
/// Model outputs always lie in `[ε, 1−ε]`; the type itself accepts the closed
/// unit interval so that hard 0/1 predictions can be scored directly.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix(Array2<f64>);

impl PredictionMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, &v)| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Contract(format!(
                "prediction entry ({r},{c}) = {v} is outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows.iter().cloned())?)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn n_rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    /// Hard 0/1 predictions at `threshold` (positive iff `ŷ ≥ threshold`).
    pub fn thresholded(&self, threshold: f64) -> PredictionMatrix {
        PredictionMatrix(self.0.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }))
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

fn rows_to_array(rows: impl Iterator<Item = Vec<f64>>) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = rows.collect();
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged rows".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Symmetric U×U correlation matrix with a validity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        self.valid[[a, b]].then(|| self.values[[a, b]])
    }

    /// Restrict to the given class indices, preserving their order.
    pub fn select(&self, idx: &[usize]) -> CorrelationMatrix {
        let values = self.values.select(Axis(0), idx).select(Axis(1), idx);
        let valid = self.valid.select(Axis(0), idx).select(Axis(1), idx);
        CorrelationMatrix { values, valid }
    }
}

/// Boolean pair selector: true entries are the correlations that count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMask {
    values: Array2<bool>,
}

impl PairMask {
    /// Strict upper triangle for `u` classes.
    pub fn full(u: usize) -> Self {
        Self {
            values: Array2::from_shape_fn((u, u), |(a, b)| a < b),
        }
    }

    /// Build from an explicit grid; entries on or below the diagonal must be false.
    pub fn from_grid(values: Array2<bool>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Shape("pair mask must be square".into()));
        }
        if values.indexed_iter().any(|((a, b), &v)| v && a >= b) {
            return Err(Error::Config(
                "pair mask may only select pairs above the diagonal".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.values[[a, b]]
    }

    pub fn grid(&self) -> &Array2<bool> {
        &self.values
    }

    /// Selected pairs `(a, b)` with `a < b`, row-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.values.indexed_iter().filter(|(_, &v)| v).map(|(ix, _)| ix)
    }

    /// Sub-mask over the given class indices. Indices must be increasing to
    /// keep the result upper-triangular.
    pub fn select(&self, idx: &[usize]) -> Result<PairMask> {
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("mask selection indices must increase".into()));
        }
        let values = Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| self.values[[idx[a], idx[b]]]);
        Ok(PairMask { values })
    }
}

/// Mask selecting every pair above the diagonal except `excluded`.
pub fn upper_triangle_mask(space: &LabelSpace, excluded: &[(String, String)]) -> Result<PairMask> {
    let mut mask = PairMask::full(space.len());
    for (a, b) in excluded {
        let ia = space
            .index_of(a)
            .ok_or_else(|| Error::Config(format!("unknown class `{a}` in excluded pair")))?;
        let ib = space
            .index_of(b)
            .ok_or_else(|| Error::Config(format!("unknown class `{b}` in excluded pair")))?;
        let (lo, hi) = if ia < ib { (ia, ib) } else { (ib, ia) };
        mask.values[[lo, hi]] = false;
    }
    Ok(mask)
}

/// Centred columns plus the raw and floored spread of each.
#[derive(Debug, Clone)]
pub(crate) struct ColumnStats {
    /// N×U centred values.
    pub centered: Array2<f64>,
    /// Raw sqrt(Σ(x−x̄)²) per column.
    pub raw_sigma: Vec<f64>,
    /// `max(raw_sigma, floor)` per column.
    pub sigma: Vec<f64>,
}

impl ColumnStats {
    pub fn new(m: ArrayView2<'_, f64>, sigma_floor: f64) -> Result<Self> {
        let n = m.nrows();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let means = m.sum_axis(Axis(0)) / n as f64;
        let centered = &m - &means;
        let raw_sigma: Vec<f64> = centered.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
        let sigma = raw_sigma.iter().map(|&s| s.max(sigma_floor)).collect();
        Ok(Self {
            centered,
            raw_sigma,
            sigma,
        })
    }

    pub fn is_constant(&self, col: usize) -> bool {
        self.raw_sigma[col] == 0.0
    }

    pub fn is_floored(&self, col: usize) -> bool {
        self.raw_sigma[col] < self.sigma[col]
    }

    /// Unclamped Pearson value for a pair.
    pub fn raw_pearson(&self, a: usize, b: usize) -> f64 {
        let cov = self.centered.column(a).dot(&self.centered.column(b));
        cov / (self.sigma[a] * self.sigma[b])
    }

    pub fn pair_valid(&self, a: usize, b: usize) -> bool {
        !self.is_constant(a) && !self.is_constant(b)
    }

    pub fn matrix(&self) -> CorrelationMatrix {
        let u = self.centered.ncols();
        let mut values = Array2::zeros((u, u));
        let mut valid = Array2::from_elem((u, u), false);
        for a in 0..u {
            if !self.is_constant(a) {
                values[[a, a]] = 1.0;
                valid[[a, a]] = true;
            }
            for b in a + 1..u {
                if self.pair_valid(a, b) {
                    let p = self.raw_pearson(a, b).clamp(-1.0, 1.0);
                    values[[a, b]] = p;
                    values[[b, a]] = p;
                    valid[[a, b]] = true;
                    valid[[b, a]] = true;
                }
            }
        }
        CorrelationMatrix { values, valid }
    }
}

/// Pearson correlation of two columns, each spread factor floored at
/// `sigma_floor`, clamped to [−1, 1].
pub fn pearson(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, sigma_floor: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "column lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let mut m = Array2::zeros((n, 2));
    m.column_mut(0).assign(&a);
    m.column_mut(1).assign(&b);
    let stats = ColumnStats::new(m.view(), sigma_floor)?;
    Ok(stats.raw_pearson(0, 1).clamp(-1.0, 1.0))
}

/// Pairwise correlation of every column of `m`.
pub fn correlation_matrix(m: ArrayView2<'_, f64>, sigma_floor: f64) -> Result<CorrelationMatrix> {
    Ok(ColumnStats::new(m, sigma_floor)?.matrix())
}

/// Classes whose strongest valid off-diagonal |correlation| reaches `threshold`.
pub fn select_correlated_classes(gt: &CorrelationMatrix, threshold: f64) -> Vec<usize> {
    let u = gt.dim();
    (0..u)
        .filter(|&a| {
            (0..u)
                .filter(|&b| b != a && gt.valid[[a, b]])
                .any(|b| gt.values[[a, b]].abs() >= threshold)
        })
        .collect()
}
