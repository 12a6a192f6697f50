use std::collections::BTreeSet;

use ndarray::{Array2, Axis};

use crate::correlation::{LabelMatrix, LabelSpace};
use crate::error::{Error, Result};

/// Row-aligned features, binary labels and per-row subject/task/domain ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    features: Array2<f64>,
    labels: Array2<f64>,
    subject: Vec<u32>,
    task: Vec<u32>,
    domain: Vec<u32>,
    task_names: Vec<String>,
    space: LabelSpace,
}

impl DatasetTable {
    pub fn new(
        features: Array2<f64>,
        labels: Array2<f64>,
        subject: Vec<u32>,
        task: Vec<u32>,
        domain: Vec<u32>,
        task_names: Vec<String>,
        space: LabelSpace,
    ) -> Result<Self> {
        let m = features.nrows();
        if labels.nrows() != m || subject.len() != m || task.len() != m || domain.len() != m {
            return Err(Error::Shape(format!(
                "columns are not row-aligned: features {m}, labels {}, subject {}, task {}, domain {}",
                labels.nrows(),
                subject.len(),
                task.len(),
                domain.len()
            )));
        }
        if labels.ncols() != space.len() {
            return Err(Error::Schema(format!(
                "labels have {} columns but the label space has {} classes",
                labels.ncols(),
                space.len()
            )));
        }
        LabelMatrix::new(labels.clone())?;
        if let Some(&t) = task.iter().find(|&&t| t as usize >= task_names.len()) {
            return Err(Error::Schema(format!("task id {t} has no name")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            subject,
            task,
            domain,
            task_names,
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array2<f64> {
        &self.labels
    }

    pub fn label_matrix(&self) -> LabelMatrix {
        LabelMatrix::new(self.labels.clone()).expect("labels validated on construction")
    }

    pub fn subjects(&self) -> &[u32] {
        &self.subject
    }

    pub fn tasks(&self) -> &[u32] {
        &self.task
    }

    pub fn domains(&self) -> &[u32] {
        &self.domain
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    pub fn task_index(&self, name: &str) -> Option<u32> {
        self.task_names.iter().position(|t| t == name).map(|i| i as u32)
    }

    /// Sorted distinct subject ids.
    pub fn unique_subjects(&self) -> Vec<u32> {
        self.subject
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// New table with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> DatasetTable {
        DatasetTable {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.select(Axis(0), rows),
            subject: rows.iter().map(|&r| self.subject[r]).collect(),
            task: rows.iter().map(|&r| self.task[r]).collect(),
            domain: rows.iter().map(|&r| self.domain[r]).collect(),
            task_names: self.task_names.clone(),
            space: self.space.clone(),
        }
    }

    /// Row indices whose subject is in `subjects`.
    pub fn rows_for_subjects(&self, subjects: &[u32]) -> Vec<usize> {
        let set: BTreeSet<u32> = subjects.iter().copied().collect();
        (0..self.len())
            .filter(|&r| set.contains(&self.subject[r]))
            .collect()
    }

    pub(crate) fn with_features(mut self, features: Array2<f64>) -> Self {
        assert_eq!(features.dim(), self.features.dim());
        self.features = features;
        self
    }

    pub(crate) fn with_labels(mut self, labels: Array2<f64>) -> Self {
        assert_eq!(labels.dim(), self.labels.dim());
        self.labels = labels;
        self
    }

    pub(crate) fn with_domain(mut self, id: u32) -> Self {
        self.domain.fill(id);
        self
    }

    /// Rows of `self` followed by rows of `other`. Task names must agree.
    pub fn concat(&self, other: &DatasetTable) -> Result<DatasetTable> {
        if self.space != other.space || self.task_names != other.task_names {
            return Err(Error::Schema(
                "cannot concatenate tables with different schemas".into(),
            ));
        }
        if self.feature_dim() != other.feature_dim() {
            return Err(Error::Shape("feature dimensions differ".into()));
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let labels = ndarray::concatenate(Axis(0), &[self.labels.view(), other.labels.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let cat = |a: &[u32], b: &[u32]| a.iter().chain(b).copied().collect::<Vec<_>>();
        Ok(DatasetTable {
            features,
            labels,
            subject: cat(&self.subject, &other.subject),
            task: cat(&self.task, &other.task),
            domain: cat(&self.domain, &other.domain),
            task_names: self.task_names.clone(),
            space: self.space.clone(),
        })
    }
}
