//! Dataset CSV, JSON records, correlation-matrix exports and result tables.
//!
//! All numbers are written with Rust's locale-independent formatting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationMatrix, LabelSpace, PredictionMatrix};
use crate::dataset::DatasetTable;
use crate::error::{Error, Result};
use crate::experiments::{CalibrationResult, CrossResult, ExperimentResult};
use crate::model::MlpParams;
use crate::trainer::EpochRecord;

const ID_COLUMNS: [&str; 3] = ["subject", "task", "domain"];

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().from_writer(BufWriter::new(File::create(path)?)))
}

/// Feature cell: nine significant digits in scientific notation.
fn fmt_feature(v: f64) -> String {
    format!("{:.8e}", v)
}

pub fn write_dataset(table: &DatasetTable, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..table.feature_dim()).map(|i| format!("f{i}")));
    header.extend(table.space().names().iter().cloned());
    w.write_record(&header)?;
    let names = table.task_names();
    for r in 0..table.len() {
        let mut rec = vec![
            table.subjects()[r].to_string(),
            names[table.tasks()[r] as usize].clone(),
            table.domains()[r].to_string(),
        ];
        rec.extend(table.features().row(r).iter().map(|&v| fmt_feature(v)));
        rec.extend(
            table
                .labels()
                .row(r)
                .iter()
                .map(|&v| if v == 1.0 { "1" } else { "0" }.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Split a header into the feature count and the class columns that follow
/// the identifier columns.
fn split_header(header: &csv::StringRecord) -> Result<(usize, Vec<String>)> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != ID_COLUMNS {
        return Err(parse_err(1, "header must start with subject,task,domain"));
    }
    let d = cols[3..]
        .iter()
        .enumerate()
        .take_while(|(i, c)| **c == format!("f{i}"))
        .count();
    Ok((d, cols[3 + d..].iter().map(|s| s.to_string()).collect()))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().flexible(true).from_path(path)?)
}

/// Read a dataset CSV; the label space is taken from the header.
pub fn read_dataset(path: &Path) -> Result<DatasetTable> {
    read_dataset_impl(path, None)
}

/// Read a dataset CSV whose class columns must cover `space`. Labels are
/// returned in the order of `space`.
pub fn read_dataset_with_space(path: &Path, space: &LabelSpace) -> Result<DatasetTable> {
    read_dataset_impl(path, Some(space))
}

fn read_dataset_impl(path: &Path, declared: Option<&LabelSpace>) -> Result<DatasetTable> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let (d, class_cols) = split_header(&header)?;
    let (space, class_idx) = match declared {
        None => {
            let space = LabelSpace::new(class_cols.clone()).map_err(|e| parse_err(1, e.to_string()))?;
            (space, (0..class_cols.len()).collect::<Vec<_>>())
        }
        Some(s) => {
            let mut idx = Vec::with_capacity(s.len());
            for name in s.names() {
                match class_cols.iter().position(|c| c == name) {
                    Some(i) => idx.push(i),
                    None => return Err(Error::Schema(format!("class column `{name}` is missing"))),
                }
            }
            (s.clone(), idx)
        }
    };
    let width = header.len();
    let u = space.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let (mut subject, mut task, mut domain) = (Vec::new(), Vec::new(), Vec::new());
    let mut task_names: Vec<String> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(
                line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        let id = |i: usize| -> Result<u32> {
            rec[i]
                .parse()
                .map_err(|_| parse_err(line, format!("bad {} id `{}`", ID_COLUMNS[i], &rec[i])))
        };
        subject.push(id(0)?);
        domain.push(id(2)?);
        let t = &rec[1];
        let ti = match task_names.iter().position(|n| n == t) {
            Some(i) => i,
            None => {
                task_names.push(t.to_string());
                task_names.len() - 1
            }
        };
        task.push(ti as u32);
        for c in 0..d {
            let cell = &rec[3 + c];
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("bad feature value `{cell}` in column f{c}")))?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("non-finite feature value in column f{c}"),
                ));
            }
            features.push(v);
        }
        for &ci in &class_idx {
            let cell = &rec[3 + d + ci];
            labels.push(match cell {
                "0" => 0.0,
                "1" => 1.0,
                _ => {
                    return Err(parse_err(
                        line,
                        format!("label `{cell}` in column `{}` is not 0 or 1", class_cols[ci]),
                    ))
                }
            });
        }
    }
    let m = subject.len();
    let features = Array2::from_shape_vec((m, d), features).map_err(|e| Error::Shape(e.to_string()))?;
    let labels = Array2::from_shape_vec((m, u), labels).map_err(|e| Error::Shape(e.to_string()))?;
    DatasetTable::new(features, labels, subject, task, domain, task_names, space)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(
        path,
    )?))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationExport {
    pub classes: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

impl CorrelationExport {
    pub fn new(space: &LabelSpace, m: &CorrelationMatrix) -> Self {
        Self {
            classes: space.names().to_vec(),
            values: m.values.rows().into_iter().map(|r| r.to_vec()).collect(),
            valid: m.valid.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

/// Matrix CSV with class names as header row and first column; invalid
/// entries are written as `NaN`.
pub fn write_correlation_csv(space: &LabelSpace, m: &CorrelationMatrix, path: &Path) -> Result<()> {
    if m.dim() != space.len() {
        return Err(Error::Shape(
            "correlation matrix does not match the label space".into(),
        ));
    }
    let mut w = csv_writer(path)?;
    let mut header = vec![String::new()];
    header.extend(space.names().iter().cloned());
    w.write_record(&header)?;
    for (a, name) in space.names().iter().enumerate() {
        let mut rec = vec![name.clone()];
        for b in 0..space.len() {
            rec.push(if m.valid[[a, b]] {
                // +0.0 folds negative zero
                format!("{:.6}", m.values[[a, b]] + 0.0)
            } else {
                "NaN".to_string()
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlation_json(space: &LabelSpace, m: &CorrelationMatrix, path: &Path) -> Result<()> {
    write_json(&CorrelationExport::new(space, m), path)
}

pub const HISTORY_HEADER: [&str; 7] = [
    "epoch",
    "train_total",
    "train_bce",
    "train_corr",
    "val_total",
    "val_bce",
    "val_corr",
];

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(HISTORY_HEADER)?;
    for h in history {
        let mut rec = vec![
            h.epoch.to_string(),
            h.train.total.to_string(),
            h.train.bce_part.to_string(),
            h.train.corr_part.to_string(),
        ];
        match &h.val {
            Some(v) => rec.extend([
                v.total.to_string(),
                v.bce_part.to_string(),
                v.corr_part.to_string(),
            ]),
            None => rec.extend([String::new(), String::new(), String::new()]),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub classes: Vec<String>,
    pub dropout_rate: f64,
    pub seed: u64,
    pub params: MlpParams,
}

impl Checkpoint {
    pub fn new(params: MlpParams, space: &LabelSpace, seed: u64) -> Result<Self> {
        if params.output_dim() != space.len() {
            return Err(Error::Shape("model outputs do not match the label space".into()));
        }
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            input_dim: params.input_dim(),
            hidden_dim: params.hidden_dim(),
            output_dim: params.output_dim(),
            classes: space.names().to_vec(),
            dropout_rate: params.dropout_rate,
            seed,
            params,
        })
    }

    pub fn space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.classes.clone())
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_json(ckpt, path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c: Checkpoint = read_json(path)?;
    if c.format_version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint version {}",
            c.format_version
        )));
    }
    c.params.validate()?;
    if (c.input_dim, c.hidden_dim, c.output_dim)
        != (c.params.input_dim(), c.params.hidden_dim(), c.params.output_dim())
        || c.classes.len() != c.output_dim
    {
        return Err(Error::Schema(
            "checkpoint dimensions disagree with its weights".into(),
        ));
    }
    Ok(c)
}

/// Per-row predicted probabilities next to the row identifiers.
pub fn write_predictions(table: &DatasetTable, yhat: &PredictionMatrix, path: &Path) -> Result<()> {
    if yhat.n_rows() != table.len() || yhat.n_classes() != table.space().len() {
        return Err(Error::Shape("predictions do not match the table".into()));
    }
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(table.space().names().iter().cloned());
    w.write_record(&header)?;
    for r in 0..table.len() {
        let mut rec = vec![
            table.subjects()[r].to_string(),
            table.task_names()[table.tasks()[r] as usize].clone(),
            table.domains()[r].to_string(),
        ];
        rec.extend(yhat.values().row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<(LabelSpace, PredictionMatrix)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let (d, classes) = split_header(&header)?;
    if d != 0 {
        return Err(parse_err(1, "prediction files have no feature columns"));
    }
    let space = LabelSpace::new(classes).map_err(|e| parse_err(1, e.to_string()))?;
    let mut values = Vec::new();
    let mut m = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        for cell in rec.iter().skip(3) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("bad probability `{cell}`")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(line, format!("probability {v} outside [0, 1]")));
            }
            values.push(v);
        }
        m += 1;
    }
    let arr = Array2::from_shape_vec((m, space.len()), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((space, PredictionMatrix::new(arr)?))
}

/// Whether the CSV at `path` is a dataset (has an `f0` column after the ids).
pub fn is_dataset_csv(path: &Path) -> Result<bool> {
    let mut rdr = reader(path)?;
    let (d, _) = split_header(rdr.headers()?)?;
    Ok(d > 0)
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

/// One row per ρ: mean and sample std of macro F1 and corr distance.
pub fn write_summary_csv(results: &[ExperimentResult], path: &Path) -> Result<()> {
    write_lines(
        path,
        ExperimentResult::CSV_HEADER,
        results.iter().map(ExperimentResult::csv_row),
    )
}

/// One row per (ρ, fold).
pub fn write_folds_csv(results: &[ExperimentResult], path: &Path) -> Result<()> {
    write_lines(
        path,
        "rho,fold,macro_f1,corr_distance,best_epoch",
        results.iter().flat_map(|r| {
            r.folds.iter().map(move |f| {
                format!(
                    "{},{},{:.6},{:.6},{}",
                    r.rho,
                    f.fold,
                    f.report.macro_f1,
                    f.report.corr_distance,
                    f.best_epoch.map_or(String::new(), |e| e.to_string())
                )
            })
        }),
    )
}

/// One row per test set.
pub fn write_cross_csv(results: &[CrossResult], path: &Path) -> Result<()> {
    write_lines(
        path,
        &format!("test_set,classes,{}", ExperimentResult::CSV_HEADER),
        results
            .iter()
            .map(|c| format!("{},{},{}", c.test_name, c.classes.join(" "), c.result.csv_row())),
    )
}

/// One row per held-out task.
pub fn write_calibration_csv(results: &[CalibrationResult], path: &Path) -> Result<()> {
    write_lines(
        path,
        CalibrationResult::CSV_HEADER,
        results.iter().map(CalibrationResult::csv_row),
    )
}
