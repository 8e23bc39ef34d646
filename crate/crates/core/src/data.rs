//! Observation vectors, datasets, CSV ingestion and detector configuration.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

/// One d-dimensional sample at a time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVector<T> {
    pub values: Vec<T>,
    pub time_index: u64,
}

impl<T: Scalar> ObservationVector<T> {
    pub fn new(values: Vec<T>, time_index: u64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(column) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCell {
                row: time_index as usize,
                column,
                value: values[column].to_string(),
            });
        }
        Ok(Self { values, time_index })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Nominal,
    Anomalous,
}

/// A set of equally sized observation vectors stored row-major.
///
/// Row `i` carries time index `i + 1` unless constructed otherwise; time
/// zero is reserved for the detector's initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    name: String,
    label: Label,
    dim: usize,
    values: Vec<T>,
    times: Vec<u64>,
}

impl<T: Scalar> Dataset<T> {
    /// Builds a dataset from a flat row-major buffer.
    pub fn from_flat(
        name: impl Into<String>,
        label: Label,
        dim: usize,
        values: Vec<T>,
    ) -> Result<Self> {
        if dim == 0 || values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::RaggedRow {
                row: values.len() / dim,
                expected: dim,
                found: values.len() % dim,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCell {
                row: pos / dim,
                column: pos % dim,
                value: values[pos].to_string(),
            });
        }
        let n = values.len() / dim;
        Ok(Self {
            name: name.into(),
            label,
            dim,
            values,
            times: (1..=n as u64).collect(),
        })
    }

    pub fn from_rows(name: impl Into<String>, label: Label, rows: &[Vec<T>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let dim = first.len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::RaggedRow {
                    row,
                    expected: dim,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::from_flat(name, label, dim, values)
    }

    pub fn from_observations(
        name: impl Into<String>,
        label: Label,
        obs: &[ObservationVector<T>],
    ) -> Result<Self> {
        let rows: Vec<Vec<T>> = obs.iter().map(|o| o.values.clone()).collect();
        let mut ds = Self::from_rows(name, label, &rows)?;
        ds.times = obs.iter().map(|o| o.time_index).collect();
        Ok(ds)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn time_index(&self, i: usize) -> u64 {
        self.times[i]
    }

    pub fn observation(&self, i: usize) -> ObservationVector<T> {
        ObservationVector {
            values: self.row(i).to_vec(),
            time_index: self.times[i],
        }
    }

    pub fn observations(&self) -> impl Iterator<Item = ObservationVector<T>> + '_ {
        (0..self.len()).map(move |i| self.observation(i))
    }

    pub fn as_flat(&self) -> &[T] {
        &self.values
    }

    /// Rows at `indices`, in the given order, renumbered from time 1.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidParameter(format!(
                    "row index {i} out of range for {} rows",
                    self.len()
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::from_flat(self.name.clone(), self.label, self.dim, values)
    }

    /// Appends one row; its time index continues the existing sequence.
    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        if let Some(column) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCell {
                row: self.len(),
                column,
                value: row[column].to_string(),
            });
        }
        self.values.extend_from_slice(row);
        let next = self.times.last().map_or(1, |t| t + 1);
        self.times.push(next);
        Ok(())
    }

    /// Converts the element type, e.g. `f64` data into an `f32` dataset.
    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            label: self.label,
            dim: self.dim,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(crate::scalar::to_f64(*v)).expect("representable"))
                .collect(),
            times: self.times.clone(),
        }
    }
}

/// Nominal training set split into the ranking part and the reference part.
#[derive(Debug, Clone)]
pub struct Partition<T> {
    pub part1: Dataset<T>,
    pub part2: Dataset<T>,
    pub part1_indices: Vec<usize>,
    pub part2_indices: Vec<usize>,
    pub ratio: f64,
}

/// Number of rows that go to the first part: `round(ratio * n)`.
pub fn part1_size(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Randomly splits `data` into two disjoint parts with `|part1| = round(ratio * N)`.
///
/// Both index lists are returned in ascending row order.
pub fn partition_dataset<T: Scalar>(
    data: &Dataset<T>,
    ratio: f64,
    seed: u64,
) -> Result<Partition<T>> {
    if data.label() != Label::Nominal {
        return Err(Error::InvalidParameter(
            "only nominal data can be partitioned".into(),
        ));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "partition ratio {ratio} not in (0, 1)"
        )));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 rows to partition, got {n}"
        )));
    }
    let n1 = part1_size(n, ratio);
    if n1 == 0 || n1 == n {
        return Err(Error::InvalidParameter(format!(
            "ratio {ratio} leaves an empty part for N = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut part1_indices = order[..n1].to_vec();
    let mut part2_indices = order[n1..].to_vec();
    part1_indices.sort_unstable();
    part2_indices.sort_unstable();
    Ok(Partition {
        part1: data
            .subset(&part1_indices)?
            .with_name(format!("{}:part1", data.name())),
        part2: data
            .subset(&part2_indices)?
            .with_name(format!("{}:part2", data.name())),
        part1_indices,
        part2_indices,
        ratio,
    })
}

/// Reads a comma-separated numeric table, one row per time step.
pub fn read_csv<T: Scalar, R: Read>(
    reader: R,
    has_header: bool,
    name: impl Into<String>,
) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut dim = None;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let expected = *dim.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                row,
                expected,
                found: record.len(),
            });
        }
        for (column, cell) in record.iter().enumerate() {
            values.push(parse_cell(cell, row, column)?);
        }
    }
    let dim = dim.ok_or(Error::EmptyDataset)?;
    Dataset::from_flat(name, Label::Nominal, dim, values)
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(File::open(path)?, has_header, name)
}

pub(crate) fn parse_cell<T: Scalar>(cell: &str, row: usize, column: usize) -> Result<T> {
    match cell.parse::<T>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::InvalidCell {
            row,
            column,
            value: cell.to_string(),
        }),
    }
}

/// Row-at-a-time CSV reader used for online detection.
pub struct CsvStream<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    dim: Option<usize>,
    row: usize,
}

impl<R: Read> CsvStream<R> {
    pub fn new(reader: R, has_header: bool) -> Self {
        let rdr = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        Self {
            records: rdr.into_records(),
            dim: None,
            row: 0,
        }
    }
}

impl<R: Read> CsvStream<R> {
    pub fn next_observation<T: Scalar>(&mut self) -> Option<Result<ObservationVector<T>>> {
        let record = match self.records.next()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e.into())),
        };
        let row = self.row;
        self.row += 1;
        let expected = *self.dim.get_or_insert(record.len());
        if record.len() != expected {
            return Some(Err(Error::RaggedRow {
                row,
                expected,
                found: record.len(),
            }));
        }
        let values: Result<Vec<T>> = record
            .iter()
            .enumerate()
            .map(|(column, cell)| parse_cell(cell, row, column))
            .collect();
        Some(values.map(|values| ObservationVector {
            values,
            time_index: row as u64 + 1,
        }))
    }
}

/// Writes the dataset as CSV with full round-trip precision.
pub fn write_csv<T: Scalar, W: Write>(
    dataset: &Dataset<T>,
    writer: W,
    header: Option<&[String]>,
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    if let Some(h) = header {
        if h.len() != dataset.dim() {
            return Err(Error::DimensionMismatch {
                expected: dataset.dim(),
                found: h.len(),
            });
        }
        wtr.write_record(h)?;
    }
    for row in dataset.rows() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv<T: Scalar>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    write_csv(dataset, File::create(path)?, None)
}

/// Concatenates per-device datasets column-wise into one network-wide dataset.
pub fn stack_devices<T: Scalar>(per_device: &[Dataset<T>]) -> Result<Dataset<T>> {
    let first = per_device.first().ok_or(Error::EmptyDataset)?;
    let n = first.len();
    if let Some(bad) = per_device.iter().find(|d| d.len() != n) {
        return Err(Error::InvalidParameter(format!(
            "unequal row counts: {} has {} rows, {} has {n}",
            bad.name(),
            bad.len(),
            first.name()
        )));
    }
    let dim: usize = per_device.iter().map(Dataset::dim).sum();
    let mut values = Vec::with_capacity(n * dim);
    for t in 0..n {
        for d in per_device {
            values.extend_from_slice(d.row(t));
        }
    }
    Dataset::from_flat("stacked", first.label(), dim, values)
}

/// Detector hyperparameters; the JSON form uses these field names verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub k: usize,
    pub s: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub threshold_h: f64,
    /// Fraction of the nominal set used for ranking; `1.0` disables the split.
    pub partition_ratio: f64,
    pub rng_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            k: 1,
            s: 1,
            gamma: 1.0,
            alpha: 0.05,
            threshold_h: 10.0,
            partition_ratio: 0.38,
            rng_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.s == 0 || self.s > self.k {
            return bad(format!("s = {} must lie in [1, k = {}]", self.s, self.k));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma = {} must be positive", self.gamma));
        }
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} must lie in [0, 1)", self.alpha));
        }
        if !(self.threshold_h > 0.0) {
            return bad(format!(
                "threshold_h = {} must be positive",
                self.threshold_h
            ));
        }
        if !(self.partition_ratio > 0.0 && self.partition_ratio <= 1.0) {
            return bad(format!(
                "partition_ratio = {} must lie in (0, 1]",
                self.partition_ratio
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
