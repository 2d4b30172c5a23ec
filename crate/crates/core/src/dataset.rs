//! Labelled datasets: CSV loading, seeded Gaussian blobs, and disjoint splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("inputs hold {rows} rows but {labels} labels were given")]
    RowMismatch { rows: usize, labels: usize },
    #[error("input buffer of {len} values is not a multiple of input_dim {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("feature at row {row} is not finite")]
    NonFinite { row: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {reason}")]
    CsvRow { row: usize, reason: String },
    #[error("cannot split {n} samples into {parts} non-empty parts")]
    Split { n: usize, parts: usize },
}

/// Row-major matrix of features with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self, DatasetError> {
        if input_dim == 0 || !inputs.len().is_multiple_of(input_dim) {
            return Err(DatasetError::Ragged {
                len: inputs.len(),
                dim: input_dim,
            });
        }
        let rows = inputs.len() / input_dim;
        if rows != labels.len() {
            return Err(DatasetError::RowMismatch {
                rows,
                labels: labels.len(),
            });
        }
        if let Some(pos) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite { row: pos / input_dim });
        }
        Ok(Dataset {
            inputs,
            input_dim,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self, DatasetError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut inputs = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(DatasetError::CsvRow {
                    row: i,
                    reason: format!("expected {dim} features, found {}", row.len()),
                });
            }
            inputs.extend_from_slice(row);
        }
        Dataset::new(inputs, dim, labels)
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn check_classes(&self, classes: usize) -> Result<(), DatasetError> {
        match self.labels.iter().position(|&l| l >= classes) {
            Some(row) => Err(DatasetError::LabelOutOfRange {
                row,
                label: self.labels[row],
                classes,
            }),
            None => Ok(()),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs,
            input_dim: self.input_dim,
            labels,
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            inputs: self.inputs[start * self.input_dim..end * self.input_dim].to_vec(),
            input_dim: self.input_dim,
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Leading `⌊fraction · n⌋` rows (at least one).
    pub fn head_fraction(&self, fraction: f64) -> Dataset {
        let n = ((self.n_samples() as f64) * fraction).floor() as usize;
        self.slice(0, n.clamp(1, self.n_samples()))
    }

    /// Contiguous disjoint shards whose sizes differ by at most one.
    pub fn partition(&self, parts: usize) -> Result<Vec<Dataset>, DatasetError> {
        let n = self.n_samples();
        if parts == 0 || parts > n {
            return Err(DatasetError::Split { n, parts });
        }
        let base = n / parts;
        let extra = n % parts;
        let mut start = 0;
        Ok((0..parts)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let shard = self.slice(start, start + len);
                start += len;
                shard
            })
            .collect())
    }

    /// Header row, float feature columns, final integer label column.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        Self::from_csv_reader(reader)
    }

    pub fn from_csv_reader<R: std::io::Read>(mut reader: csv::Reader<R>) -> Result<Self, DatasetError> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() < 2 {
                return Err(DatasetError::CsvRow {
                    row,
                    reason: "need at least one feature and a label".into(),
                });
            }
            let features = record.len() - 1;
            if *dim.get_or_insert(features) != features {
                return Err(DatasetError::CsvRow {
                    row,
                    reason: format!("expected {} columns, found {}", dim.unwrap() + 1, record.len()),
                });
            }
            for field in record.iter().take(features) {
                let v: f64 = field.parse().map_err(|_| DatasetError::CsvRow {
                    row,
                    reason: format!("bad feature `{field}`"),
                })?;
                inputs.push(v);
            }
            let label_field = &record[features];
            let label: usize = label_field.parse().map_err(|_| DatasetError::CsvRow {
                row,
                reason: format!("bad label `{label_field}`"),
            })?;
            labels.push(label);
        }
        Dataset::new(inputs, dim.unwrap_or(1), labels)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.n_samples() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.n_samples() as u32);
        w.u32(self.input_dim as u32);
        for &v in &self.inputs {
            w.f64(v);
        }
        for &l in &self.labels {
            w.u32(l as u32);
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let needed = n
            .checked_mul(dim)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(n * 4))
            .ok_or_else(|| DecodeError::invalid("dataset", "size overflow"))?;
        if needed > r.remaining() {
            return Err(DecodeError::Short {
                offset: r.position(),
                needed: needed - r.remaining(),
            });
        }
        let mut inputs = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            inputs.push(r.f64()?);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32()? as usize);
        }
        Dataset::new(inputs, dim, labels).map_err(|e| DecodeError::invalid("dataset", e.to_string()))
    }
}

/// Parameters for the isotropic Gaussian-blobs generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub features: usize,
    pub samples: usize,
    /// Class centres are drawn uniformly from `[-center_box, center_box]^features`.
    pub center_box: f64,
    pub std_dev: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 4,
            features: 16,
            samples: 2000,
            center_box: 1.0,
            std_dev: 1.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    /// Balanced classes, rows shuffled. The same seed always yields the same
    /// centres, so `generate` with a different `samples` count draws from the
    /// same distribution.
    pub fn generate(&self) -> Dataset {
        self.generate_stream(0, self.samples)
    }

    /// Draw `samples` rows from stream `stream` of this distribution. Distinct
    /// streams share centres but never share sample draws.
    pub fn generate_stream(&self, stream: u64, samples: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let centers: Vec<f64> = (0..self.classes * self.features)
            .map(|_| rng.random_range(-self.center_box..=self.center_box))
            .collect();
        let noise = Normal::new(0.0, self.std_dev).expect("std_dev is finite and non-negative");

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut labels: Vec<usize> = (0..samples).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let mut inputs = Vec::with_capacity(samples * self.features);
        for &label in &labels {
            let c = &centers[label * self.features..(label + 1) * self.features];
            inputs.extend(c.iter().map(|&m| m + noise.sample(&mut rng)));
        }
        Dataset {
            inputs,
            input_dim: self.features,
            labels,
        }
    }

    /// Training rows from stream 0 and held-out rows from stream 1.
    pub fn train_test(&self, test_samples: usize) -> (Dataset, Dataset) {
        (self.generate(), self.generate_stream(1, test_samples))
    }
}
