//! Federated-versus-centralized accuracy grid on synthetic blobs.
//!
//! Each cell splits a fraction of the training set into `M` disjoint equal
//! shards, trains every shard for `update` epochs from the current global
//! model, averages, and repeats until `total_epochs` have elapsed. The
//! centralized baseline trains one model on the whole fraction for
//! `total_epochs`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::{BlobSpec, Dataset};
use crate::exec::Exec;
use crate::fedavg::aggregate;
use crate::kv::{KvError, KvFile};
use crate::params::{Activation, Address, ModelConfig, ParameterVector};
use crate::trainer::{evaluate, init_params, train_local, train_params, TrainError, TrainSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub data_fractions: Vec<f64>,
    pub update_epochs: Vec<u32>,
    pub model_counts: Vec<usize>,
    pub total_epochs: u32,
    pub seed: u64,
    pub blobs: BlobSpec,
    pub test_samples: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    pub learning_rate: f64,
}

const KEYS: &[&str] = &[
    "fractions",
    "updates",
    "models",
    "total_epochs",
    "seed",
    "test_samples",
    "model.hidden",
    "model.activation",
    "train.batch_size",
    "train.learning_rate",
    "data.classes",
    "data.features",
    "data.samples",
    "data.center_box",
    "data.std_dev",
    "data.seed",
];

impl Default for BenchmarkSpec {
    /// The full desk-scale grid.
    fn default() -> Self {
        BenchmarkSpec {
            data_fractions: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            update_epochs: vec![25, 50, 75],
            model_counts: vec![2, 4, 8],
            total_epochs: 150,
            seed: 0,
            blobs: BlobSpec::default(),
            test_samples: 2000,
            hidden: vec![16],
            activation: Activation::Relu,
            batch_size: 32,
            learning_rate: 0.05,
        }
    }
}

impl BenchmarkSpec {
    pub fn from_kv(f: &KvFile) -> Result<Self, BenchError> {
        f.reject_unknown(KEYS)?;
        let d = Self::default();
        let b = d.blobs.clone();
        let spec = BenchmarkSpec {
            data_fractions: f.list("fractions")?.unwrap_or(d.data_fractions),
            update_epochs: f.list("updates")?.unwrap_or(d.update_epochs),
            model_counts: f.list("models")?.unwrap_or(d.model_counts),
            total_epochs: f.or("total_epochs", d.total_epochs)?,
            seed: f.or("seed", d.seed)?,
            blobs: BlobSpec {
                classes: f.or("data.classes", b.classes)?,
                features: f.or("data.features", b.features)?,
                samples: f.or("data.samples", b.samples)?,
                center_box: f.or("data.center_box", b.center_box)?,
                std_dev: f.or("data.std_dev", b.std_dev)?,
                seed: f.or("data.seed", b.seed)?,
            },
            test_samples: f.or("test_samples", d.test_samples)?,
            hidden: f.list("model.hidden")?.unwrap_or(d.hidden),
            activation: f.or("model.activation", d.activation)?,
            batch_size: f.or("train.batch_size", d.batch_size)?,
            learning_rate: f.or("train.learning_rate", d.learning_rate)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Invalid(m));
        if self.data_fractions.is_empty() || self.update_epochs.is_empty() || self.model_counts.is_empty() {
            return bad("fractions, updates and models must be non-empty".into());
        }
        if let Some(f) = self.data_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("fraction {f} must lie in (0, 1]"));
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be positive".into());
        }
        if let Some(u) = self
            .update_epochs
            .iter()
            .find(|&&u| u == 0 || !self.total_epochs.is_multiple_of(u))
        {
            return bad(format!(
                "update {u} must be positive and divide total_epochs {}",
                self.total_epochs
            ));
        }
        if self.blobs.classes < 2 || self.blobs.features == 0 || self.test_samples == 0 {
            return bad("need at least two classes, one feature and one test sample".into());
        }
        if !(self.blobs.std_dev.is_finite() && self.blobs.std_dev >= 0.0) {
            return bad("data.std_dev must be finite and non-negative".into());
        }
        if self.batch_size == 0 || !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("batch_size must be positive and learning_rate finite and non-negative".into());
        }
        for &f in &self.data_fractions {
            let n = ((self.blobs.samples as f64) * f).floor() as usize;
            if let Some(m) = self.model_counts.iter().find(|&&m| m == 0 || m > n.max(1)) {
                return bad(format!("{m} models cannot split {n} samples"));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        let mut layers = vec![self.blobs.features];
        layers.extend(&self.hidden);
        layers.push(self.blobs.classes);
        ModelConfig::new(layers, self.activation, self.seed).expect("validated layer sizes")
    }

    fn train_spec(&self, epochs: u32, n: usize, seed: u64) -> TrainSpec {
        TrainSpec {
            epochs,
            batch_size: self.batch_size.min(n),
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

/// Training seed for client `m` in round `r`; client 0 in round 0 uses the
/// centralized seed.
pub fn client_seed(seed: u64, m: usize, r: u64) -> u64 {
    seed ^ (((m as u64) << 32) | r).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn client_address(m: usize) -> Address {
    let mut a = [0u8; 20];
    a[..8].copy_from_slice(&(m as u64).to_be_bytes());
    Address(a)
}

pub fn centralized(
    spec: &BenchmarkSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<(ParameterVector, f64), TrainError> {
    let model = spec.model();
    let ts = spec.train_spec(spec.total_epochs, train.n_samples(), spec.seed);
    let p = train_params(&model, &init_params(&model), train, &ts)?;
    let acc = evaluate(&model, &p, test)?;
    Ok((p, acc))
}

pub fn federated(
    spec: &BenchmarkSpec,
    train: &Dataset,
    test: &Dataset,
    update: u32,
    models: usize,
) -> Result<(ParameterVector, f64), BenchError> {
    let model = spec.model();
    let parts = train
        .partition(models)
        .map_err(|e| BenchError::Invalid(e.to_string()))?;
    let mut global = init_params(&model);
    for r in 0..u64::from(spec.total_epochs / update) {
        let updates = parts
            .iter()
            .enumerate()
            .map(|(m, part)| {
                let ts = spec.train_spec(update, part.n_samples(), client_seed(spec.seed, m, r));
                train_local(&model, &global, part, &ts, client_address(m), r)
            })
            .collect::<Result<Vec<_>, _>>()?;
        global = aggregate(&updates)
            .map_err(|e| BenchError::Invalid(e.to_string()))?
            .params;
    }
    let acc = evaluate(&model, &global, test)?;
    Ok((global, acc))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Federated { update: u32, models: usize },
    Centralized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub fraction: f64,
    pub cell: Cell,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn centralized(&self, fraction: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.fraction == fraction && r.cell == Cell::Centralized)
            .map(|r| r.accuracy)
    }

    pub fn federated(&self) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(|r| r.cell != Cell::Centralized)
    }

    /// Largest |federated − centralized| over every cell, in accuracy units.
    pub fn max_gap(&self) -> f64 {
        self.federated()
            .map(|r| (r.accuracy - self.centralized(r.fraction).unwrap_or(f64::NAN)).abs())
            .fold(0.0, f64::max)
    }

    /// Mean federated accuracy per fraction, in the order fractions first appear.
    pub fn mean_by_fraction(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = vec![];
        for r in self.federated() {
            match out.iter_mut().find(|(f, _, _)| *f == r.fraction) {
                Some(e) => {
                    e.1 += r.accuracy;
                    e.2 += 1;
                }
                None => out.push((r.fraction, r.accuracy, 1)),
            }
        }
        out.into_iter().map(|(f, s, n)| (f, s / n as f64)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,update,models,accuracy\n");
        for r in &self.rows {
            match r.cell {
                Cell::Federated { update, models } => writeln!(s, "{},{update},{models},{}", r.fraction, r.accuracy),
                Cell::Centralized => writeln!(s, "{},centralized,1,{}", r.fraction, r.accuracy),
            }
            .expect("writing to a String");
        }
        s
    }
}

/// Runs every grid cell, independent cells spread over `exec`.
pub fn run_benchmark(spec: &BenchmarkSpec, exec: Exec) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    let (full, test) = spec.blobs.train_test(spec.test_samples);
    let mut cells = vec![];
    for &fraction in &spec.data_fractions {
        cells.push((fraction, Cell::Centralized));
        for &update in &spec.update_epochs {
            for &models in &spec.model_counts {
                cells.push((fraction, Cell::Federated { update, models }));
            }
        }
    }
    let results = exec.map(&cells, |&(fraction, cell)| {
        let train = full.head_fraction(fraction);
        let accuracy = match cell {
            Cell::Centralized => centralized(spec, &train, &test)?.1,
            Cell::Federated { update, models } => federated(spec, &train, &test, update, models)?.1,
        };
        Ok::<_, BenchError>(BenchRow {
            fraction,
            cell,
            accuracy,
        })
    });
    Ok(BenchReport {
        rows: results.into_iter().collect::<Result<_, _>>()?,
    })
}
