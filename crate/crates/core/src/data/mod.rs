//! Dataset ingestion and multi-view construction.
//!
//! Three sources: IDX image files split vertically into two device views,
//! a corrupted two-view variant (occlusion mask on view 1, heavy uniform
//! noise on view 2), and tiny synthetic discrete tasks whose exact joint
//! tables serve as brute-force oracles for the information estimators.

pub mod idx;
pub mod synth;
pub mod views;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One multi-view example: per-device observations plus the target label.
#[derive(Clone, Debug)]
pub struct ViewSample {
    pub views: Vec<Tensor>,
    pub label: usize,
}

/// A multi-view dataset stored view-major: `views[k]` is an `[N, d_k]`
/// matrix, labels run parallel to its rows.
#[derive(Clone, Debug)]
pub struct MultiViewDataset {
    views: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl MultiViewDataset {
    pub fn new(views: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if views.is_empty() || labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = labels.len();
        for (k, v) in views.iter().enumerate() {
            if v.rows() != n {
                return Err(Error::ShapeMismatch(format!(
                    "view {k} holds {} rows for {} labels",
                    v.rows(),
                    n
                )));
            }
            for &p in v.data() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::BadConfig(format!(
                        "view {k} pixel {p} outside [0,1]"
                    )));
                }
            }
        }
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::BadConfig(format!(
                    "label {l} >= num_classes {num_classes}"
                )));
            }
        }
        Ok(MultiViewDataset { views, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn view_dim(&self, k: usize) -> usize {
        self.views[k].cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn view_matrix(&self, k: usize) -> &Tensor {
        &self.views[k]
    }

    pub fn sample(&self, i: usize) -> ViewSample {
        let views = self
            .views
            .iter()
            .map(|v| Tensor::from_vec(v.row(i).to_vec()))
            .collect();
        ViewSample { views, label: self.labels[i] }
    }

    /// Rows `idx` of view `k` as a `[len(idx), d_k]` batch.
    pub fn view_batch(&self, k: usize, idx: &[usize]) -> Tensor {
        let d = self.view_dim(k);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.views[k].row(i));
        }
        Tensor::matrix(idx.len(), d, data).unwrap()
    }

    pub fn label_batch(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Where a dataset comes from. Corruption parameters exist exactly when
/// the source is the corrupted two-view variant.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// MNIST-style IDX files under `data_dir`, split vertically into two
    /// views per image.
    IdxFiles {
        data_dir: String,
        #[serde(default)]
        limit_train: Option<usize>,
        #[serde(default)]
        limit_test: Option<usize>,
    },
    /// Two corrupted whole-image views per MNIST image: a zeroed square on
    /// view 1, clamped uniform noise on view 2.
    CorruptedMnist {
        data_dir: String,
        #[serde(default = "default_mask")]
        mask_size: usize,
        #[serde(default = "default_noise")]
        noise_max: f64,
        #[serde(default = "default_train_size")]
        train_size: usize,
        #[serde(default = "default_test_size")]
        test_size: usize,
        seed: u64,
    },
    /// Samples from an explicit small joint table with views conditionally
    /// independent given the label.
    SyntheticDiscrete {
        num_classes: usize,
        view_alphabets: Vec<usize>,
        train_size: usize,
        test_size: usize,
        seed: u64,
    },
}

fn default_mask() -> usize {
    15
}
fn default_noise() -> f64 {
    3.0
}
fn default_train_size() -> usize {
    50_000
}
fn default_test_size() -> usize {
    20_000
}

/// Train and test splits built from one spec.
pub struct DatasetPair {
    pub train: MultiViewDataset,
    pub test: MultiViewDataset,
    /// Exact joint table when the source is synthetic.
    pub table: Option<synth::JointTable>,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DatasetPair> {
        match self {
            DatasetSpec::IdxFiles { data_dir, limit_train, limit_test } => {
                let (train, test) = views::load_two_view_mnist(
                    std::path::Path::new(data_dir),
                    *limit_train,
                    *limit_test,
                )?;
                Ok(DatasetPair { train, test, table: None })
            }
            DatasetSpec::CorruptedMnist {
                data_dir,
                mask_size,
                noise_max,
                train_size,
                test_size,
                seed,
            } => {
                let (train, test) = views::build_corrupted_two_view(
                    std::path::Path::new(data_dir),
                    *mask_size,
                    *noise_max,
                    *train_size,
                    *test_size,
                    *seed,
                )?;
                Ok(DatasetPair { train, test, table: None })
            }
            DatasetSpec::SyntheticDiscrete {
                num_classes,
                view_alphabets,
                train_size,
                test_size,
                seed,
            } => {
                let table =
                    synth::JointTable::random(*num_classes, view_alphabets, *seed)?;
                let mut rng = crate::rng::derived(*seed, "synth-samples");
                let train = table.sample_dataset(*train_size, &mut rng)?;
                let test = table.sample_dataset(*test_size, &mut rng)?;
                Ok(DatasetPair { train, test, table: Some(table) })
            }
        }
    }
}

/// Deterministic minibatch index stream: a pure function of `(seed, step)`.
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    rng: crate::rng::Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, rng: crate::rng::Rng) -> Self {
        assert!(n > 0, "sampler over empty dataset");
        BatchSampler { n, batch_size: batch_size.min(n), rng }
    }

    /// Indices for the next minibatch, sampled without replacement.
    pub fn next_batch(&mut self) -> Vec<usize> {
        use rand::seq::index::sample;
        sample(&mut self.rng, self.n, self.batch_size).into_vec()
    }
}
