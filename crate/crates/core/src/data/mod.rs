//! Samples, loaders, synthetic tasks, image preprocessing and grouped splits.

pub mod cifar;
pub mod image;
pub mod split;
pub mod synth;
pub mod table;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Targets;
use crate::tensor::Array;

pub use cifar::{load_cifar100_binary, CifarOptions, CIFAR_RECORD_BYTES};
pub use image::{augment_gaussian_noise, channel_stats, normalize_images, ChannelStats};
pub use split::{assign_folds, kfold_split, Split, SplitPlan};
pub use synth::{synth_regression_dataset, SynthConfig, SynthDataset};
pub use table::{load_csv_regression, write_csv_regression};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    SizeMm(f64),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Identity shared by all samples of one object; splits never divide it.
    pub unique_id: String,
    /// Per-row identity, unique within a dataset.
    pub sample_id: String,
    /// Per-sample input without a batch axis.
    pub input: Array,
    pub target: Target,
    pub fold: Option<usize>,
}

impl Sample {
    pub fn size_mm(&self) -> Option<f64> {
        match self.target {
            Target::SizeMm(y) => Some(y),
            Target::Class(_) => None,
        }
    }
}

/// Stacks inputs to `[B, ...]` and gathers the targets, which must all be
/// of one kind.
pub fn collate(samples: &[&Sample]) -> Result<(Array, Targets)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot collate an empty batch".into()))?;
    let inputs: Vec<&Array> = samples.iter().map(|s| &s.input).collect();
    let batch = Array::stack(&inputs)?;
    let targets = match first.target {
        Target::SizeMm(_) => Targets::Values(
            samples
                .iter()
                .map(|s| s.size_mm().ok_or_else(mixed))
                .collect::<Result<_>>()?,
        ),
        Target::Class(_) => Targets::Labels(
            samples
                .iter()
                .map(|s| match s.target {
                    Target::Class(c) => Ok(c),
                    Target::SizeMm(_) => Err(mixed()),
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok((batch, targets))
}

fn mixed() -> Error {
    Error::Data("batch mixes size and class targets".into())
}

/// Index batches of at most `batch_size`, shuffled when an rng is given.
pub fn batch_indices(n: usize, batch_size: usize, rng: Option<&mut impl Rng>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        idx.shuffle(r);
    }
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
