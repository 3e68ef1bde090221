//! Per-channel statistics, normalisation and noise augmentation for
//! `[C, H, W]` inputs.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::init;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub means: Vec<f64>,
    /// Population standard deviations.
    pub stds: Vec<f64>,
}

fn channels(s: &Sample) -> Result<(usize, usize)> {
    match s.input.shape() {
        &[c, h, w] => Ok((c, h * w)),
        other => Err(Error::Data(format!("expected a [C, H, W] image, got {other:?}"))),
    }
}

/// Statistics over every pixel of every sample; pass the training split only.
pub fn channel_stats(samples: &[&Sample]) -> Result<ChannelStats> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("no samples for channel statistics".into()))?;
    let (c, _) = channels(first)?;
    let mut sum = vec![0.0; c];
    let mut count = vec![0usize; c];
    for s in samples {
        let (cs, hw) = channels(s)?;
        if cs != c {
            return Err(Error::Data(format!("channel count {cs} vs {c}")));
        }
        for (k, plane) in s.input.data().chunks(hw).enumerate() {
            sum[k] += plane.iter().sum::<f64>();
            count[k] += hw;
        }
    }
    let means: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let mut sq = vec![0.0; c];
    for s in samples {
        let (_, hw) = channels(s)?;
        for (k, plane) in s.input.data().chunks(hw).enumerate() {
            sq[k] += plane.iter().map(|v| (v - means[k]).powi(2)).sum::<f64>();
        }
    }
    let stds = sq.iter().zip(&count).map(|(s, &n)| (s / n as f64).sqrt()).collect();
    Ok(ChannelStats { means, stds })
}

/// `(x − mean_c) / std_c` per channel, in place.
pub fn normalize_images(samples: &mut [Sample], stats: &ChannelStats) -> Result<()> {
    if stats.means.len() != stats.stds.len() || stats.stds.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Data("channel stds must be positive and match the means".into()));
    }
    for s in samples.iter_mut() {
        let (c, hw) = channels(s)?;
        if c != stats.means.len() {
            return Err(Error::Data(format!(
                "image has {c} channels but statistics cover {}",
                stats.means.len()
            )));
        }
        for (k, plane) in s.input.data_mut().chunks_mut(hw).enumerate() {
            plane
                .iter_mut()
                .for_each(|v| *v = (*v - stats.means[k]) / stats.stds[k]);
        }
    }
    Ok(())
}

/// Adds `N(0, sigma²)` noise to the input; the target is untouched.
pub fn augment_gaussian_noise(sample: &Sample, sigma: f64, seed: u64) -> Result<Sample> {
    if !(sigma >= 0.0) {
        return Err(Error::config("data.augment.noise_sigma", "must be >= 0"));
    }
    let mut out = sample.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::Data(e.to_string()))?;
    let mut rng = init::rng(seed);
    out.input
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += dist.sample(&mut rng));
    Ok(out)
}
