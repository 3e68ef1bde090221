//! Epoch-level training and inference over sample lists.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, collate, Sample};
use crate::error::{Error, Result};
use crate::loss::{Objective, Targets};
use crate::metrics::Prediction;
use crate::nn::{Model, Network};
use crate::optim::{gr_train_step, standard_train_step, GroupConfig, ParamGroup, TrainStepReport};
use crate::params::Group;
use crate::tensor::{finite_diff_check, Array, GradCheckReport, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub gr_enabled: bool,
    pub att: GroupConfig,
    pub main: GroupConfig,
    pub loss_att: Objective,
    pub loss_main: Objective,
}

/// A network with its optimizer groups.
///
/// With routing enabled each step is [`gr_train_step`]. Otherwise one pass
/// updates both groups (gates, if any, keep their own hyper-parameters).
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub config: TrainerConfig,
    /// `[att, main]` when the network has gates, `[main]` otherwise.
    pub groups: Vec<ParamGroup>,
}

impl Trainer {
    pub fn new(net: Network, config: TrainerConfig) -> Result<Self> {
        let store = &net.store;
        let att = ParamGroup::of(store, Group::Att, config.att.clone());
        if config.gr_enabled && att.is_empty() {
            return Err(Error::EmptyAttGroup);
        }
        let main = ParamGroup::of(store, Group::Main, config.main.clone());
        let groups = if att.is_empty() { vec![main] } else { vec![att, main] };
        Ok(Self { net, config, groups })
    }

    pub fn step(&mut self, inputs: &Array, targets: &Targets) -> Result<TrainStepReport> {
        if self.config.gr_enabled {
            let (att, main) = self.groups.split_at_mut(1);
            gr_train_step(
                &mut self.net,
                inputs,
                targets,
                &mut att[0],
                &mut main[0],
                &self.config.loss_att,
                &self.config.loss_main,
            )
        } else {
            standard_train_step(&mut self.net, inputs, targets, &mut self.groups, &self.config.loss_main)
        }
    }

    /// One pass over `idx` in shuffled batches.
    pub fn run_epoch(
        &mut self,
        samples: &[Sample],
        idx: &[usize],
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<TrainStepReport>> {
        let mut reports = Vec::new();
        for batch in batch_indices(idx.len(), batch_size, Some(rng)) {
            let picked: Vec<&Sample> = batch.iter().map(|&b| &samples[idx[b]]).collect();
            let (x, y) = collate(&picked)?;
            reports.push(self.step(&x, &y)?);
        }
        Ok(reports)
    }

    /// Sample-weighted mean of the main objective over `idx`.
    pub fn loss(&self, samples: &[Sample], idx: &[usize], batch_size: usize) -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::Data("no samples to evaluate".into()));
        }
        let mut total = 0.0;
        for chunk in idx.chunks(batch_size.max(1)) {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (x, y) = collate(&picked)?;
            let g = Graph::new();
            let out = self.net.forward(&g, &x)?;
            total += self.config.loss_main.loss(&g, &out, &y)?.item()? * chunk.len() as f64;
        }
        Ok(total / idx.len() as f64)
    }

    /// Raw network outputs, one row per sample.
    pub fn outputs(&self, samples: &[Sample], idx: &[usize], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(batch_size.max(1)) {
            let inputs: Vec<&Array> = chunk.iter().map(|&i| &samples[i].input).collect();
            let g = Graph::new();
            let y = self.net.forward(&g, &Array::stack(&inputs)?)?.value();
            let width = y.shape()[1];
            out.extend(y.data().chunks(width).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Size predictions in millimetres for regression objectives.
    pub fn predict_sizes(&self, samples: &[Sample], idx: &[usize], batch_size: usize) -> Result<Vec<Prediction>> {
        let outs = self.outputs(samples, idx, batch_size)?;
        idx.iter()
            .zip(outs)
            .map(|(&i, o)| {
                let s = &samples[i];
                let target_mm = s
                    .size_mm()
                    .ok_or_else(|| Error::Data("size predictions need size targets".into()))?;
                let pred_mm = match &self.config.loss_main {
                    Objective::WeightedHuber(cfg) => cfg.denormalize(o[0]),
                    Objective::Mse => o[0],
                    Objective::CrossEntropy => {
                        return Err(Error::config("loss.kind", "classification objective has no sizes"))
                    }
                };
                Ok(Prediction {
                    sample_id: s.sample_id.clone(),
                    unique_id: s.unique_id.clone(),
                    pred_mm,
                    target_mm,
                })
            })
            .collect()
    }

    /// Arg-max class per sample; ties go to the lower index.
    pub fn predict_classes(&self, samples: &[Sample], idx: &[usize], batch_size: usize) -> Result<Vec<usize>> {
        Ok(self
            .outputs(samples, idx, batch_size)?
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Central-difference check of `objective(net(inputs), targets)` against
/// backprop for every parameter of `net`.
pub fn gradcheck_network(
    net: &Network,
    inputs: &Array,
    targets: &Targets,
    objective: &Objective,
    eps: f64,
) -> Result<GradCheckReport> {
    finite_diff_check(
        |g, store| {
            let out = net.forward_with(g, store, inputs)?;
            objective.loss(g, &out, targets)
        },
        &net.store,
        eps,
    )
}
