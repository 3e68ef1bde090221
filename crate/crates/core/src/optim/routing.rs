//! Two-phase gradient routing.
//!
//! Each step runs two forward/backward passes over the same batch:
//!
//! ```text
//! θ_att  ← θ_att  − η_att  · clip(∇_att  L(θ_att,   θ_main), Th_att)
//! θ_main ← θ_main − η_main · clip(∇_main L(θ_att',  θ_main), Th_main)
//! ```
//!
//! where `θ_att'` is the freshly updated gate state. Gradients of the other
//! group are computed and discarded.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{Objective, Targets};
use crate::nn::Model;
use crate::optim::adam::{adam_step, clip_gradients, ParamGroup};
use crate::params::{GradientMap, Group};
use crate::tensor::{Array, Graph};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStepStats {
    pub group: Group,
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainStepReport {
    /// Loss of the gate phase; `None` for standard steps.
    pub loss_att: Option<f64>,
    pub loss_main: f64,
    pub groups: Vec<GroupStepStats>,
}

impl TrainStepReport {
    pub fn stats(&self, group: Group) -> Option<&GroupStepStats> {
        self.groups.iter().find(|s| s.group == group)
    }
}

fn forward_backward<M: Model>(
    model: &M,
    inputs: &Array,
    targets: &Targets,
    objective: &Objective,
    phase: &'static str,
) -> Result<(f64, GradientMap)> {
    let g = Graph::new();
    let out = model.forward(&g, inputs)?;
    let loss = objective.loss(&g, &out, targets)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { phase, value });
    }
    Ok((value, g.backward(loss)?.into_params()))
}

fn update<M: Model>(
    model: &mut M,
    group: &mut ParamGroup,
    grads: &GradientMap,
) -> Result<GroupStepStats> {
    let own = grads.restrict(&group.ids);
    let clipped = clip_gradients(&own, group.config.clip_threshold)?;
    let lr = adam_step(model.params_mut(), group, &clipped)?;
    Ok(GroupStepStats {
        group: group.group,
        pre_clip_norm: own.l2_norm(),
        post_clip_norm: clipped.l2_norm(),
        lr,
    })
}

/// Gate phase then main phase on one batch.
pub fn gr_train_step<M: Model>(
    model: &mut M,
    inputs: &Array,
    targets: &Targets,
    att: &mut ParamGroup,
    main: &mut ParamGroup,
    loss_att: &Objective,
    loss_main: &Objective,
) -> Result<TrainStepReport> {
    if att.is_empty() {
        return Err(Error::EmptyAttGroup);
    }
    let (la, grads) = forward_backward(model, inputs, targets, loss_att, "att")?;
    let att_stats = update(model, att, &grads)?;
    let (lm, grads) = forward_backward(model, inputs, targets, loss_main, "main")?;
    let main_stats = update(model, main, &grads)?;
    Ok(TrainStepReport {
        loss_att: Some(la),
        loss_main: lm,
        groups: vec![att_stats, main_stats],
    })
}

/// One forward/backward pass; every group is clipped and stepped with its
/// own configuration.
pub fn standard_train_step<M: Model>(
    model: &mut M,
    inputs: &Array,
    targets: &Targets,
    groups: &mut [ParamGroup],
    objective: &Objective,
) -> Result<TrainStepReport> {
    let (loss, grads) = forward_backward(model, inputs, targets, objective, "main")?;
    let mut stats = Vec::with_capacity(groups.len());
    for group in groups.iter_mut() {
        stats.push(update(model, group, &grads)?);
    }
    Ok(TrainStepReport {
        loss_att: None,
        loss_main: loss,
        groups: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::adam::GroupConfig;
    use crate::params::{ParamId, ParamStore};
    use crate::tensor::Var;

    /// `y = m · σ(w) · x`
    struct Toy {
        store: ParamStore,
        w: ParamId,
        m: ParamId,
    }

    impl Toy {
        fn new(w: f64, m: f64) -> Self {
            let mut store = ParamStore::new();
            let w = store.add("w", Group::Att, Array::vector(&[w]));
            let m = store.add("m", Group::Main, Array::vector(&[m]));
            Self { store, w, m }
        }
        fn get(&self, id: ParamId) -> f64 {
            self.store.value(id).data()[0]
        }
    }

    impl Model for Toy {
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn forward<'g>(&self, g: &'g Graph, input: &Array) -> Result<Var<'g>> {
            let x = g.constant(input.clone());
            let s = g.param(&self.store, self.w).sigmoid();
            g.param(&self.store, self.m).mul(&s)?.mul(&x)
        }
    }

    fn groups(model: &Toy, lr: f64) -> (ParamGroup, ParamGroup) {
        (
            ParamGroup::of(&model.store, Group::Att, GroupConfig::sgd(lr)),
            ParamGroup::of(&model.store, Group::Main, GroupConfig::sgd(lr)),
        )
    }

    #[test]
    fn toy_step_updates_gate_then_main() {
        let mut toy = Toy::new(0.0, 1.0);
        let (mut att, mut main) = groups(&toy, 0.1);
        let x = Array::vector(&[1.0]);
        let y = Targets::Values(vec![0.0]);
        let r = gr_train_step(&mut toy, &x, &y, &mut att, &mut main, &Objective::Mse, &Objective::Mse)
            .unwrap();
        assert_eq!(r.loss_att, Some(0.25));
        assert!((toy.get(toy.w) + 0.025).abs() < 1e-15);
        // independent high-precision evaluation of m after the main phase
        assert!((toy.get(toy.m) - 0.951_242_123_213_632_1).abs() < 1e-9);
    }

    #[test]
    fn empty_att_group_is_rejected() {
        let mut toy = Toy::new(0.0, 1.0);
        let (_, mut main) = groups(&toy, 0.1);
        let mut att = ParamGroup::new(&toy.store, Group::Att, vec![], GroupConfig::sgd(0.1));
        let err = gr_train_step(
            &mut toy,
            &Array::vector(&[1.0]),
            &Targets::Values(vec![0.0]),
            &mut att,
            &mut main,
            &Objective::Mse,
            &Objective::Mse,
        )
        .unwrap_err();
        assert!(err.to_string().contains("standard_train_step"));
    }

    #[test]
    fn constant_loss_changes_nothing() {
        let mut toy = Toy::new(0.3, 0.0);
        let (mut att, mut main) = groups(&toy, 0.1);
        // m = 0 and x = 0 give zero gradients for both groups
        gr_train_step(
            &mut toy,
            &Array::vector(&[0.0]),
            &Targets::Values(vec![0.0]),
            &mut att,
            &mut main,
            &Objective::Mse,
            &Objective::Mse,
        )
        .unwrap();
        assert_eq!((toy.get(toy.w), toy.get(toy.m)), (0.3, 0.0));
    }

    #[test]
    fn zero_lr_standard_step_is_a_no_op() {
        let mut toy = Toy::new(0.3, 0.7);
        let mut gs = vec![ParamGroup::all(&toy.store, Group::Main, GroupConfig::sgd(0.0))];
        standard_train_step(
            &mut toy,
            &Array::vector(&[1.0]),
            &Targets::Values(vec![2.0]),
            &mut gs,
            &Objective::Mse,
        )
        .unwrap();
        assert_eq!((toy.get(toy.w), toy.get(toy.m)), (0.3, 0.7));
    }
}
