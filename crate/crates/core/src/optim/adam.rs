use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::schedule::{CosineWarmRestarts, ScheduleConfig};
use crate::params::{GradientMap, Group, ParamId, ParamStore};
use crate::tensor::Array;

/// Scales every entry by `th / ‖g‖₂` when the global norm exceeds `th`.
pub fn clip_gradients(grads: &GradientMap, th: f64) -> Result<GradientMap> {
    if !(th > 0.0) {
        return Err(Error::config("clip_threshold", format!("must be > 0, got {th}")));
    }
    let norm = grads.l2_norm();
    let mut out = grads.clone();
    if norm > th {
        let s = th / norm;
        for (_, g) in out.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(out)
}

/// Hyper-parameters of one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    /// Plain SGD instead of Adam.
    #[serde(default)]
    pub sgd: bool,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl GroupConfig {
    pub fn att_default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-5,
            clip_threshold: 128.0,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            sgd: false,
            schedule: None,
        }
    }

    /// `vit` selects the larger transformer clipping threshold.
    pub fn main_default(vit: bool) -> Self {
        Self {
            lr: 1e-3,
            clip_threshold: if vit { 128.0 } else { 8.0 },
            ..Self::att_default()
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            clip_threshold: f64::INFINITY,
            sgd: true,
            ..Self::att_default()
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let f = |name: &str| format!("{section}.{name}");
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(f("lr"), "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(f("weight_decay"), "must be >= 0"));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::config(f("clip_threshold"), "must be > 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config(f("beta1"), "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(f("eps"), "must be > 0"));
        }
        if let Some(s) = &self.schedule {
            s.validate(&f("schedule"), self.lr)?;
        }
        Ok(())
    }
}

/// First and second moment estimates for one group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

/// A parameter group with its own optimizer and schedule state.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub group: Group,
    pub ids: Vec<ParamId>,
    pub config: GroupConfig,
    pub state: AdamState,
    pub schedule: Option<CosineWarmRestarts>,
}

impl ParamGroup {
    pub fn new(store: &ParamStore, group: Group, ids: Vec<ParamId>, config: GroupConfig) -> Self {
        let zeros: Vec<Array> = ids
            .iter()
            .map(|&id| Array::zeros(store.value(id).shape().to_vec()))
            .collect();
        let schedule = config
            .schedule
            .as_ref()
            .map(|s| CosineWarmRestarts::new(config.lr, s));
        Self {
            group,
            ids,
            config,
            state: AdamState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
            schedule,
        }
    }

    /// Every parameter of `group` in `store`.
    pub fn of(store: &ParamStore, group: Group, config: GroupConfig) -> Self {
        Self::new(store, group, store.ids_in(group), config)
    }

    /// Every parameter in `store`, reported as `group`.
    pub fn all(store: &ParamStore, group: Group, config: GroupConfig) -> Self {
        Self::new(store, group, store.ids().collect(), config)
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn lr(&self) -> f64 {
        self.schedule.map_or(self.config.lr, |s| s.lr())
    }

    pub fn numel(&self, store: &ParamStore) -> usize {
        self.ids.iter().map(|&id| store.value(id).numel()).sum()
    }
}

/// Applies one update to the group's parameters with already-clipped
/// gradients, then advances the schedule. Missing gradients count as zero.
pub fn adam_step(store: &mut ParamStore, group: &mut ParamGroup, grads: &GradientMap) -> Result<f64> {
    let lr = group.lr();
    let cfg = &group.config;
    let st = &mut group.state;
    if st.m.len() != group.ids.len() || st.v.len() != group.ids.len() {
        return Err(Error::StateMismatch(format!(
            "{} group has {} parameters but {} moment buffers",
            group.group,
            group.ids.len(),
            st.m.len()
        )));
    }
    for (k, &id) in group.ids.iter().enumerate() {
        let shape = store.value(id).shape();
        if st.m[k].shape() != shape || st.v[k].shape() != shape {
            return Err(Error::StateMismatch(format!(
                "moment shape {:?} vs parameter `{}` {:?}",
                st.m[k].shape(),
                store.get(id).name,
                shape
            )));
        }
        if let Some(g) = grads.get(id) {
            if g.shape() != shape {
                return Err(Error::StateMismatch(format!(
                    "gradient shape {:?} vs parameter `{}` {:?}",
                    g.shape(),
                    store.get(id).name,
                    shape
                )));
            }
        }
    }
    st.step += 1;
    let t = st.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (k, &id) in group.ids.iter().enumerate() {
        let theta = store.value_mut(id).data_mut();
        let grad = grads.get(id).map(|g| g.data());
        let m = st.m[k].data_mut();
        let v = st.v[k].data_mut();
        for i in 0..theta.len() {
            let g = grad.map_or(0.0, |g| g[i]);
            if cfg.weight_decay != 0.0 {
                theta[i] *= decay;
            }
            if cfg.sgd {
                theta[i] -= lr * g;
                continue;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    if let Some(s) = group.schedule.as_mut() {
        s.step();
    }
    Ok(lr)
}
