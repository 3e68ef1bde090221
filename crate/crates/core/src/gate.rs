//! Hard-attention gates.
//!
//! A gate owns a raw weight vector `w` of length `n`. Its scores are
//! `f_i = σ(w_i)`, each independently in (0, 1) and not normalised across
//! features, and gating is the Hadamard product `X_att = F ⊙ X`. In
//! embedding mode the scores multiply the last axis of `X`; in channel mode
//! one score multiplies a whole `[H, W]` feature map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Graph, Var};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Embedding,
    Channel,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::Embedding => "embedding",
            GateMode::Channel => "channel",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardAttentionGate {
    raw: ParamId,
    mode: GateMode,
    n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub mean: f64,
    pub std: f64,
    /// Counts over 20 equal-width bins of [0, 1]; a score of exactly 1 lands in the last bin.
    pub histogram: Vec<usize>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl HardAttentionGate {
    /// Registers a gate of size `n` in `store` (group `att`), with raw
    /// weights drawn from Xavier-uniform using fan_in = fan_out = n.
    pub fn init(
        store: &mut ParamStore,
        name: impl Into<String>,
        n: usize,
        mode: GateMode,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("gate.n", "gate size must be at least 1"));
        }
        let mut rng = init::rng(seed);
        let raw = init::xavier_uniform(&mut rng, vec![n], n, n);
        let id = store.add(name, Group::Att, raw);
        Ok(Self { raw: id, mode, n })
    }

    /// A gate alone in a fresh store.
    pub fn standalone(n: usize, mode: GateMode, seed: u64) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let gate = Self::init(&mut store, "gate", n, mode, seed)?;
        Ok((store, gate))
    }

    pub fn param(&self) -> ParamId {
        self.raw
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// σ(w) as a graph node, so gradients reach the raw weights.
    pub fn scores<'g>(&self, g: &'g Graph, store: &ParamStore) -> Var<'g> {
        g.param(store, self.raw).sigmoid()
    }

    /// σ(w) evaluated outside any graph.
    pub fn score_values(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.raw).data().iter().map(|&w| sigmoid(w)).collect()
    }

    /// X_att = σ(w) ⊙ X.
    pub fn apply<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let mismatch = || Error::GateDimension {
            mode: self.mode.as_str(),
            n: self.n,
            shape: shape.clone(),
        };
        let scores = self.scores(g, store);
        match self.mode {
            GateMode::Embedding => {
                if shape.last() != Some(&self.n) {
                    return Err(mismatch());
                }
                x.mul(&scores)
            }
            GateMode::Channel => {
                if shape.len() < 3 || shape[shape.len() - 3] != self.n {
                    return Err(mismatch());
                }
                x.mul(&scores.reshape(&[self.n, 1, 1])?)
            }
        }
    }

    pub fn stats(&self, store: &ParamStore) -> GateStats {
        GateStats::from_scores(&self.score_values(store))
    }
}

impl GateStats {
    pub fn from_scores(scores: &[f64]) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let mut histogram = vec![0; HISTOGRAM_BINS];
        for &s in scores {
            let bin = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        Self {
            mean,
            std: var.sqrt(),
            histogram,
        }
    }
}
