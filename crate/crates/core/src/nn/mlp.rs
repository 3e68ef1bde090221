use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{GateMode, HardAttentionGate};
use crate::nn::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::{Array, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

/// Feature-vector regressor/classifier with an input-level gate:
/// `head(gelu(fc(gate(x))))`.
#[derive(Clone, Debug)]
pub struct GatedMlp {
    pub input_gate: Option<HardAttentionGate>,
    pub fc: Linear,
    pub head: Linear,
}

impl GatedMlp {
    pub fn new(
        store: &mut ParamStore,
        config: &MlpConfig,
        features: usize,
        out_dim: usize,
        use_hag: bool,
        rng: &mut impl Rng,
        gate_rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.hidden == 0 || features == 0 {
            return Err(Error::config("model.mlp.hidden", "must be positive"));
        }
        let input_gate = if use_hag {
            Some(HardAttentionGate::init(
                store,
                "input_gate",
                features,
                GateMode::Embedding,
                gate_rng.gen(),
            )?)
        } else {
            None
        };
        Ok(Self {
            input_gate,
            fc: Linear::new(store, "fc", features, config.hidden, rng),
            head: Linear::new(store, "head", config.hidden, out_dim, rng),
        })
    }

    /// `[B, F]` features to `[B, out_dim]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Array) -> Result<Var<'g>> {
        let mut h = g.constant(x.clone());
        if let Some(gate) = &self.input_gate {
            h = gate.apply(g, store, &h)?;
        }
        let h = self.fc.forward(g, store, &h)?.gelu();
        self.head.forward(g, store, &h)
    }
}
