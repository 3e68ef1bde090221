use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::HardAttentionGate;
use crate::init;
use crate::nn::cnn::{CnnConfig, MultiStreamCnn};
use crate::nn::mlp::{GatedMlp, MlpConfig};
use crate::nn::vit::{MicroVit, VitConfig};
use crate::params::{Group, ParamStore};
use crate::tensor::{Array, Graph, Var};

/// Anything trainable: owns a parameter store and maps a batch of inputs
/// to a batch of outputs.
pub trait Model {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// `input` is `[B, ...]`; the result is `[B, out]`.
    fn forward<'g>(&self, g: &'g Graph, input: &Array) -> Result<Var<'g>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    MicroVit,
    MultistreamCnn,
    GatedMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Per-sample input shape: `[C, H, W]` for images, `[F]` for feature vectors.
    pub input_shape: Vec<usize>,
    #[serde(default = "yes")]
    pub use_hag: bool,
    #[serde(default = "regression")]
    pub head: HeadKind,
    #[serde(default = "ten")]
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub vit: VitConfig,
    #[serde(default)]
    pub cnn: CnnConfig,
    #[serde(default)]
    pub mlp: MlpConfig,
}

fn yes() -> bool {
    true
}
fn regression() -> HeadKind {
    HeadKind::Regression
}
fn ten() -> usize {
    10
}

impl ModelConfig {
    pub fn micro_vit(input_shape: [usize; 3], vit: VitConfig, use_hag: bool) -> Self {
        Self {
            architecture: Architecture::MicroVit,
            input_shape: input_shape.to_vec(),
            use_hag,
            head: HeadKind::Regression,
            num_classes: 10,
            seed: 0,
            vit,
            cnn: CnnConfig::default(),
            mlp: MlpConfig::default(),
        }
    }

    pub fn multistream_cnn(input_shape: [usize; 3], cnn: CnnConfig, use_hag: bool) -> Self {
        Self {
            architecture: Architecture::MultistreamCnn,
            cnn,
            ..Self::micro_vit(input_shape, VitConfig::default(), use_hag)
        }
    }

    pub fn gated_mlp(features: usize, mlp: MlpConfig, use_hag: bool) -> Self {
        Self {
            architecture: Architecture::GatedMlp,
            input_shape: vec![features],
            mlp,
            ..Self::micro_vit([1, 1, 1], VitConfig::default(), use_hag)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_head(mut self, head: HeadKind, num_classes: usize) -> Self {
        self.head = head;
        self.num_classes = num_classes;
        self
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::Regression => 1,
            HeadKind::Classification => self.num_classes,
        }
    }

    fn image_shape(&self) -> Result<[usize; 3]> {
        match self.input_shape.as_slice() {
            &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
            _ => Err(Error::config(
                "model.input_shape",
                format!("expected positive [C, H, W], got {:?}", self.input_shape),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head == HeadKind::Classification && self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least 2 classes"));
        }
        match self.architecture {
            Architecture::MicroVit | Architecture::MultistreamCnn => {
                self.image_shape()?;
            }
            Architecture::GatedMlp => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(Error::config(
                        "model.input_shape",
                        format!("gated_mlp expects [F], got {:?}", self.input_shape),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Where a gate sits in the network; used for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePosition {
    AfterAttention,
    AfterMlp,
    Stream(usize),
    Input,
}

impl std::fmt::Display for GatePosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GatePosition::AfterAttention => f.write_str("after_attention"),
            GatePosition::AfterMlp => f.write_str("after_mlp"),
            GatePosition::Stream(i) => write!(f, "stream_{i}"),
            GatePosition::Input => f.write_str("input"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GateSite {
    pub layer: usize,
    pub position: GatePosition,
    pub gate: HardAttentionGate,
}

#[derive(Clone, Debug)]
pub enum Body {
    MicroVit(MicroVit),
    MultistreamCnn(MultiStreamCnn),
    GatedMlp(GatedMlp),
}

/// A built model: configuration, parameters and architecture.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub body: Body,
}

/// Separate stream for gate seeds, so main-parameter initialisation is
/// identical with and without gates.
const GATE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl Network {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init::rng(config.seed);
        let mut gate_rng = init::rng(config.seed ^ GATE_STREAM);
        let out = config.out_dim();
        let body = match config.architecture {
            Architecture::MicroVit => Body::MicroVit(MicroVit::new(
                &mut store,
                &config.vit,
                config.image_shape()?,
                out,
                config.use_hag,
                &mut rng,
                &mut gate_rng,
            )?),
            Architecture::MultistreamCnn => Body::MultistreamCnn(MultiStreamCnn::new(
                &mut store,
                &config.cnn,
                config.image_shape()?,
                out,
                config.use_hag,
                &mut rng,
                &mut gate_rng,
            )?),
            Architecture::GatedMlp => Body::GatedMlp(GatedMlp::new(
                &mut store,
                &config.mlp,
                config.input_shape[0],
                out,
                config.use_hag,
                &mut rng,
                &mut gate_rng,
            )?),
        };
        Ok(Self {
            config: config.clone(),
            store,
            body,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Every gate in forward order.
    pub fn gates(&self) -> Vec<GateSite> {
        let mut out = Vec::new();
        match &self.body {
            Body::MicroVit(vit) => {
                for (i, b) in vit.blocks.iter().enumerate() {
                    if let Some(g) = &b.gate_attn {
                        out.push(GateSite {
                            layer: i,
                            position: GatePosition::AfterAttention,
                            gate: g.clone(),
                        });
                    }
                    if let Some(g) = &b.gate_mlp {
                        out.push(GateSite {
                            layer: i,
                            position: GatePosition::AfterMlp,
                            gate: g.clone(),
                        });
                    }
                }
            }
            Body::MultistreamCnn(cnn) => {
                for (i, s) in cnn.streams.iter().enumerate() {
                    if let Some(g) = &s.gate {
                        out.push(GateSite {
                            layer: 0,
                            position: GatePosition::Stream(i),
                            gate: g.clone(),
                        });
                    }
                }
            }
            Body::GatedMlp(mlp) => {
                if let Some(g) = &mlp.input_gate {
                    out.push(GateSite {
                        layer: 0,
                        position: GatePosition::Input,
                        gate: g.clone(),
                    });
                }
            }
        }
        out
    }

    /// Forward pass reading parameters from `store`, which must be laid out
    /// like `self.store` (e.g. a perturbed copy).
    pub fn forward_with<'g>(&self, g: &'g Graph, store: &ParamStore, input: &Array) -> Result<Var<'g>> {
        let x = self.shape_input(input)?;
        match &self.body {
            Body::MicroVit(m) => m.forward(g, store, &x),
            Body::MultistreamCnn(m) => m.forward(g, store, &x),
            Body::GatedMlp(m) => m.forward(g, store, &x),
        }
    }

    /// Reshapes `[B, ...]` to `[B, ...input_shape]`, checking element counts.
    pub fn shape_input(&self, input: &Array) -> Result<Array> {
        let b = *input.shape().first().ok_or_else(|| Error::InvalidShape {
            op: "model input",
            msg: "rank-0 input".into(),
        })?;
        let per: usize = self.config.input_shape.iter().product();
        if input.numel() != b * per {
            return Err(Error::InvalidShape {
                op: "model input",
                msg: format!(
                    "input {:?} does not hold {b} samples of shape {:?}",
                    input.shape(),
                    self.config.input_shape
                ),
            });
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&self.config.input_shape);
        input.reshape(shape)
    }
}

impl Model for Network {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward<'g>(&self, g: &'g Graph, input: &Array) -> Result<Var<'g>> {
        self.forward_with(g, &self.store, input)
    }
}

/// Parameters that belong to `group`, for reporting.
pub fn group_size(net: &Network, group: Group) -> usize {
    net.store.numel_in(group)
}
