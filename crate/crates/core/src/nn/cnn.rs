//! Multi-stream CNN with per-stream channel gates.
//!
//! The input channels are split into streams (e.g. RGB, depth, location
//! map). Each stream runs three `conv3x3/stride 2 + relu` stages, its final
//! feature maps are channel-gated, and the streams are concatenated along
//! the channel axis before global average pooling and the head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{GateMode, HardAttentionGate};
use crate::nn::layers::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::{Array, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Input channels consumed by each stream, in order.
    pub stream_channels: Vec<usize>,
    /// Output channels of the three stages (shared by all streams).
    pub widths: Vec<usize>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            stream_channels: vec![3, 1],
            widths: vec![4, 8, 8],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub in_channels: usize,
    pub stages: Vec<Conv2d>,
    pub gate: Option<HardAttentionGate>,
}

impl Stream {
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Result<Var<'g>> {
        let mut h = *x;
        for conv in &self.stages {
            h = conv.forward(g, store, &h)?.relu();
        }
        Ok(h)
    }
}

/// Channel-gates each stream (where a gate is given) and concatenates them
/// along the channel axis. All streams must share batch and spatial size.
pub fn multistream_fuse<'g>(
    g: &'g Graph,
    store: &ParamStore,
    streams: &[Var<'g>],
    gates: &[Option<&HardAttentionGate>],
) -> Result<Var<'g>> {
    let first = streams.first().ok_or_else(|| Error::InvalidShape {
        op: "multistream_fuse",
        msg: "no streams".into(),
    })?;
    let reference = first.shape();
    let mut parts = Vec::with_capacity(streams.len());
    for (i, s) in streams.iter().enumerate() {
        let shape = s.shape();
        if shape.len() != 4 || shape[0] != reference[0] || shape[2..] != reference[2..] {
            return Err(Error::ShapeMismatch {
                op: "multistream_fuse (spatial)",
                lhs: reference,
                rhs: shape,
            });
        }
        parts.push(match gates.get(i).copied().flatten() {
            Some(gate) => gate.apply(g, store, s)?,
            None => *s,
        });
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts, 1)
}

#[derive(Clone, Debug)]
pub struct MultiStreamCnn {
    pub config: CnnConfig,
    pub streams: Vec<Stream>,
    pub head: Linear,
}

impl MultiStreamCnn {
    pub fn new(
        store: &mut ParamStore,
        config: &CnnConfig,
        image_shape: [usize; 3],
        out_dim: usize,
        use_hag: bool,
        rng: &mut impl Rng,
        gate_rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.stream_channels.is_empty() || config.stream_channels.contains(&0) {
            return Err(Error::config(
                "model.cnn.stream_channels",
                "need at least one stream with a positive channel count",
            ));
        }
        let total: usize = config.stream_channels.iter().sum();
        if total != image_shape[0] {
            return Err(Error::config(
                "model.cnn.stream_channels",
                format!(
                    "streams consume {total} channels but the input has {}",
                    image_shape[0]
                ),
            ));
        }
        if config.widths.len() != 3 || config.widths.contains(&0) {
            return Err(Error::config(
                "model.cnn.widths",
                "expected three positive stage widths",
            ));
        }
        let out_channels = *config.widths.last().expect("three widths");
        let mut streams = Vec::new();
        for (s, &cin) in config.stream_channels.iter().enumerate() {
            let mut stages = Vec::new();
            let mut c = cin;
            for (i, &w) in config.widths.iter().enumerate() {
                stages.push(Conv2d::new(
                    store,
                    &format!("streams.{s}.conv{i}"),
                    c,
                    w,
                    3,
                    2,
                    1,
                    rng,
                ));
                c = w;
            }
            let gate = if use_hag {
                Some(HardAttentionGate::init(
                    store,
                    format!("streams.{s}.gate"),
                    out_channels,
                    GateMode::Channel,
                    gate_rng.gen(),
                )?)
            } else {
                None
            };
            streams.push(Stream {
                in_channels: cin,
                stages,
                gate,
            });
        }
        let head = Linear::new(store, "head", out_channels * streams.len(), out_dim, rng);
        Ok(Self {
            config: config.clone(),
            streams,
            head,
        })
    }

    /// Gated, concatenated stream features `[B, ΣC, H', W']`.
    pub fn fused_features<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        images: &Array,
    ) -> Result<Var<'g>> {
        let x = g.constant(images.clone());
        let mut outs = Vec::with_capacity(self.streams.len());
        let mut offset = 0;
        for stream in &self.streams {
            let part = x.slice(1, offset, stream.in_channels)?;
            offset += stream.in_channels;
            outs.push(stream.forward(g, store, &part)?);
        }
        let gates: Vec<Option<&HardAttentionGate>> =
            self.streams.iter().map(|s| s.gate.as_ref()).collect();
        multistream_fuse(g, store, &outs, &gates)
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, images: &Array) -> Result<Var<'g>> {
        let pooled = self.fused_features(g, store, images)?.mean(&[2, 3])?;
        self.head.forward(g, store, &pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;

    fn feature(g: &Graph, shape: Vec<usize>, v: f64) -> Var<'_> {
        g.constant(Array::full(shape, v))
    }

    #[test]
    fn half_open_gates_scale_each_stream() {
        let (mut store, g1) = HardAttentionGate::standalone(2, GateMode::Channel, 0).unwrap();
        let g2 = HardAttentionGate::init(&mut store, "g2", 2, GateMode::Channel, 1).unwrap();
        for gate in [&g1, &g2] {
            *store.value_mut(gate.param()) = Array::zeros(vec![2]);
        }
        let g = Graph::new();
        let s = feature(&g, vec![1, 2, 2, 2], 3.0);
        let fused = multistream_fuse(&g, &store, &[s, s], &[Some(&g1), Some(&g2)]).unwrap();
        assert_eq!(fused.shape(), vec![1, 4, 2, 2]);
        assert!(fused.value().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_ungated_stream_is_identity() {
        let store = ParamStore::new();
        let g = Graph::new();
        let s = g.constant(Array::new(vec![1, 1, 1, 2], vec![1.0, -2.0]).unwrap());
        let fused = multistream_fuse(&g, &store, &[s], &[None]).unwrap();
        assert_eq!(fused.value().data(), &[1.0, -2.0]);
    }

    #[test]
    fn closed_gate_silences_its_stream() {
        let (mut store, gate) = HardAttentionGate::standalone(1, GateMode::Channel, 0).unwrap();
        *store.value_mut(gate.param()) = Array::vector(&[-40.0]);
        let g = Graph::new();
        let a = feature(&g, vec![1, 1, 2, 2], 2.0);
        let b = feature(&g, vec![1, 1, 2, 2], 5.0);
        let fused = multistream_fuse(&g, &store, &[a, b], &[None, Some(&gate)]).unwrap();
        let v = fused.value();
        assert!(v.data()[..4].iter().all(|&x| x == 2.0));
        assert!(v.data()[4..].iter().all(|&x| x.abs() < 1e-16));
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let store = ParamStore::new();
        let g = Graph::new();
        let a = feature(&g, vec![1, 1, 2, 2], 1.0);
        let b = feature(&g, vec![1, 1, 3, 3], 1.0);
        assert!(multistream_fuse(&g, &store, &[a, b], &[None, None]).is_err());
    }

    #[test]
    fn builds_with_expected_output_shape() {
        let mut store = ParamStore::new();
        let cfg = CnnConfig::default();
        let model = MultiStreamCnn::new(
            &mut store,
            &cfg,
            [4, 16, 16],
            3,
            true,
            &mut init::rng(0),
            &mut init::rng(1),
        )
        .unwrap();
        let g = Graph::new();
        let img = Array::full(vec![2, 4, 16, 16], 0.1);
        assert_eq!(model.fused_features(&g, &store, &img).unwrap().shape(), vec![2, 16, 2, 2]);
        assert_eq!(model.forward(&g, &store, &img).unwrap().shape(), vec![2, 3]);
    }

    #[test]
    fn channel_split_must_cover_input() {
        let mut store = ParamStore::new();
        let err = MultiStreamCnn::new(
            &mut store,
            &CnnConfig::default(),
            [3, 8, 8],
            1,
            false,
            &mut init::rng(0),
            &mut init::rng(1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("stream_channels"));
    }
}
