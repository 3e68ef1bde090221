//! Gated pre-norm ViT blocks and a micro-scale ViT.
//!
//! Each block carries two gates: one on the attention branch and one on
//! the MLP branch. Gates multiply the branch output before the residual
//! addition, so a closed gate leaves the identity path intact:
//!
//! ```text
//! x ← x + gate_attn(MHSA(LN(x)))
//! x ← x + gate_mlp(MLP(LN(x)))
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::gate::{GateMode, HardAttentionGate};
use crate::init;
use crate::nn::attention::MultiHeadSelfAttention;
use crate::nn::layers::{LayerNorm, Linear};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Array, Graph, Var};

#[derive(Clone, Debug)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub gate_attn: Option<HardAttentionGate>,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub gate_mlp: Option<HardAttentionGate>,
}

impl VitBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        heads: usize,
        mlp_ratio: usize,
        gate_seeds: Option<(u64, u64)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), embed);
        let attn = MultiHeadSelfAttention::new(store, &format!("{name}.attn"), embed, heads, rng)?;
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), embed);
        let hidden = mlp_ratio * embed;
        let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), embed, hidden, rng);
        let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), hidden, embed, rng);
        let (gate_attn, gate_mlp) = match gate_seeds {
            Some((sa, sm)) => (
                Some(HardAttentionGate::init(
                    store,
                    format!("{name}.gate_attn"),
                    embed,
                    GateMode::Embedding,
                    sa,
                )?),
                Some(HardAttentionGate::init(
                    store,
                    format!("{name}.gate_mlp"),
                    embed,
                    GateMode::Embedding,
                    sm,
                )?),
            ),
            None => (None, None),
        };
        Ok(Self {
            norm1,
            attn,
            gate_attn,
            norm2,
            fc1,
            fc2,
            gate_mlp,
        })
    }

    /// One block over `[.., T, e]` tokens. With `use_hag` both gates must exist.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: &Var<'g>,
        use_hag: bool,
    ) -> Result<Var<'g>> {
        let gates = if use_hag {
            match (&self.gate_attn, &self.gate_mlp) {
                (Some(a), Some(m)) => Some((a, m)),
                _ => {
                    return Err(Error::config(
                        "model.use_hag",
                        "block was built without gates",
                    ))
                }
            }
        } else {
            None
        };

        let mut branch = self.attn.forward(g, store, &self.norm1.forward(g, store, x)?)?;
        if let Some((ga, _)) = gates {
            branch = ga.apply(g, store, &branch)?;
        }
        let x = x.add(&branch)?;

        let h = self.fc1.forward(g, store, &self.norm2.forward(g, store, &x)?)?.gelu();
        let mut branch = self.fc2.forward(g, store, &h)?;
        if let Some((_, gm)) = gates {
            branch = gm.apply(g, store, &branch)?;
        }
        x.add(&branch)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VitConfig {
    pub embed: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            embed: 16,
            heads: 2,
            depth: 2,
            patch: 2,
            mlp_ratio: 4,
        }
    }
}

/// Number of tokens, class token included, for an `h × w` image and patch `p`.
pub fn token_count(h: usize, w: usize, p: usize) -> usize {
    (h / p) * (w / p) + 1
}

/// Rearranges `[B, C, H, W]` images into `[B, T, C·p·p]` flattened
/// non-overlapping patches (row-major patch order, `(c, dy, dx)` within a patch).
pub fn patchify(images: &Array, p: usize) -> Result<Array> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "patchify",
            msg: format!("expected [B, C, H, W], got {s:?}"),
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidShape {
            op: "patchify",
            msg: format!("image {h}x{w} is not divisible by patch {p}"),
        });
    }
    let (ph, pw) = (h / p, w / p);
    let dim = c * p * p;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = py * p + dy;
                            let x = px * p + dx;
                            out.push(src[((bi * c + ci) * h + y) * w + x]);
                        }
                    }
                }
            }
        }
    }
    Array::new(vec![b, ph * pw, dim], out)
}

#[derive(Clone, Debug)]
pub struct MicroVit {
    pub config: VitConfig,
    pub image_shape: [usize; 3],
    pub patch_proj: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<VitBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub use_hag: bool,
}

impl MicroVit {
    pub fn new(
        store: &mut ParamStore,
        config: &VitConfig,
        image_shape: [usize; 3],
        out_dim: usize,
        use_hag: bool,
        rng: &mut impl Rng,
        gate_rng: &mut impl Rng,
    ) -> Result<Self> {
        let [c, h, w] = image_shape;
        let p = config.patch;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::config(
                "model.vit.patch",
                format!("image {h}x{w} is not divisible by patch {p}"),
            ));
        }
        if config.depth == 0 || config.embed == 0 {
            return Err(Error::config("model.vit", "embed and depth must be positive"));
        }
        let e = config.embed;
        let tokens = token_count(h, w, p);
        let patch_proj = Linear::new(store, "patch_embed", c * p * p, e, rng);
        let cls_token = store.add("cls_token", Group::Main, init::normal(rng, vec![1, e], 0.02));
        let pos_embed = store.add(
            "pos_embed",
            Group::Main,
            init::normal(rng, vec![tokens, e], 0.02),
        );
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let seeds = use_hag.then(|| (gate_rng.gen(), gate_rng.gen()));
            blocks.push(VitBlock::new(
                store,
                &format!("blocks.{i}"),
                e,
                config.heads,
                config.mlp_ratio,
                seeds,
                rng,
            )?);
        }
        let norm = LayerNorm::new(store, "norm", e);
        let head = Linear::new(store, "head", e, out_dim, rng);
        Ok(Self {
            config: config.clone(),
            image_shape,
            patch_proj,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
            use_hag,
        })
    }

    /// Projects `[B, C, H, W]` images to `[B, T, e]` patch tokens (no class
    /// token, no positions).
    pub fn patch_embed<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        images: &Array,
    ) -> Result<Var<'g>> {
        let patches = g.constant(patchify(images, self.config.patch)?);
        self.patch_proj.forward(g, store, &patches)
    }

    /// Token sequence after the blocks, `[B, T+1, e]`.
    pub fn encode<'g>(&self, g: &'g Graph, store: &ParamStore, images: &Array) -> Result<Var<'g>> {
        let tokens = self.patch_embed(g, store, images)?;
        let b = images.shape()[0];
        let e = self.config.embed;
        let cls = g
            .param(store, self.cls_token)
            .broadcast_to(&[b, 1, e])?;
        let mut x = g
            .concat(&[cls, tokens], 1)?
            .add(&g.param(store, self.pos_embed))?;
        for block in &self.blocks {
            x = block.forward(g, store, &x, self.use_hag)?;
        }
        Ok(x)
    }

    /// `[B, C, H, W]` images to `[B, out_dim]` outputs read from the class token.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, images: &Array) -> Result<Var<'g>> {
        let b = images.shape()[0];
        let x = self.encode(g, store, images)?;
        let cls = x.slice(1, 0, 1)?.reshape(&[b, self.config.embed])?;
        let cls = self.norm.forward(g, store, &cls)?;
        self.head.forward(g, store, &cls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(use_hag: bool, seed: u64) -> (ParamStore, VitBlock) {
        let mut store = ParamStore::new();
        let mut rng = init::rng(seed);
        let seeds = use_hag.then_some((1, 2));
        let b = VitBlock::new(&mut store, "b", 8, 2, 4, seeds, &mut rng).unwrap();
        (store, b)
    }

    fn set_gates(store: &mut ParamStore, b: &VitBlock, raw: f64) {
        for gate in [b.gate_attn.as_ref().unwrap(), b.gate_mlp.as_ref().unwrap()] {
            *store.value_mut(gate.param()) = Array::full(vec![gate.n()], raw);
        }
    }

    fn tokens() -> Array {
        let data = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        Array::new(vec![3, 8], data).unwrap()
    }

    fn max_diff(a: &Array, b: &Array) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn saturated_open_gates_match_ungated_block() {
        let (mut store, b) = block(true, 5);
        set_gates(&mut store, &b, 40.0);
        let g = Graph::new();
        let x = g.constant(tokens());
        let gated = b.forward(&g, &store, &x, true).unwrap().value();
        let plain = b.forward(&g, &store, &x, false).unwrap().value();
        assert!(max_diff(&gated, &plain) < 1e-12);
    }

    #[test]
    fn saturated_closed_gates_pass_input_through() {
        let (mut store, b) = block(true, 5);
        set_gates(&mut store, &b, -40.0);
        let g = Graph::new();
        let x = g.constant(tokens());
        let out = b.forward(&g, &store, &x, true).unwrap().value();
        assert!(max_diff(&out, &tokens()) < 1e-12);
    }

    #[test]
    fn half_open_gate_halves_the_attention_branch() {
        // With the MLP branch removed, the block is x + gate(MHSA(LN(x))).
        let (mut store, b) = block(true, 6);
        set_gates(&mut store, &b, 0.0);
        *store.value_mut(b.fc2.weight) = Array::zeros(vec![8, 32]);
        let g = Graph::new();
        let x = g.constant(tokens());
        let gated = b.forward(&g, &store, &x, true).unwrap().value();
        let plain = b.forward(&g, &store, &x, false).unwrap().value();
        for ((gv, pv), xv) in gated.data().iter().zip(plain.data()).zip(tokens().data()) {
            assert!(((gv - xv) - 0.5 * (pv - xv)).abs() < 1e-14);
        }
    }

    #[test]
    fn use_hag_without_gates_is_an_error() {
        let (store, b) = block(false, 1);
        let g = Graph::new();
        let x = g.constant(tokens());
        assert!(b.forward(&g, &store, &x, true).is_err());
    }

    #[test]
    fn patch_count_and_identity_projection() {
        let img = Array::zeros(vec![1, 3, 32, 32]);
        assert_eq!(patchify(&img, 4).unwrap().shape(), &[1, 64, 48]);
        assert_eq!(token_count(32, 32, 4), 65);

        let mut store = ParamStore::new();
        let mut rng = init::rng(0);
        let cfg = VitConfig {
            embed: 64,
            heads: 1,
            depth: 1,
            patch: 8,
            mlp_ratio: 1,
        };
        let vit = MicroVit::new(&mut store, &cfg, [1, 8, 8], 1, false, &mut rng, &mut init::rng(1))
            .unwrap();
        let mut eye = Array::zeros(vec![64, 64]);
        for i in 0..64 {
            eye.data_mut()[i * 64 + i] = 1.0;
        }
        *store.value_mut(vit.patch_proj.weight) = eye;
        let data: Vec<f64> = (0..64).map(|i| i as f64 * 0.5).collect();
        let image = Array::new(vec![1, 1, 8, 8], data.clone()).unwrap();
        let g = Graph::new();
        let tokens = vit.patch_embed(&g, &store, &image).unwrap().value();
        assert_eq!(tokens.shape(), &[1, 1, 64]);
        assert_eq!(tokens.data(), data.as_slice());

        let zero = Array::zeros(vec![1, 1, 8, 8]);
        let tokens = vit.patch_embed(&g, &store, &zero).unwrap().value();
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_must_divide_image() {
        let img = Array::zeros(vec![1, 1, 6, 6]);
        assert!(patchify(&img, 4).is_err());
    }
}
