use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};

/// Multi-head self-attention: per head softmax(QKᵀ/√d)·V, heads
/// concatenated and passed through an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::config(
                "model.vit.heads",
                format!("embed {embed} is not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), embed, embed, rng),
            key: Linear::new(store, &format!("{name}.key"), embed, embed, rng),
            value: Linear::new(store, &format!("{name}.value"), embed, embed, rng),
            out: Linear::new(store, &format!("{name}.out"), embed, embed, rng),
            heads,
            head_dim: embed / heads,
        })
    }

    /// `tokens` is `[T, e]` or `[B, T, e]`; the output has the same shape.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        tokens: &Var<'g>,
    ) -> Result<Var<'g>> {
        let shape = tokens.shape();
        let (b, t, e) = match shape.as_slice() {
            [t, e] => (1, *t, *e),
            [b, t, e] => (*b, *t, *e),
            _ => {
                return Err(Error::InvalidShape {
                    op: "attention",
                    msg: format!("expected [T, e] or [B, T, e], got {shape:?}"),
                })
            }
        };
        if e != self.heads * self.head_dim {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: vec![self.heads * self.head_dim],
            });
        }
        let x = tokens.reshape(&[b, t, e])?;
        let split = |v: Var<'g>| -> Result<Var<'g>> {
            v.reshape(&[b, t, self.heads, self.head_dim])?
                .permute(&[0, 2, 1, 3])
        };
        let q = split(self.query.forward(g, store, &x)?)?;
        let k = split(self.key.forward(g, store, &x)?)?;
        let v = split(self.value.forward(g, store, &x)?)?;
        let scores = q
            .matmul(&k.transpose()?)?
            .scale(1.0 / (self.head_dim as f64).sqrt());
        let weights = scores.softmax(3)?;
        let ctx = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, e])?;
        self.out.forward(g, store, &ctx)?.reshape(&shape)
    }
}
