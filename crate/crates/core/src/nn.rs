//! Transformer building blocks over the autodiff [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Additive mask value for disallowed attention scores. exp() of it underflows to exactly 0.
const MASKED: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Std of the normal initializer used for embedding tables.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    /// Weight `[in×out]` drawn from `uniform(±1/√in)`, zero bias.
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = ps.add(format!("{name}.w"), Tensor::uniform(&[inp, out], bound, rng))?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(&g.param(ps, self.w))?.add_row(&g.param(ps, self.b))
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(&g.param(ps, self.gain), &g.param(ps, self.bias), LAYER_NORM_EPS)
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let table = ps.add(name, Tensor::normal(&[rows, dim], EMBED_INIT_STD, rng))?;
        Ok(Embedding { table })
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, ids: &[usize]) -> Result<Var<'g>> {
        g.param(ps, self.table).gather_rows(ids)
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn capacity(&self, ps: &ParamStore) -> usize {
        ps.value(self.table).shape()[0]
    }
}

/// Which key positions each query may attend to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttnMask {
    /// Keys at or beyond this index are padding.
    pub key_valid: Option<usize>,
    /// Query `i` sees keys `0..=i` only.
    pub causal: bool,
}

impl AttnMask {
    pub const NONE: AttnMask = AttnMask {
        key_valid: None,
        causal: false,
    };

    pub fn padding(valid: usize) -> Self {
        AttnMask {
            key_valid: Some(valid),
            causal: false,
        }
    }

    pub fn causal() -> Self {
        AttnMask {
            key_valid: None,
            causal: true,
        }
    }

    fn is_none(&self) -> bool {
        self.key_valid.is_none() && !self.causal
    }

    fn build(&self, nq: usize, nk: usize) -> Tensor {
        let valid = self.key_valid.unwrap_or(nk);
        let mut m = Tensor::zeros(&[nq, nk]);
        let data = m.data_mut();
        for i in 0..nq {
            for j in 0..nk {
                if j >= valid || (self.causal && j > i) {
                    data[i * nk + j] = MASKED;
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config("num_heads", format!("{dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// Scaled dot-product attention of `query` rows over `kv` rows.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        query: Var<'g>,
        kv: Var<'g>,
        mask: AttnMask,
        dropout: f64,
    ) -> Result<Var<'g>> {
        let (qs, ks) = (query.shape(), kv.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.dim || ks[1] != self.dim {
            return Err(Error::dim("attention", &qs, &ks));
        }
        let q = self.q.forward(g, ps, query)?;
        let k = self.k.forward(g, ps, kv)?;
        let v = self.v.forward(g, ps, kv)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask_t = (!mask.is_none()).then(|| mask.build(qs[0], ks[0]));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let mut scores = qh.matmul_t(&kh)?.scale(scale);
            if let Some(m) = &mask_t {
                scores = scores.add_const(m)?;
            }
            let probs = scores.softmax(1)?.dropout(dropout)?;
            outs.push(probs.matmul(&vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, ps, joined)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.up.forward(g, ps, x)?.relu();
        self.down.forward(g, ps, h)
    }
}

/// Pre-norm self-attention block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), dim)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, ffn_dim, rng)?,
        })
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        x: Var<'g>,
        mask: AttnMask,
        dropout: f64,
    ) -> Result<Var<'g>> {
        let h = self.ln_attn.forward(g, ps, x)?;
        let a = self.attn.forward(g, ps, h, h, mask, 0.0)?.dropout(dropout)?;
        let x = x.add(&a)?;
        let h = self.ln_ffn.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, h)?.dropout(dropout)?;
        x.add(&f)
    }
}

/// Pre-norm decoder block: self-attention, cross-attention to a memory, feed-forward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderBlock {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), dim)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, rng)?,
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), dim)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, heads, rng)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), dim)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, ffn_dim, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        x: Var<'g>,
        memory: Var<'g>,
        self_mask: AttnMask,
        memory_mask: AttnMask,
        attn_dropout: f64,
    ) -> Result<Var<'g>> {
        let h = self.ln_self.forward(g, ps, x)?;
        let x = x.add(&self.self_attn.forward(g, ps, h, h, self_mask, attn_dropout)?)?;
        let h = self.ln_cross.forward(g, ps, x)?;
        let x = x.add(&self.cross_attn.forward(g, ps, h, memory, memory_mask, attn_dropout)?)?;
        let h = self.ln_ffn.forward(g, ps, x)?;
        x.add(&self.ffn.forward(g, ps, h)?)
    }
}
