//! Second-pass deliberation encoder.
//!
//! ```text
//! emb_attn  = MHA(emb_text, emb_aud, emb_aud)
//! emb_stack = [emb_text | emb_attn]
//! emb_fused = Linear(emb_stack)
//! emb_pool  = Transformer(emb_fused)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FirstPassOutput;
use crate::error::{Error, Result};
use crate::nn::{AttnMask, Embedding, EncoderBlock, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_pool_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Capacity of the learned positional tables of both channels.
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 32,
            num_pool_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            dropout: 0.1697,
            max_positions: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "encoder.num_heads",
                format!("hidden_dim {} is not divisible by {} heads", self.hidden_dim, self.num_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if self.max_positions == 0 {
            return Err(Error::config("encoder.max_positions", "must be positive"));
        }
        Ok(())
    }
}

/// Fused encoder output shared by the length module and every decoder.
#[derive(Clone, Copy, Debug)]
pub struct PooledEncoding<'g> {
    /// `T×D'`
    pub emb_pool: Var<'g>,
    /// `T×D'` cross-attention read of the audio channel.
    pub emb_attn: Var<'g>,
    /// Rows before this index are real text positions.
    pub valid: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionEncoder {
    text_adapter: Option<Linear>,
    audio_adapter: Option<Linear>,
    text_pos: Embedding,
    audio_pos: Embedding,
    cross: MultiHeadAttention,
    fuse: Linear,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
    dropout: f64,
}

impl FusionEncoder {
    /// `input_dim` is the first-pass width `D`; a per-channel linear adapter
    /// is inserted when it differs from the hidden width.
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: &EncoderConfig, input_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let (text_adapter, audio_adapter) = if input_dim == d {
            (None, None)
        } else {
            (
                Some(Linear::new(ps, "fusion.text_adapter", input_dim, d, rng)?),
                Some(Linear::new(ps, "fusion.audio_adapter", input_dim, d, rng)?),
            )
        };
        let text_pos = Embedding::new(ps, "fusion.text_pos", cfg.max_positions, d, rng)?;
        let audio_pos = Embedding::new(ps, "fusion.audio_pos", cfg.max_positions, d, rng)?;
        let cross = MultiHeadAttention::new(ps, "fusion.cross", d, cfg.num_heads, rng)?;
        let fuse = Linear::new(ps, "fusion.fuse", 2 * d, d, rng)?;
        let blocks = (0..cfg.num_pool_layers)
            .map(|i| EncoderBlock::new(ps, &format!("fusion.pool{i}"), d, cfg.num_heads, cfg.ffn_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(ps, "fusion.final_ln", d)?;
        Ok(FusionEncoder {
            text_adapter,
            audio_adapter,
            text_pos,
            audio_pos,
            cross,
            fuse,
            blocks,
            final_ln,
            dropout: cfg.dropout,
        })
    }

    pub fn fuse_linear(&self) -> &Linear {
        &self.fuse
    }

    fn channel<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        x: Var<'g>,
        adapter: &Option<Linear>,
        pos: &Embedding,
    ) -> Result<Var<'g>> {
        let x = match adapter {
            Some(a) => a.forward(g, ps, x)?,
            None => x,
        };
        let n = x.shape()[0];
        let cap = pos.capacity(ps);
        if n > cap {
            return Err(Error::usage(format!("sequence of {n} positions exceeds positional capacity {cap}")));
        }
        let ids: Vec<usize> = (0..n).collect();
        x.add(&pos.forward(g, ps, &ids)?)
    }

    pub fn fuse<'g>(&self, g: &'g Graph, ps: &ParamStore, fp: &FirstPassOutput<'g>) -> Result<PooledEncoding<'g>> {
        let (ts, as_) = (fp.emb_text.shape(), fp.emb_aud.shape());
        if ts.len() != 2 || as_.len() != 2 || ts[1] != as_[1] {
            return Err(Error::dim("fuse", &ts, &as_));
        }
        if ts[0] == 0 || as_[0] == 0 || fp.text_valid == 0 || fp.text_valid > ts[0] {
            return Err(Error::usage("fuse needs T ≥ 1, A ≥ 1 and 1 ≤ text_valid ≤ T"));
        }
        let text = self.channel(g, ps, fp.emb_text, &self.text_adapter, &self.text_pos)?;
        let audio = self.channel(g, ps, fp.emb_aud, &self.audio_adapter, &self.audio_pos)?;
        let emb_attn = self.cross.forward(g, ps, text, audio, AttnMask::NONE, 0.0)?;
        let stacked = g.concat_cols(&[text, emb_attn])?;
        let mut x = self.fuse.forward(g, ps, stacked)?.dropout(self.dropout)?;
        let mask = AttnMask::padding(fp.text_valid);
        for b in &self.blocks {
            x = b.forward(g, ps, x, mask, self.dropout)?;
        }
        let emb_pool = self.final_ln.forward(g, ps, x)?;
        Ok(PooledEncoding {
            emb_pool,
            emb_attn,
            valid: fp.text_valid,
        })
    }
}
