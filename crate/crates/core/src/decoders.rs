//! Second-pass decoders over the pooled encoding: the CTC decoder with fuzzy
//! length prediction, the one-shot Mask-Predict baseline and the
//! autoregressive baseline.

use std::cell::Cell;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{greedy_decode, CtcOutput};
use crate::error::{Error, Result};
use crate::nn::{AttnMask, DecoderBlock, Embedding, LayerNorm, Linear};
use crate::tensor::{argmax, Graph, ParamStore, Tensor, Var};
use crate::vocab::{TokenId, Vocab, BLANK, BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    Ctc,
    MaskPredict,
    Autoregressive,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 3] = [DecoderMode::Ctc, DecoderMode::MaskPredict, DecoderMode::Autoregressive];

    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderMode::Ctc => "ctc",
            DecoderMode::MaskPredict => "mask-predict",
            DecoderMode::Autoregressive => "autoregressive",
        }
    }

    /// Whether the mode has a length module.
    pub fn predicts_length(&self) -> bool {
        !matches!(self, DecoderMode::Autoregressive)
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(DecoderMode::Ctc),
            "mask-predict" | "mask_predict" | "mp" => Ok(DecoderMode::MaskPredict),
            "autoregressive" | "ar" => Ok(DecoderMode::Autoregressive),
            _ => Err(Error::config("mode", format!("unknown decoder mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub mode: DecoderMode,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Fuzzy length multiplier; CTC mode only.
    pub alpha: f64,
    /// Largest length class.
    pub max_len: usize,
    pub attn_dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            mode: DecoderMode::Ctc,
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            alpha: 2.0,
            max_len: 64,
            attn_dropout: 0.1784,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config("decoder.num_heads", "must divide decoder.hidden_dim"));
        }
        if self.mode == DecoderMode::Ctc && !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::config("decoder.alpha", format!("{} must be > 1 in ctc mode", self.alpha)));
        }
        if self.max_len == 0 {
            return Err(Error::config("decoder.max_len", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::config("decoder.attn_dropout", "outside [0, 1)"));
        }
        Ok(())
    }

    /// Number of positions the decoder can address.
    pub fn position_capacity(&self) -> usize {
        match self.mode {
            DecoderMode::Ctc => self.max_len * self.alpha.ceil() as usize,
            DecoderMode::MaskPredict => self.max_len,
            DecoderMode::Autoregressive => self.max_len + 1,
        }
    }
}

/// `ceil(alpha · predicted)`, clamped to `[1, max_len · ceil(alpha)]`.
pub fn fuzzy_length(alpha: f64, predicted: usize, max_len: usize) -> usize {
    // The epsilon keeps exact products such as 1.1 × 10 from rounding up past 11.
    let l = (alpha * predicted as f64 - 1e-9).ceil().max(1.0) as usize;
    l.min(max_len * alpha.ceil() as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthPrediction {
    /// Log-probabilities of lengths `1..=max_len`, class `c` meaning length `c + 1`.
    pub class_log_probs: Tensor,
    pub predicted: usize,
    /// Decoder positions to run.
    pub fuzzy_len: usize,
}

impl LengthPrediction {
    /// A prediction pinned to `predicted`, as used by the latency benchmark.
    pub fn pinned(predicted: usize, alpha: Option<f64>, max_len: usize) -> Self {
        let mut lp = Tensor::full(&[max_len], f64::NEG_INFINITY);
        let predicted = predicted.clamp(1, max_len);
        lp.data_mut()[predicted - 1] = 0.0;
        LengthPrediction {
            class_log_probs: lp,
            predicted,
            fuzzy_len: alpha.map_or(predicted, |a| fuzzy_length(a, predicted, max_len)),
        }
    }
}

/// Length class index for a target length.
pub fn length_class(len: usize, max_len: usize) -> usize {
    len.clamp(1, max_len) - 1
}

/// Mean-pools the valid rows of `memory` and classifies the length.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LengthModule {
    proj: Linear,
    max_len: usize,
}

impl LengthModule {
    pub fn new<R: Rng>(ps: &mut ParamStore, hidden: usize, max_len: usize, rng: &mut R) -> Result<Self> {
        Ok(LengthModule {
            proj: Linear::new(ps, "length.proj", hidden, max_len, rng)?,
            max_len,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `1×max_len` log-probabilities.
    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, memory: Var<'g>, valid: usize) -> Result<Var<'g>> {
        let rows = memory.shape()[0];
        let mut w = Tensor::zeros(&[1, rows]);
        w.data_mut()[..valid].fill(1.0 / valid as f64);
        let pooled = g.constant(w).matmul(&memory)?;
        Ok(self.proj.forward(g, ps, pooled)?.log_softmax())
    }

    pub fn predict(&self, log_probs: &Tensor, alpha: Option<f64>) -> LengthPrediction {
        let predicted = argmax(log_probs.data()) + 1;
        LengthPrediction {
            class_log_probs: Tensor::vector(log_probs.data().to_vec()),
            predicted,
            fuzzy_len: alpha.map_or(predicted, |a| fuzzy_length(a, predicted, self.max_len)),
        }
    }
}

/// Non-autoregressive decoder: `l` copies of a learned mask embedding plus
/// positions, decoded in one pass against the encoder memory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParallelDecoder {
    mask: Embedding,
    pos: Embedding,
    blocks: Vec<DecoderBlock>,
    final_ln: LayerNorm,
    out: Linear,
    attn_dropout: f64,
}

impl ParallelDecoder {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: &DecoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(ParallelDecoder {
            mask: Embedding::new(ps, "decoder.mask", 1, d, rng)?,
            pos: Embedding::new(ps, "decoder.pos", cfg.position_capacity(), d, rng)?,
            blocks: (0..cfg.num_layers)
                .map(|i| DecoderBlock::new(ps, &format!("decoder.layer{i}"), d, cfg.num_heads, cfg.ffn_dim, rng))
                .collect::<Result<Vec<_>>>()?,
            final_ln: LayerNorm::new(ps, "decoder.final_ln", d)?,
            out: Linear::new(ps, "decoder.out", d, vocab_size, rng)?,
            attn_dropout: cfg.attn_dropout,
        })
    }

    pub fn capacity(&self, ps: &ParamStore) -> usize {
        self.pos.capacity(ps)
    }

    /// `l×V` logits.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        memory: Var<'g>,
        valid: usize,
        l: usize,
    ) -> Result<Var<'g>> {
        let cap = self.capacity(ps);
        if l == 0 || l > cap {
            return Err(Error::usage(format!("decoder length {l} outside 1..={cap}")));
        }
        let ids: Vec<usize> = (0..l).collect();
        let mut x = self.mask.forward(g, ps, &vec![0; l])?.add(&self.pos.forward(g, ps, &ids)?)?;
        for b in &self.blocks {
            x = b.forward(g, ps, x, memory, AttnMask::NONE, AttnMask::padding(valid), self.attn_dropout)?;
        }
        let x = self.final_ln.forward(g, ps, x)?;
        self.out.forward(g, ps, x)
    }
}

/// Left-to-right decoder, fed `[BOS, y₁ … yₖ]` under a causal mask.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutoregressiveDecoder {
    tok: Embedding,
    pos: Embedding,
    blocks: Vec<DecoderBlock>,
    final_ln: LayerNorm,
    out: Linear,
    attn_dropout: f64,
}

impl AutoregressiveDecoder {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: &DecoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(AutoregressiveDecoder {
            tok: Embedding::new(ps, "decoder.tok", vocab_size, d, rng)?,
            pos: Embedding::new(ps, "decoder.pos", cfg.position_capacity(), d, rng)?,
            blocks: (0..cfg.num_layers)
                .map(|i| DecoderBlock::new(ps, &format!("decoder.layer{i}"), d, cfg.num_heads, cfg.ffn_dim, rng))
                .collect::<Result<Vec<_>>>()?,
            final_ln: LayerNorm::new(ps, "decoder.final_ln", d)?,
            out: Linear::new(ps, "decoder.out", d, vocab_size, rng)?,
            attn_dropout: cfg.attn_dropout,
        })
    }

    pub fn capacity(&self, ps: &ParamStore) -> usize {
        self.pos.capacity(ps)
    }

    /// Logits for every prefix position, `k×V` for a `k`-token input.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        memory: Var<'g>,
        valid: usize,
        input: &[TokenId],
    ) -> Result<Var<'g>> {
        let cap = self.capacity(ps);
        if input.is_empty() || input.len() > cap {
            return Err(Error::usage(format!("decoder input of {} tokens outside 1..={cap}", input.len())));
        }
        let ids: Vec<usize> = (0..input.len()).collect();
        let mut x = self.tok.forward(g, ps, input)?.add(&self.pos.forward(g, ps, &ids)?)?;
        for b in &self.blocks {
            x = b.forward(g, ps, x, memory, AttnMask::causal(), AttnMask::padding(valid), self.attn_dropout)?;
        }
        let x = self.final_ln.forward(g, ps, x)?;
        self.out.forward(g, ps, x)
    }
}

/// CTC decode: `lp.fuzzy_len` parallel positions, greedy argmax, collapse.
pub fn decode_ctc(
    dec: &ParallelDecoder,
    ps: &ParamStore,
    memory: &Tensor,
    valid: usize,
    lp: &LengthPrediction,
) -> Result<CtcOutput> {
    let cap = dec.capacity(ps);
    let mut l = lp.fuzzy_len.max(1);
    if l > cap {
        log::warn!("fuzzy length {l} exceeds decoder capacity {cap}; capping");
        l = cap;
    }
    let g = Graph::new();
    let logits = dec.forward(&g, ps, g.constant(memory.clone()), valid, l)?;
    greedy_decode(&logits.value(), BLANK)
}

/// Mask-Predict decode: exactly `lp.predicted` tokens, argmax over non-special ids.
pub fn decode_mask_predict(
    dec: &ParallelDecoder,
    ps: &ParamStore,
    memory: &Tensor,
    valid: usize,
    lp: &LengthPrediction,
) -> Result<Vec<TokenId>> {
    let n = lp.predicted.clamp(1, dec.capacity(ps));
    let g = Graph::new();
    let logits = dec.forward(&g, ps, g.constant(memory.clone()), valid, n)?.value();
    Ok((0..n)
        .map(|t| {
            let row = logits.row(t);
            (0..row.len())
                .filter(|&v| !Vocab::is_special(v))
                .fold(None, |best: Option<usize>, v| match best {
                    Some(b) if row[b] >= row[v] => Some(b),
                    _ => Some(v),
                })
                .unwrap_or(0)
        })
        .collect())
}

/// Greedy autoregressive decoding with one full decoder forward per step.
///
/// Stops on `EOS` or after `max_len` tokens. With `force = Some(n)` the
/// end-of-sequence symbol is suppressed for the first `n` steps and forced at
/// step `n + 1`, giving exactly `n` tokens from `n + 1` forwards.
/// `invocations` counts decoder forwards.
pub fn decode_autoregressive(
    dec: &AutoregressiveDecoder,
    ps: &ParamStore,
    memory: &Tensor,
    valid: usize,
    max_len: usize,
    force: Option<usize>,
    invocations: &Cell<usize>,
) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return Err(Error::usage("max_len must be ≥ 1"));
    }
    let limit = force.unwrap_or(max_len).min(dec.capacity(ps) - 1);
    let mut seq = vec![BOS];
    loop {
        let g = Graph::new();
        let logits = dec.forward(&g, ps, g.constant(memory.clone()), valid, &seq)?.value();
        invocations.set(invocations.get() + 1);
        let step = seq.len() - 1;
        if force.is_some() && step >= limit {
            break;
        }
        let row = logits.row(seq.len() - 1);
        let next = if force.is_some() {
            (0..row.len())
                .filter(|&v| v != EOS)
                .fold(BLANK, |b, v| if row[v] > row[b] { v } else { b })
        } else {
            argmax(row)
        };
        if next == EOS && force.is_none() {
            break;
        }
        seq.push(next);
        if force.is_none() && seq.len() > limit {
            break;
        }
    }
    Ok(seq[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: DecoderMode) -> DecoderConfig {
        DecoderConfig {
            mode,
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            alpha: 2.0,
            max_len: 16,
            attn_dropout: 0.0,
        }
    }

    #[test]
    fn fuzzy_length_examples() {
        assert_eq!(fuzzy_length(2.0, 7, 64), 14);
        assert_eq!(fuzzy_length(2.0, 1, 64), 2);
        assert_eq!(fuzzy_length(1.3, 5, 64), 7);
        assert_eq!(fuzzy_length(1.1, 10, 64), 11);
        assert_eq!(fuzzy_length(4.0, 64, 64), 256);
        assert_eq!(fuzzy_length(1.5, 64, 64), 96);
    }

    #[test]
    fn alpha_must_exceed_one_for_ctc() {
        let mut c = cfg(DecoderMode::Ctc);
        c.alpha = 1.0;
        assert!(c.validate().is_err());
        c.mode = DecoderMode::MaskPredict;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn untrained_decoders_honor_length_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let memory = Tensor::uniform(&[4, 8], 1.0, &mut rng);
        let mut ps = ParamStore::new();
        let c = cfg(DecoderMode::Ctc);
        let dec = ParallelDecoder::new(&mut ps, &c, 12, &mut rng).unwrap();
        let lp = LengthPrediction::pinned(5, Some(2.0), 16);
        let out = decode_ctc(&dec, &ps, &memory, 4, &lp).unwrap();
        assert_eq!(out.raw_tokens.len(), 10);
        assert!(out.collapsed.len() <= 10 && !out.collapsed.contains(&BLANK));
        assert_eq!(out.collapsed, decode_ctc(&dec, &ps, &memory, 4, &lp).unwrap().collapsed);

        let mp = decode_mask_predict(&dec, &ps, &memory, 4, &LengthPrediction::pinned(3, None, 16)).unwrap();
        assert_eq!(mp.len(), 3);
        assert!(mp.iter().all(|&t| !Vocab::is_special(t)));
    }

    #[test]
    fn forced_autoregressive_length_costs_n_plus_one_forwards() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let memory = Tensor::uniform(&[3, 8], 1.0, &mut rng);
        let mut ps = ParamStore::new();
        let dec = AutoregressiveDecoder::new(&mut ps, &cfg(DecoderMode::Autoregressive), 12, &mut rng).unwrap();
        for n in [1, 4, 9] {
            let calls = Cell::new(0);
            let out = decode_autoregressive(&dec, &ps, &memory, 3, 16, Some(n), &calls).unwrap();
            assert_eq!(out.len(), n);
            assert_eq!(calls.get(), n + 1);
        }
        let calls = Cell::new(0);
        let free = decode_autoregressive(&dec, &ps, &memory, 3, 5, None, &calls).unwrap();
        assert!(free.len() <= 5);
    }

    #[test]
    fn eos_favoring_model_emits_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let memory = Tensor::uniform(&[2, 8], 1.0, &mut rng);
        let mut ps = ParamStore::new();
        let c = cfg(DecoderMode::Autoregressive);
        let dec = AutoregressiveDecoder::new(&mut ps, &c, 6, &mut rng).unwrap();
        let out_b = ps.id("decoder.out.b").unwrap();
        ps.value_mut(out_b).data_mut()[EOS] = 1e3;
        let calls = Cell::new(0);
        assert!(decode_autoregressive(&dec, &ps, &memory, 2, 10, None, &calls).unwrap().is_empty());
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn length_module_pools_only_valid_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamStore::new();
        let lm = LengthModule::new(&mut ps, 8, 16, &mut rng).unwrap();
        let mem = Tensor::uniform(&[3, 8], 1.0, &mut rng);
        let mut padded = mem.data().to_vec();
        padded.extend((0..16).map(|i| i as f64));
        let padded = Tensor::new(vec![5, 8], padded).unwrap();
        let g = Graph::new();
        let a = lm.forward(&g, &ps, g.constant(mem), 3).unwrap().value();
        let b = lm.forward(&g, &ps, g.constant(padded), 3).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let p = lm.predict(&a, Some(2.0));
        assert!((1..=16).contains(&p.predicted) && p.fuzzy_len >= p.predicted);
    }
}
