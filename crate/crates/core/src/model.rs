//! The full second-pass model: simulated first pass, fusion encoder and one
//! decoder head, with its parameters and vocabulary.

use std::cell::Cell;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FirstPassConfig, FirstPassSim};
use crate::ctc::required_min_length;
use crate::decoders::{
    decode_autoregressive, decode_ctc, decode_mask_predict, fuzzy_length, length_class, AutoregressiveDecoder,
    DecoderConfig, DecoderMode, LengthModule, LengthPrediction, ParallelDecoder,
};
use crate::error::{Error, Result};
use crate::fusion::{EncoderConfig, FusionEncoder, PooledEncoding};
use crate::io::write_atomic;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::training::loss::{smoothed_ctc, smoothed_nll};
use crate::training::LossWeights;
use crate::vocab::{TokenId, Vocab, BLANK, BOS, EOS};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub first_pass: FirstPassConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn mode(&self) -> DecoderMode {
        self.decoder.mode
    }

    pub fn validate(&self) -> Result<()> {
        self.first_pass.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.hidden_dim != self.encoder.hidden_dim {
            return Err(Error::config(
                "decoder.hidden_dim",
                format!(
                    "{} differs from encoder.hidden_dim {}",
                    self.decoder.hidden_dim, self.encoder.hidden_dim
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Head {
    Parallel { length: LengthModule, dec: ParallelDecoder },
    Autoregressive(AutoregressiveDecoder),
}

/// Per-example loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub label: f64,
    pub length: f64,
    /// The CTC target could not be aligned in the available positions, so the
    /// label term was left out.
    pub label_skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<TokenId>,
    pub length: Option<LengthPrediction>,
    /// Per-position argmax before collapse (CTC only).
    pub raw: Option<Vec<TokenId>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vocab,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    first_pass: FirstPassSim,
    encoder: FusionEncoder,
    head: Head,
    params: ParamStore,
}

impl Model {
    /// Builds a freshly initialized model; parameter draws come from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let v = vocab.len();
        let first_pass = FirstPassSim::new(&mut ps, &config.first_pass, v, &mut rng)?;
        let encoder = FusionEncoder::new(&mut ps, &config.encoder, config.first_pass.dim, &mut rng)?;
        let d = &config.decoder;
        let head = match d.mode {
            DecoderMode::Ctc | DecoderMode::MaskPredict => Head::Parallel {
                length: LengthModule::new(&mut ps, d.hidden_dim, d.max_len, &mut rng)?,
                dec: ParallelDecoder::new(&mut ps, d, v, &mut rng)?,
            },
            DecoderMode::Autoregressive => Head::Autoregressive(AutoregressiveDecoder::new(&mut ps, d, v, &mut rng)?),
        };
        Ok(Model {
            config,
            vocab,
            first_pass,
            encoder,
            head,
            params: ps,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> DecoderMode {
        self.config.decoder.mode
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        check_layout(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    /// First pass plus fusion, recorded on `g`.
    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        hyp: &[String],
        gold: &[String],
        had_asr_error: bool,
    ) -> Result<PooledEncoding<'g>> {
        let fp = self.first_pass.embed(g, ps, &self.vocab, hyp, gold, had_asr_error, None)?;
        self.encoder.fuse(g, ps, &fp)
    }

    /// Joint training loss for one example over the parameters in `ps`.
    ///
    /// CTC mode runs `ceil(alpha · |target|)` decoder positions, Mask-Predict
    /// exactly `|target|`; both add `lambda` times the length loss. The
    /// autoregressive head is teacher-forced and has no length term.
    pub fn loss<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        hyp: &[String],
        gold: &[String],
        parse: &[String],
        w: &LossWeights,
    ) -> Result<LossTerms<'g>> {
        if parse.is_empty() {
            return Err(Error::usage("empty target parse"));
        }
        let target = self.vocab.encode(parse);
        let enc = self.encode(g, ps, hyp, gold, false)?;
        let eps = w.label_smoothing_eps;
        match &self.head {
            Head::Parallel { length, dec } => {
                let max_len = self.config.decoder.max_len;
                let n = target.len();
                let len_lp = length.forward(g, ps, enc.emb_pool, enc.valid)?;
                let len_loss = smoothed_nll(len_lp, &[length_class(n, max_len)], eps)?;
                let positions = match self.mode() {
                    DecoderMode::Ctc => fuzzy_length(self.config.decoder.alpha, n, max_len),
                    _ => n,
                };
                let feasible = positions <= dec.capacity(ps)
                    && (self.mode() != DecoderMode::Ctc || required_min_length(&target) <= positions);
                if !feasible {
                    let total = len_loss.scale(w.lambda);
                    return Ok(LossTerms {
                        total,
                        label: 0.0,
                        length: len_loss.item(),
                        label_skipped: true,
                    });
                }
                let lp = dec.forward(g, ps, enc.emb_pool, enc.valid, positions)?.log_softmax();
                let label = match self.mode() {
                    DecoderMode::Ctc => smoothed_ctc(lp, &target, BLANK, eps)?,
                    _ => smoothed_nll(lp, &target, eps)?,
                };
                let total = if w.lambda == 0.0 {
                    label
                } else {
                    label.add(&len_loss.scale(w.lambda))?
                };
                Ok(LossTerms {
                    total,
                    label: label.item(),
                    length: len_loss.item(),
                    label_skipped: false,
                })
            }
            Head::Autoregressive(dec) => {
                let mut input = Vec::with_capacity(target.len() + 1);
                input.push(BOS);
                input.extend_from_slice(&target);
                let mut output = target.clone();
                output.push(EOS);
                let lp = dec.forward(g, ps, enc.emb_pool, enc.valid, &input)?.log_softmax();
                let label = smoothed_nll(lp, &output, eps)?;
                Ok(LossTerms {
                    total: label,
                    label: label.item(),
                    length: 0.0,
                    label_skipped: false,
                })
            }
        }
    }

    /// Pooled encoding as a plain tensor plus its valid row count.
    pub fn encode_memory(&self, hyp: &[String], gold: &[String]) -> Result<(Tensor, usize)> {
        let g = Graph::new();
        let enc = self.encode(&g, &self.params, hyp, gold, false)?;
        Ok((enc.emb_pool.value().as_ref().clone(), enc.valid))
    }

    pub fn predict_length(&self, memory: &Tensor, valid: usize) -> Result<Option<LengthPrediction>> {
        match &self.head {
            Head::Parallel { length, .. } => {
                let g = Graph::new();
                let lp = length.forward(&g, &self.params, g.constant(memory.clone()), valid)?.value();
                let alpha = (self.mode() == DecoderMode::Ctc).then_some(self.config.decoder.alpha);
                Ok(Some(length.predict(&lp, alpha)))
            }
            Head::Autoregressive(_) => Ok(None),
        }
    }

    /// Decodes from a pooled encoding. `lp` overrides the length module.
    pub fn decode_memory(&self, memory: &Tensor, valid: usize, lp: Option<&LengthPrediction>) -> Result<Prediction> {
        let ps = &self.params;
        match &self.head {
            Head::Parallel { dec, .. } => {
                let lp = match lp {
                    Some(l) => l.clone(),
                    None => self.predict_length(memory, valid)?.expect("parallel head has a length module"),
                };
                if self.mode() == DecoderMode::Ctc {
                    let out = decode_ctc(dec, ps, memory, valid, &lp)?;
                    Ok(Prediction {
                        tokens: out.collapsed,
                        length: Some(lp),
                        raw: Some(out.raw_tokens),
                    })
                } else {
                    Ok(Prediction {
                        tokens: decode_mask_predict(dec, ps, memory, valid, &lp)?,
                        length: Some(lp),
                        raw: None,
                    })
                }
            }
            Head::Autoregressive(dec) => {
                let calls = Cell::new(0);
                let max_len = self.config.decoder.max_len;
                Ok(Prediction {
                    tokens: decode_autoregressive(dec, ps, memory, valid, max_len, None, &calls)?,
                    length: None,
                    raw: None,
                })
            }
        }
    }

    /// Decodes exactly as at inference, but with the output length forced to
    /// `n`: pinned length prediction for the parallel heads, suppressed
    /// end-of-sequence for the autoregressive head. Returns the tokens and the
    /// number of decoder forwards.
    pub fn decode_forced(&self, memory: &Tensor, valid: usize, n: usize) -> Result<(Vec<TokenId>, usize)> {
        let max_len = self.config.decoder.max_len;
        match &self.head {
            Head::Parallel { .. } => {
                let alpha = (self.mode() == DecoderMode::Ctc).then_some(self.config.decoder.alpha);
                let lp = LengthPrediction::pinned(n, alpha, max_len);
                Ok((self.decode_memory(memory, valid, Some(&lp))?.tokens, 1))
            }
            Head::Autoregressive(dec) => {
                let calls = Cell::new(0);
                let out = decode_autoregressive(dec, &self.params, memory, valid, max_len, Some(n), &calls)?;
                Ok((out, calls.get()))
            }
        }
    }

    pub fn predict(&self, hyp: &[String], gold: &[String]) -> Result<Prediction> {
        let (memory, valid) = self.encode_memory(hyp, gold)?;
        self.decode_memory(&memory, valid, None)
    }

    /// Predicted parse as words.
    pub fn parse(&self, hyp: &[String], gold: &[String]) -> Result<Vec<String>> {
        Ok(self.vocab.decode(&self.predict(hyp, gold)?.tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::new();
        self.params.write(BufWriter::new(&mut buf), &meta)?;
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = ParamStore::read(BufReader::new(File::open(path)?))?;
        let meta: Meta =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let mut model = Model::new(meta.config, meta.vocab, 0)?;
        model.set_params(params)?;
        Ok(model)
    }

    /// Loads a checkpoint and checks that it holds a `mode` model.
    pub fn load_expect(path: &Path, mode: DecoderMode) -> Result<Self> {
        let m = Self::load(path)?;
        if m.mode() != mode {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model but {} was requested",
                path.display(),
                m.mode(),
                mode
            )));
        }
        Ok(m)
    }
}

fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {}",
            expected.len(),
            got.len()
        )));
    }
    for (a, b) in expected.iter().zip(got.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    Ok(())
}
