use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttnMask, Embedding, EncoderBlock};
use crate::tensor::{Graph, ParamStore, Var};
use crate::io::fnv1a;
use crate::vocab::{TokenId, Vocab, EOS, UNK};

/// Lowest id that is not a special token.
const FIRST_WORD: TokenId = EOS + 1;

/// Shape of the simulated first pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirstPassConfig {
    /// Width `D` of both channels.
    pub dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Audio frames emitted per spoken word.
    pub frames_per_word: usize,
    /// Chance that a spoken word reaches the audio channel as some other
    /// word. Fixed per utterance, so a sentence always sounds the same.
    pub audio_confusion_rate: f64,
}

impl Default for FirstPassConfig {
    fn default() -> Self {
        FirstPassConfig {
            dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            frames_per_word: 1,
            audio_confusion_rate: 0.15,
        }
    }
}

impl FirstPassConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("first_pass.dim", "must be positive"));
        }
        if self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::config("first_pass.num_heads", "must divide first_pass.dim"));
        }
        if self.frames_per_word == 0 {
            return Err(Error::config("first_pass.frames_per_word", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.audio_confusion_rate) {
            return Err(Error::config("first_pass.audio_confusion_rate", "must be a probability"));
        }
        Ok(())
    }
}

/// The two channels handed from the first pass to the deliberation encoder.
#[derive(Clone, Debug)]
pub struct FirstPassOutput<'g> {
    pub text_tokens: Vec<TokenId>,
    /// `T×D`; rows at or beyond `text_valid` are padding.
    pub emb_text: Var<'g>,
    /// `A×D`
    pub emb_aud: Var<'g>,
    pub text_valid: usize,
    pub had_asr_error: bool,
}

/// Stand-in for a streaming recognizer's encoder states.
///
/// The text channel embeds the hypothesis words. The audio channel embeds
/// the words that were actually spoken through a separate table and one
/// self-attention block. Its errors are independent of the hypothesis: each
/// word is swapped for a random one at `audio_confusion_rate`, decided by a
/// hash of the utterance. Neither channel is reliable alone, which is what
/// makes cross-checking them worth learning.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FirstPassSim {
    text: Embedding,
    audio: Embedding,
    audio_block: EncoderBlock,
    frames_per_word: usize,
    #[serde(default)]
    audio_confusion_rate: f64,
}

impl FirstPassSim {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: &FirstPassConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(FirstPassSim {
            text: Embedding::new(ps, "first_pass.text", vocab_size, cfg.dim, rng)?,
            audio: Embedding::new(ps, "first_pass.audio", vocab_size, cfg.dim, rng)?,
            audio_block: EncoderBlock::new(ps, "first_pass.audio_block", cfg.dim, cfg.num_heads, cfg.ffn_dim, rng)?,
            frames_per_word: cfg.frames_per_word,
            audio_confusion_rate: cfg.audio_confusion_rate,
        })
    }

    /// Audio units for a spoken word sequence over a vocabulary of
    /// `vocab_size` ids.
    pub fn audio_units(&self, gold: &[TokenId], vocab_size: usize) -> Vec<TokenId> {
        let key: Vec<u8> = gold.iter().flat_map(|w| (*w as u64).to_le_bytes()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&key));
        let words = FIRST_WORD..vocab_size.max(FIRST_WORD + 1);
        gold.iter()
            .flat_map(|&w| {
                let heard = if self.audio_confusion_rate > 0.0 && rng.random::<f64>() < self.audio_confusion_rate {
                    rng.random_range(words.clone())
                } else {
                    w
                };
                std::iter::repeat_n(heard, self.frames_per_word)
            })
            .collect()
    }

    /// Embeds a hypothesis and the spoken words. An empty hypothesis is read
    /// as a single unknown word. `pad_to` extends the text channel with
    /// padding rows up to that length.
    #[allow(clippy::too_many_arguments)]
    pub fn embed<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        vocab: &Vocab,
        hyp: &[String],
        gold: &[String],
        had_asr_error: bool,
        pad_to: Option<usize>,
    ) -> Result<FirstPassOutput<'g>> {
        if gold.is_empty() {
            return Err(Error::usage("first pass needs at least one spoken word"));
        }
        let mut text_tokens = vocab.encode(hyp);
        if text_tokens.is_empty() {
            text_tokens.push(UNK);
        }
        let text_valid = text_tokens.len();
        let mut ids = text_tokens.clone();
        if let Some(n) = pad_to {
            if n < text_valid {
                return Err(Error::usage(format!("pad_to {n} is shorter than the hypothesis ({text_valid})")));
            }
            ids.resize(n, UNK);
        }
        let emb_text = self.text.forward(g, ps, &ids)?;
        let units = self.audio_units(&vocab.encode(gold), vocab.len());
        let aud = self.audio.forward(g, ps, &units)?;
        let emb_aud = self.audio_block.forward(g, ps, aud, AttnMask::NONE, 0.0)?;
        Ok(FirstPassOutput {
            text_tokens,
            emb_text,
            emb_aud,
            text_valid,
            had_asr_error,
        })
    }
}
