//! Fixtures shared by the criterion benches.

use delib_core::corpus::GrammarSpec;
use delib_core::noising::ConfusionDictionary;
use delib_core::training::{build_vocab, TrainConfig};
use delib_core::{DecoderMode, Model, Tensor};

/// An untrained default-size model with the pooled encoding of one utterance.
/// Decoding cost does not depend on the weights, so timing needs no training.
pub struct DecodeFixture {
    pub model: Model,
    pub memory: Tensor,
    pub valid: usize,
}

impl DecodeFixture {
    pub fn new(mode: DecoderMode, alpha: f64) -> Self {
        let data = GrammarSpec::default().generate(64, 0).expect("bundled grammar generates");
        let vocab = build_vocab(&data, &ConfusionDictionary::new());
        let mut cfg = TrainConfig::default().model;
        cfg.decoder.mode = mode;
        cfg.decoder.alpha = alpha;
        let model = Model::new(cfg, vocab, 0).expect("default config is valid");
        let ex = &data[0];
        let (memory, valid) = model.encode_memory(&ex.hyp_words, &ex.gold_words).expect("encodes");
        DecodeFixture { model, memory, valid }
    }

    /// Returns the number of decoder forwards.
    pub fn decode(&self, length: usize) -> usize {
        self.model.decode_forced(&self.memory, self.valid, length).expect("decodes").1
    }
}

/// Normalized random `l×v` log-probabilities from a fixed linear congruential stream.
pub fn log_probs(l: usize, v: usize) -> Tensor {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut data = Vec::with_capacity(l * v);
    for _ in 0..l {
        let row: Vec<f64> = (0..v)
            .map(|_| {
                state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
                (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
            })
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - z));
    }
    Tensor::new(vec![l, v], data).expect("shape matches data")
}
