//! Two-pass spoken-language parsing with a non-autoregressive CTC decoder.
//!
//! A simulated first pass supplies a (possibly wrong) word hypothesis and an
//! audio-channel embedding. The second pass fuses both with cross-attention,
//! predicts the output length, and decodes the whole semantic parse in one
//! parallel step with CTC. Mask-Predict and autoregressive decoders share the
//! same encoder for comparison.
//!
//! ```no_run
//! use delib_core::{corpus::GrammarSpec, harness::DataSplits, noising::build_confusions, training::TrainConfig};
//!
//! let data = GrammarSpec::default().generate(2_000, 7)?;
//! let pairs: Vec<_> = data.iter().map(|e| (e.hyp_words.clone(), e.gold_words.clone())).collect();
//! let splits = DataSplits::new(&data, build_confusions(&pairs)?);
//! let (outcome, report) = splits.run(&TrainConfig::default())?;
//! println!("{}", report.summary());
//! # let _ = outcome;
//! # Ok::<(), delib_core::Error>(())
//! ```

pub mod corpus;
pub mod ctc;
pub mod decoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod io;
pub mod model;
pub mod nn;
pub mod noising;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use corpus::{Example, FirstPassOutput, GrammarSpec, Split};
pub use ctc::{CtcLossResult, CtcOutput};
pub use decoders::{DecoderConfig, DecoderMode, LengthPrediction};
pub use error::{Error, Result};
pub use fusion::{EncoderConfig, PooledEncoding};
pub use harness::{EvalReport, LatencyProfile};
pub use model::{Model, ModelConfig};
pub use noising::{ConfusionDictionary, MetaMode, NoiseSpec};
pub use tensor::{Graph, ParamStore, Tensor, Var};
pub use training::{LossWeights, ScheduleSpec, TrainConfig};
pub use vocab::{TokenId, Vocab};
