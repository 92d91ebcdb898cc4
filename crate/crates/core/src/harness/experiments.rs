use std::fmt::Write as _;

use serde::Serialize;

use super::latency::{bench_latency, BenchConfig, LatencyProfile};
use super::{evaluate, EvalReport};
use crate::corpus::{Example, Split};
use crate::error::{Error, Result};
use crate::noising::{ConfusionDictionary, MetaMode, NoiseSpec};
use crate::training::{build_vocab, train, TrainConfig, TrainOutcome};
use crate::vocab::Vocab;

/// A dataset divided into its splits, with the vocabulary and confusion
/// dictionary every experiment shares.
pub struct DataSplits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub dict: ConfusionDictionary,
    pub vocab: Vocab,
}

impl DataSplits {
    pub fn new(examples: &[Example], dict: ConfusionDictionary) -> Self {
        let part = |s: Split| examples.iter().filter(|e| e.split == s).cloned().collect::<Vec<_>>();
        DataSplits {
            train: part(Split::Train),
            valid: part(Split::Valid),
            test: part(Split::Test),
            vocab: build_vocab(examples, &dict),
            dict,
        }
    }

    /// Trains on the train split (model selection on valid) and scores on test.
    pub fn run(&self, cfg: &TrainConfig) -> Result<(TrainOutcome, EvalReport)> {
        let out = train(cfg, self.vocab.clone(), &self.train, &self.valid, &self.dict)?;
        let report = evaluate(&out.model, &self.test)?;
        Ok((out, report))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub seed: u64,
    pub em_total: f64,
    pub em_error: f64,
    pub em_clean: f64,
}

impl SweepRow {
    fn new(variant: impl Into<String>, seed: u64, r: &EvalReport) -> Self {
        SweepRow {
            variant: variant.into(),
            seed,
            em_total: r.em_total,
            em_error: r.em_asr_error,
            em_clean: r.em_no_asr_error,
        }
    }
}

/// `variant,seed,em_total,em_error,em_clean`
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("variant,seed,em_total,em_error,em_clean\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.variant, r.seed, r.em_total, r.em_error, r.em_clean);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub report: SweepRow,
    pub latency: Option<LatencyProfile>,
}

/// One CTC model per `alpha`, everything else as in `template`. When `bench`
/// is given, each model is also timed from the pooled encoding of the first
/// test example.
pub fn alpha_sweep(
    template: &TrainConfig,
    alphas: &[f64],
    data: &DataSplits,
    bench: Option<&BenchConfig>,
) -> Result<Vec<AlphaRow>> {
    if let Some(a) = alphas.iter().find(|a| !(**a > 1.0)) {
        return Err(Error::usage(format!("alpha {a} must be > 1")));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = template.clone();
        cfg.model.decoder.mode = crate::decoders::DecoderMode::Ctc;
        cfg.model.decoder.alpha = alpha;
        let (out, report) = data.run(&cfg)?;
        let latency = match (bench, data.test.first()) {
            (Some(b), Some(ex)) => {
                let (mem, valid) = out.model.encode_memory(&ex.hyp_words, &ex.gold_words)?;
                Some(bench_latency(&out.model, &mem, valid, b)?)
            }
            _ => None,
        };
        rows.push(AlphaRow {
            alpha,
            report: SweepRow::new(format!("alpha={alpha}"), cfg.seed, &report),
            latency,
        });
    }
    Ok(rows)
}

/// Denoising variants: name and meta-operation.
pub const ABLATION_VARIANTS: [(&str, MetaMode); 4] = [
    ("sampling", MetaMode::Sampling),
    ("del", MetaMode::SingleDel),
    ("subs", MetaMode::SingleSubs),
    ("none", MetaMode::None),
];

/// Trains every denoising variant under every seed. The `none` variant uses
/// zero noise probabilities as well as the identity meta-operation.
pub fn denoise_ablation(
    template: &TrainConfig,
    variants: &[(&str, MetaMode)],
    seeds: &[u64],
    data: &DataSplits,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &(name, meta) in variants {
        for &seed in seeds {
            let mut cfg = template.clone();
            cfg.seed = seed;
            cfg.noise = if meta == MetaMode::None {
                NoiseSpec {
                    seed: template.noise.seed,
                    ..NoiseSpec::none()
                }
            } else {
                NoiseSpec {
                    meta,
                    ..template.noise
                }
            };
            let (_, report) = data.run(&cfg)?;
            log::info!("ablation {name} seed {seed}: {}", report.summary());
            rows.push(SweepRow::new(name, seed, &report));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let rows = vec![SweepRow {
            variant: "none".into(),
            seed: 3,
            em_total: 0.5,
            em_error: 0.25,
            em_clean: 0.75,
        }];
        assert_eq!(sweep_csv(&rows), "variant,seed,em_total,em_error,em_clean\nnone,3,0.5,0.25,0.75\n");
    }
}
