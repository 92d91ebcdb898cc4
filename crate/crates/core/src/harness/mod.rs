//! Exact-match evaluation with an ASR-error breakdown, the decoder latency
//! benchmark and the experiment runners built on them.

mod experiments;
mod latency;

use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::Example;
use crate::error::Result;
use crate::model::Model;

pub use experiments::{
    alpha_sweep, denoise_ablation, sweep_csv, AlphaRow, DataSplits, SweepRow, ABLATION_VARIANTS,
};
pub use latency::{bench_latency, latency_csv, linear_fit, BenchConfig, LatencyPoint, LatencyProfile, LinearFit};

/// Token-sequence equality, no normalization.
pub fn exact_match<S: PartialEq>(pred: &[S], target: &[S]) -> bool {
    pred == target
}

/// Anything that maps an example to a predicted parse.
pub trait Parser {
    fn parse(&self, ex: &Example) -> Result<Vec<String>>;
}

impl Parser for Model {
    fn parse(&self, ex: &Example) -> Result<Vec<String>> {
        Model::parse(self, &ex.hyp_words, &ex.gold_words)
    }
}

/// Predicts the gold parse.
pub struct OracleParser;

impl Parser for OracleParser {
    fn parse(&self, ex: &Example) -> Result<Vec<String>> {
        Ok(ex.parse.clone())
    }
}

/// Predicts nothing.
pub struct EmptyParser;

impl Parser for EmptyParser {
    fn parse(&self, _: &Example) -> Result<Vec<String>> {
        Ok(Vec::new())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleRecord {
    pub id: usize,
    pub asr_error: bool,
    pub target: Vec<String>,
    pub prediction: Vec<String>,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub em_total: f64,
    pub em_no_asr_error: f64,
    pub em_asr_error: f64,
    pub n_total: usize,
    pub n_no_asr_error: usize,
    pub n_asr_error: usize,
    pub records: Vec<ExampleRecord>,
}

fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

impl EvalReport {
    pub fn from_records(records: Vec<ExampleRecord>) -> Self {
        let n_err = records.iter().filter(|r| r.asr_error).count();
        let hit_err = records.iter().filter(|r| r.asr_error && r.matched).count();
        let n_clean = records.len() - n_err;
        let hit_clean = records.iter().filter(|r| !r.asr_error && r.matched).count();
        EvalReport {
            em_total: ratio(hit_err + hit_clean, records.len()),
            em_no_asr_error: ratio(hit_clean, n_clean),
            em_asr_error: ratio(hit_err, n_err),
            n_total: records.len(),
            n_no_asr_error: n_clean,
            n_asr_error: n_err,
            records,
        }
    }

    /// `example_id,bucket,match`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("example_id,bucket,match\n");
        for r in &self.records {
            let bucket = if r.asr_error { "asr_error" } else { "clean" };
            let _ = writeln!(out, "{},{bucket},{}", r.id, u8::from(r.matched));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "EM {:.4} over {} | ASR-error bucket {:.4} over {} | clean bucket {:.4} over {}",
            self.em_total, self.n_total, self.em_asr_error, self.n_asr_error, self.em_no_asr_error, self.n_no_asr_error
        )
    }
}

/// Decodes every example and scores it, bucketed by `had_asr_error`.
pub fn evaluate<P: Parser + ?Sized>(parser: &P, examples: &[Example]) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(examples.len());
    for (id, ex) in examples.iter().enumerate() {
        let prediction = parser.parse(ex)?;
        records.push(ExampleRecord {
            id,
            asr_error: ex.had_asr_error,
            matched: exact_match(&prediction, &ex.parse),
            target: ex.parse.clone(),
            prediction,
        });
    }
    Ok(EvalReport::from_records(records))
}
