#![allow(dead_code)]

use std::collections::HashMap;

use delib_core::ctc::collapse;
use delib_core::decoders::DecoderConfig;
use delib_core::fusion::EncoderConfig;
use delib_core::corpus::FirstPassConfig;
use delib_core::{DecoderMode, ModelConfig, Tensor, TokenId};
use rand::Rng;

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Row-normalized random log-probabilities, `l×v`.
pub fn random_log_probs<R: Rng>(l: usize, v: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(l * v);
    for _ in 0..l {
        let row: Vec<f64> = (0..v).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - z));
    }
    Tensor::new(vec![l, v], data).unwrap()
}

/// Probability of every collapsed output, by summing over all `v^l` raw paths.
pub fn brute_force_ctc(log_probs: &Tensor, blank: TokenId) -> HashMap<Vec<TokenId>, f64> {
    let (l, v) = (log_probs.rows(), log_probs.cols());
    let mut out: HashMap<Vec<TokenId>, f64> = HashMap::new();
    let mut path = vec![0usize; l];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs.get(t, k)).sum();
        *out.entry(collapse(&path, blank)).or_default() += lp.exp();
        let mut i = 0;
        loop {
            if i == l {
                return out;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Every sequence over labels `1..v` of length `0..=max_len`.
pub fn all_targets(v: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for k in 1..v {
                let mut t2: Vec<TokenId> = t.clone();
                t2.push(k);
                next.push(t2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// A model small enough for per-test training runs.
pub fn small_config(mode: DecoderMode) -> ModelConfig {
    ModelConfig {
        first_pass: FirstPassConfig {
            dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            frames_per_word: 1,
            audio_confusion_rate: 0.0,
        },
        encoder: EncoderConfig {
            hidden_dim: 16,
            num_pool_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            max_positions: 32,
        },
        decoder: DecoderConfig {
            mode,
            num_layers: 1,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            alpha: 2.0,
            max_len: 32,
            attn_dropout: 0.0,
        },
    }
}
