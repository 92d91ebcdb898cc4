//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails at the end if any criterion failed.

mod common;

use std::time::{Duration, Instant};

use common::{all_targets, brute_force_ctc, random_log_probs, small_config, words};
use delib_core::corpus::{self, GrammarSpec, Split};
use delib_core::ctc::{ctc_loss, ctc_loss_var};
use delib_core::harness::{bench_latency, evaluate, BenchConfig, DataSplits, EvalReport};
use delib_core::noising::{apply_meta, build_confusions, delete_noise, substitute_noise, ConfusionDictionary};
use delib_core::tensor::{grad_check, grad_check_params};
use delib_core::training::{build_vocab, train};
use delib_core::{DecoderMode, Error, LossWeights, MetaMode, Model, NoiseSpec, ScheduleSpec, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, pass: bool, elapsed: Duration, detail: String) -> Verdict {
    println!(
        "{} criterion {id} ({name}) [{:.1}s]: {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    Verdict { id, pass, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// 1. CTC against path enumeration

fn ctc_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut checked, mut bad_infeasible) = (0.0f64, 0usize, 0usize);
    for v in 2..=4 {
        for l in 1..=6 {
            let lp = random_log_probs(l, v, &mut rng);
            let brute = brute_force_ctc(&lp, 0);
            for target in all_targets(v, 4) {
                let exact = brute.get(&target).copied().unwrap_or(0.0);
                match ctc_loss(&lp, &target, 0) {
                    Ok(r) => worst = worst.max(((-r.nll).exp() - exact).abs()),
                    Err(Error::Infeasible { .. }) if exact == 0.0 => {}
                    Err(_) => bad_infeasible += 1,
                }
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-9 && bad_infeasible == 0 && elapsed < Duration::from_secs(60);
    report(
        1,
        "CTC oracle equivalence",
        pass,
        elapsed,
        format!("{checked} (V, l, target) cases, max |exp(-loss) - brute force| = {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

fn project<'g>(g: &'g delib_core::Graph, out: delib_core::Var<'g>) -> delib_core::Result<delib_core::Var<'g>> {
    let w = Tensor::uniform(&out.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(77));
    Ok(out.mul(&g.constant(w))?.sum())
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = |r: usize, c: usize| Tensor::uniform(&[r, c], 1.0, &mut rng);
    let (a, b, c, bt) = (t(3, 4), t(4, 2), t(3, 4), t(2, 4));
    let (gain, bias, row) = (t(1, 4), t(1, 4), t(1, 4));
    let gain = gain.reshape(&[4]).unwrap();
    let bias = bias.reshape(&[4]).unwrap();
    let row = row.reshape(&[4]).unwrap();
    let mut away = a.clone();
    for v in away.data_mut() {
        *v += 0.05f64.copysign(*v);
    }
    let h = 1e-5;
    let prim = [
        grad_check(|g, x| project(g, x[0].matmul(&x[1])?), &[a.clone(), b], h),
        grad_check(|g, x| project(g, x[0].matmul_t(&x[1])?), &[a.clone(), bt], h),
        grad_check(|g, x| project(g, x[0].add(&x[1])?), &[a.clone(), c.clone()], h),
        grad_check(|g, x| project(g, x[0].sub(&x[1])?), &[a.clone(), c.clone()], h),
        grad_check(|g, x| project(g, x[0].mul(&x[1])?), &[a.clone(), c.clone()], h),
        grad_check(|g, x| project(g, x[0].add_row(&x[1])?), &[a.clone(), row], h),
        grad_check(|g, x| project(g, g.concat_cols(&[x[0], x[1]])?), &[a.clone(), c], h),
        grad_check(|g, x| project(g, x[0].scale(0.3)), std::slice::from_ref(&a), h),
        grad_check(|g, x| project(g, x[0].relu()), &[away], h),
        grad_check(|g, x| project(g, x[0].softmax(1)?), std::slice::from_ref(&a), h),
        grad_check(|g, x| project(g, x[0].softmax(0)?), std::slice::from_ref(&a), h),
        grad_check(|g, x| project(g, x[0].log_softmax()), std::slice::from_ref(&a), h),
        grad_check(|g, x| project(g, x[0].layer_norm(&x[1], &x[2], 1e-5)?), &[a.clone(), gain, bias], h),
        grad_check(|g, x| project(g, x[0].gather_rows(&[2, 0, 2])?), std::slice::from_ref(&a), h),
        grad_check(|g, x| project(g, x[0].slice_cols(1, 2)?), std::slice::from_ref(&a), h),
        grad_check(|g, x| project(g, x[0].mean_rows(2)?), std::slice::from_ref(&a), h),
        grad_check(|g, x| project(g, x[0].transpose()?), std::slice::from_ref(&a), h),
    ]
    .into_iter()
    .map(|r| r.unwrap())
    .fold(0.0, f64::max);

    let logits = random_log_probs(8, 5, &mut ChaCha8Rng::seed_from_u64(3));
    let ctc = grad_check(|_, x| ctc_loss_var(x[0].log_softmax(), &[1, 4, 4, 2], 0), &[logits], h).unwrap();

    let vocab = delib_core::Vocab::build(words("call john jon [IN:CREATE_CALL [SL:CONTACT ]"));
    let (hyp, gold) = (words("call jon"), words("call john"));
    let parse = words("[IN:CREATE_CALL [SL:CONTACT john ] ]");
    let mut model_worst = 0.0f64;
    for mode in DecoderMode::ALL {
        let mut cfg = small_config(mode);
        cfg.first_pass.dim = 8;
        cfg.first_pass.ffn_dim = 8;
        cfg.encoder.hidden_dim = 8;
        cfg.encoder.ffn_dim = 8;
        cfg.decoder.hidden_dim = 8;
        cfg.decoder.ffn_dim = 8;
        cfg.decoder.max_len = 12;
        let model = Model::new(cfg, vocab.clone(), 4).unwrap();
        let w = LossWeights::default();
        let err = grad_check_params(
            |g, ps| Ok(model.loss(g, ps, &hyp, &gold, &parse, &w)?.total),
            model.params(),
            1e-5,
        )
        .unwrap();
        model_worst = model_worst.max(err);
    }
    let elapsed = start.elapsed();
    let pass = prim < 1e-5 && ctc < 1e-4 && model_worst < 1e-3 && elapsed < Duration::from_secs(120);
    report(
        2,
        "gradient integrity",
        pass,
        elapsed,
        format!("primitives {prim:.2e} (< 1e-5), CTC {ctc:.2e} (< 1e-4), joint loss {model_worst:.2e} (< 1e-3)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Memorize 50 examples

fn overfit() -> Verdict {
    let start = Instant::now();
    let data: Vec<_> = GrammarSpec::default().generate(50, 3).unwrap();
    let dict = ConfusionDictionary::new();
    let vocab = build_vocab(&data, &dict);
    let mut cfg = TrainConfig {
        noise: NoiseSpec::none(),
        epochs: 300,
        stop_at_em: Some(1.0),
        schedule: ScheduleSpec {
            warmup_epochs: 5,
            hold_epochs: 295,
            decay_epochs: 0,
            peak_lr: 2e-3,
            ..ScheduleSpec::default()
        },
        batch_size: 8,
        ..TrainConfig::default()
    };
    cfg.model.decoder.mode = DecoderMode::Ctc;
    let out = train(&cfg, vocab, &data, &data, &dict).unwrap();
    let em = evaluate(&out.model, &data).unwrap().em_total;
    let elapsed = start.elapsed();
    let pass = em == 1.0 && elapsed < Duration::from_secs(300);
    report(
        3,
        "overfit sanity",
        pass,
        elapsed,
        format!("train EM {em:.3} after {} epochs", out.history.len()),
    )
}

// ---------------------------------------------------------------------------
// 4 and 5. Desk-scale quality ordering and the denoising mechanism

const SEEDS: [u64; 3] = [1, 2, 3];

/// Training budget for the desk-scale comparisons: the default schedule
/// compressed to `DESK_EPOCHS` epochs, with a higher peak rate to match.
const DESK_EPOCHS: usize = 10;

fn desk_config(mode: DecoderMode, denoise: bool, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: DESK_EPOCHS,
        seed,
        eval_limit: Some(300),
        schedule: ScheduleSpec {
            peak_lr: 2e-3,
            stage_scale: DESK_EPOCHS as f64 / 145.0,
            ..ScheduleSpec::default()
        },
        ..TrainConfig::default()
    };
    cfg.model.decoder.mode = mode;
    if !denoise {
        cfg.noise = NoiseSpec::none();
    }
    cfg
}

fn desk_data() -> DataSplits {
    let examples = GrammarSpec::default().generate(12_000, 2024).unwrap();
    let train_pairs: Vec<_> = corpus::of_split(&examples, Split::Train)
        .into_iter()
        .map(|e| (e.hyp_words, e.gold_words))
        .collect();
    let mut data = DataSplits::new(&examples, build_confusions(&train_pairs).unwrap());
    data.train.truncate(10_000);
    data.test.truncate(1_000);
    data
}

struct DeskRuns {
    /// Per variant, one report per seed.
    reports: Vec<(&'static str, Vec<EvalReport>)>,
}

impl DeskRuns {
    fn get(&self, name: &str) -> &[EvalReport] {
        &self.reports.iter().find(|r| r.0 == name).unwrap().1
    }

    fn mean_em(&self, name: &str) -> f64 {
        mean(&self.get(name).iter().map(|r| r.em_total).collect::<Vec<_>>())
    }
}

fn quality_ordering(data: &DataSplits) -> (Verdict, DeskRuns) {
    let start = Instant::now();
    let variants: [(&str, DecoderMode, bool); 4] = [
        ("ctc+denoise", DecoderMode::Ctc, true),
        ("ctc", DecoderMode::Ctc, false),
        ("mask-predict", DecoderMode::MaskPredict, false),
        ("autoregressive", DecoderMode::Autoregressive, false),
    ];
    let mut runs = DeskRuns { reports: Vec::new() };
    for (name, mode, denoise) in variants {
        let mut reports = Vec::new();
        for seed in SEEDS {
            let t = Instant::now();
            let (_, r) = data.run(&desk_config(mode, denoise, seed)).unwrap();
            println!("  {name} seed {seed} [{:.0}s]: {}", t.elapsed().as_secs_f64(), r.summary());
            reports.push(r);
        }
        runs.reports.push((name, reports));
    }
    let (dn, ctc, mp, ar) = (
        runs.mean_em("ctc+denoise"),
        runs.mean_em("ctc"),
        runs.mean_em("mask-predict"),
        runs.mean_em("autoregressive"),
    );
    let elapsed = start.elapsed();
    let pass = dn >= ctc && ctc >= mp && dn >= ar - 0.01 && elapsed < Duration::from_secs(3600);
    let v = report(
        4,
        "desk-scale quality ordering",
        pass,
        elapsed,
        format!("mean EM ctc+denoise {dn:.4}, ctc {ctc:.4}, mask-predict {mp:.4}, autoregressive {ar:.4}"),
    );
    (v, runs)
}

fn denoising_mechanism(runs: &DeskRuns) -> Verdict {
    let start = Instant::now();
    let mut wins = 0;
    let mut gains = Vec::new();
    for (dn, base) in runs.get("ctc+denoise").iter().zip(runs.get("ctc")) {
        let g_err = dn.em_asr_error - base.em_asr_error;
        let g_clean = dn.em_no_asr_error - base.em_no_asr_error;
        if g_err > g_clean {
            wins += 1;
        }
        gains.push(format!("({g_err:+.4} vs {g_clean:+.4})"));
    }
    report(
        5,
        "denoising mechanism",
        wins * 2 > SEEDS.len(),
        start.elapsed(),
        format!("gain on ASR-error vs clean bucket per seed: {}; {wins}/{} seeds favor the error bucket", gains.join(" "), SEEDS.len()),
    )
}

// ---------------------------------------------------------------------------
// 6. Latency shape

fn bench_model(mode: DecoderMode, alpha: f64, lengths: Vec<usize>) -> delib_core::LatencyProfile {
    let data = GrammarSpec::default().generate(200, 1).unwrap();
    let vocab = build_vocab(&data, &ConfusionDictionary::new());
    let mut cfg = TrainConfig::default().model;
    cfg.decoder.mode = mode;
    cfg.decoder.alpha = alpha;
    let model = Model::new(cfg, vocab, 0).unwrap();
    let ex = &data[0];
    let (mem, valid) = model.encode_memory(&ex.hyp_words, &ex.gold_words).unwrap();
    let bench = BenchConfig {
        lengths,
        ..BenchConfig::default()
    };
    bench_latency(&model, &mem, valid, &bench).unwrap()
}

fn latency_shape() -> Verdict {
    let start = Instant::now();
    let lengths: Vec<usize> = (1..=10).map(|i| 5 * i).collect();
    let ar = bench_model(DecoderMode::Autoregressive, 2.0, lengths.clone());
    let ctc = bench_model(DecoderMode::Ctc, 2.0, lengths);
    let fit = ar.fit.unwrap();
    let at = |p: &delib_core::LatencyProfile, n| p.mean_at(n).unwrap();
    let ctc_growth = at(&ctc, 50) / at(&ctc, 5);
    let (r10, r50) = (at(&ar, 10) / at(&ctc, 10), at(&ar, 50) / at(&ctc, 50));
    let elapsed = start.elapsed();
    let checks = [
        fit.r2 > 0.9 && fit.slope > 0.0,
        ctc_growth < 1.5,
        r10 >= 2.0,
        r50 >= 5.0,
        elapsed < Duration::from_secs(600),
    ];
    report(
        6,
        "latency shape",
        checks.iter().all(|c| *c),
        elapsed,
        format!(
            "AR fit slope {:.1} µs/token R² {:.4}; CTC 50/5 ratio {ctc_growth:.2} (< 1.5); AR/CTC {r10:.1}x at 10 (≥ 2), {r50:.1}x at 50 (≥ 5); CTC {:.0}→{:.0} µs, AR {:.0}→{:.0} µs",
            fit.slope,
            fit.r2,
            at(&ctc, 5),
            at(&ctc, 50),
            at(&ar, 5),
            at(&ar, 50),
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Length multiplier sweep

fn alpha_sweep(data: &DataSplits) -> Verdict {
    let start = Instant::now();
    let mut em = Vec::new();
    for alpha in [1.1, 2.0, 3.0] {
        let mut cfg = desk_config(DecoderMode::Ctc, true, SEEDS[0]);
        cfg.model.decoder.alpha = alpha;
        let (out, r) = data.run(&cfg).unwrap();
        println!(
            "  alpha {alpha}: {} ({} label losses skipped as infeasible)",
            r.summary(),
            out.skipped_labels
        );
        em.push(r.em_total);
    }
    // Timing compares the two multipliers at the typical parse length.
    let typical = (mean(&data.test.iter().map(|e| e.parse.len() as f64).collect::<Vec<_>>())).round() as usize;
    let t2 = bench_model(DecoderMode::Ctc, 2.0, vec![typical]).mean_at(typical).unwrap();
    let t4 = bench_model(DecoderMode::Ctc, 4.0, vec![typical]).mean_at(typical).unwrap();
    let ratio = t4.max(t2) / t4.min(t2);
    let pass = em[1] - em[0] >= 0.10 && (em[2] - em[1]).abs() <= 0.03 && ratio < 2.0;
    report(
        7,
        "alpha sweep",
        pass,
        start.elapsed(),
        format!(
            "EM α=1.1 {:.4}, α=2 {:.4}, α=3 {:.4}; latency at length {typical}: α=2 {t2:.0} µs, α=4 {t4:.0} µs (ratio {ratio:.2})",
            em[0], em[1], em[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Noise statistics

fn noise_statistics() -> Verdict {
    let start = Instant::now();
    const TRIALS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let within = |mean: f64, expected: f64, var: f64, n: usize| (mean - expected).abs() / (var / n as f64).sqrt();
    let mut z = Vec::new();

    // Deletion counts against Binomial(n, p).
    for (n, p) in [(10usize, 0.0026f64), (12, 0.1), (20, 0.5)] {
        let toks: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let dels: Vec<f64> = (0..TRIALS).map(|_| (n - delete_noise(&toks, p, &mut rng).len()) as f64).collect();
        let np = n as f64 * p;
        z.push(within(mean(&dels), np, (np * (1.0 - p)).max(1e-12), TRIALS));
    }

    // Replacement frequencies against dictionary count ratios.
    let mut dict = ConfusionDictionary::new();
    dict.add("john", "jon", 5);
    dict.add("john", "jake", 2);
    dict.add("john", "jay", 1);
    let toks = vec!["john".to_string(); 8];
    let mut counts = [0usize; 3];
    let mut total = 0;
    for _ in 0..TRIALS {
        for w in substitute_noise(&toks, 0.0882, &dict, &mut rng) {
            let k = ["jon", "jake", "jay"].iter().position(|r| *r == w);
            if let Some(k) = k {
                counts[k] += 1;
                total += 1;
            }
        }
    }
    let expected_total = 8.0 * 0.0882;
    z.push(within(total as f64 / TRIALS as f64, expected_total, 8.0 * 0.0882 * (1.0 - 0.0882), TRIALS));
    for (k, c) in counts.iter().enumerate() {
        let q = [5.0, 2.0, 1.0][k] / 8.0;
        z.push(within(*c as f64 / total as f64, q, q * (1.0 - q), total));
    }

    // Sampling meta: each operator fires half the time.
    let spec = NoiseSpec {
        deletion_p: 0.3,
        substitution_p: 0.3,
        meta: MetaMode::Sampling,
        seed: 0,
    };
    let toks = vec!["john".to_string(); 10];
    let dels: Vec<f64> = (0..TRIALS)
        .map(|_| (10 - apply_meta(&toks, &spec, &dict, &mut rng).len()) as f64)
        .collect();
    let var = 0.5 * (10.0 * 0.3 * 0.7 + 9.0) - 1.5f64.powi(2);
    z.push(within(mean(&dels), 1.5, var, TRIALS));

    let worst = z.iter().cloned().fold(0.0, f64::max);
    report(
        8,
        "noise statistics",
        worst < 3.0,
        start.elapsed(),
        format!("{} Monte-Carlo means, largest deviation {worst:.2} standard errors", z.len()),
    )
}

// ---------------------------------------------------------------------------
// 9. Round trips and reproducibility

fn pipeline(dir: &std::path::Path, seed: u64) -> EvalReport {
    let examples = GrammarSpec::default().generate(400, seed).unwrap();
    corpus::save_splits(&examples, dir).unwrap();
    let examples = corpus::load(dir).unwrap();
    let train_set = corpus::of_split(&examples, Split::Train);
    let pairs: Vec<_> = train_set.iter().map(|e| (e.hyp_words.clone(), e.gold_words.clone())).collect();
    let dict = build_confusions(&pairs).unwrap();
    let data = DataSplits::new(&examples, dict);
    let mut cfg = TrainConfig {
        model: small_config(DecoderMode::Ctc),
        epochs: 60,
        seed,
        ..TrainConfig::default()
    };
    // Long enough that the reproduced EM is not trivially zero.
    cfg.schedule.stage_scale = 60.0 / 145.0;
    cfg.schedule.peak_lr = 3e-3;
    data.run(&cfg).unwrap().1
}

fn round_trips() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();

    let examples = GrammarSpec::default().generate(300, 4).unwrap();
    let file = dir.path().join("data.jsonl");
    corpus::save(&examples, &file).unwrap();
    if corpus::load(&file).unwrap() != examples {
        failures.push("dataset");
    }

    let pairs: Vec<_> = examples.iter().map(|e| (e.hyp_words.clone(), e.gold_words.clone())).collect();
    let dict = build_confusions(&pairs).unwrap();
    let tsv = dir.path().join("conf.tsv");
    dict.save(&tsv).unwrap();
    if ConfusionDictionary::load(&tsv).unwrap() != dict || dict.is_empty() {
        failures.push("confusions");
    }

    let vocab = build_vocab(&examples, &dict);
    for mode in DecoderMode::ALL {
        let mut model = Model::new(small_config(mode), vocab.clone(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in model.params_mut().iter_mut() {
            let t = std::sync::Arc::make_mut(&mut p.value);
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let ckpt = dir.path().join(format!("{mode}.ckpt"));
        model.save(&ckpt).unwrap();
        let back = Model::load(&ckpt).unwrap();
        let same_outputs = examples[..20]
            .iter()
            .all(|e| back.parse(&e.hyp_words, &e.gold_words).unwrap() == model.parse(&e.hyp_words, &e.gold_words).unwrap());
        if !back.params().bit_equal(model.params()) || back.config() != model.config() || back.vocab() != model.vocab() || !same_outputs {
            failures.push("checkpoint");
        }
    }

    let a = pipeline(&dir.path().join("run_a"), 12);
    let b = pipeline(&dir.path().join("run_b"), 12);
    if a.em_total.to_bits() != b.em_total.to_bits() || a.records != b.records {
        failures.push("pipeline rerun");
    }
    if a.em_total == 0.0 {
        failures.push("pipeline rerun learned nothing");
    }
    report(
        9,
        "round-trip fidelity",
        failures.is_empty(),
        start.elapsed(),
        if failures.is_empty() {
            format!("dataset, dictionary and 3 checkpoints deep-equal; rerun EM {:.4} reproduced bit-exactly", a.em_total)
        } else {
            format!("mismatch in {}", failures.join(", "))
        },
    )
}

#[test]
fn acceptance_suite() {
    let mut verdicts = vec![ctc_oracle(), gradients(), overfit()];
    let data = desk_data();
    let (v4, runs) = quality_ordering(&data);
    verdicts.push(v4);
    verdicts.push(denoising_mechanism(&runs));
    verdicts.push(latency_shape());
    verdicts.push(alpha_sweep(&data));
    verdicts.push(noise_statistics());
    verdicts.push(round_trips());

    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| format!("{}: {}", v.id, v.detail))
        .collect();
    println!("{}/{} criteria passed", verdicts.len() - failed.len(), verdicts.len());
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
