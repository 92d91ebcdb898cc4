mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use delib_core::corpus::{self, GrammarSpec, Split};
use delib_core::harness::{
    alpha_sweep, bench_latency, denoise_ablation, evaluate, latency_csv, sweep_csv, BenchConfig, DataSplits,
    OracleParser, ABLATION_VARIANTS,
};
use delib_core::io::write_atomic;
use delib_core::noising::{build_confusions, ConfusionDictionary, MetaMode};
use delib_core::training::{metrics_csv, TrainConfig};
use delib_core::{DecoderMode, Error, Model};
use manifest::ManifestBuilder;
use serde::Serialize;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Second-pass spoken-language parsing: data generation, training, evaluation
/// and decoder benchmarks.
#[derive(Parser)]
#[command(name = "delib", version)]
struct Cli {
    /// Root directory that relative --out paths are resolved against.
    #[arg(long, env = "DELIB_OUT_ROOT", global = true)]
    out_root: Option<PathBuf>,

    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a grammar.
    GenData(GenDataArgs),
    /// Extract a word confusion dictionary from a dataset's train split.
    BuildConfusions(BuildConfusionsArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Time decoding at forced output lengths.
    Bench(BenchArgs),
    /// Train CTC models across length multipliers.
    SweepAlpha(SweepAlphaArgs),
    /// Train every denoising variant under several seeds.
    AblateNoise(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Grammar TOML; the bundled grammar when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of examples across all splits.
    #[arg(long, default_value_t = 12_000)]
    n: usize,
    /// RNG seed; same seed, same outputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for {train,valid,test}.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildConfusionsArgs {
    /// Dataset directory or JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for confusions.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Recorded in the manifest; extraction itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training settings that override the config file.
#[derive(Args)]
struct TrainOverrides {
    /// Training config TOML; documented defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed; same seed, same outputs.
    #[arg(long)]
    seed: Option<u64>,
    /// ctc, mask-predict or autoregressive.
    #[arg(long)]
    mode: Option<DecoderMode>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// CTC length multiplier.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the length loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Peak learning rate of the tri-stage schedule.
    #[arg(long)]
    peak_lr: Option<f64>,
    /// Multiplier on every schedule stage length.
    #[arg(long)]
    stage_scale: Option<f64>,
    /// Examples per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// sampling, sequential, single-del, single-subs or none.
    #[arg(long)]
    noise_meta: Option<MetaMode>,
    /// Per-word deletion probability of the text noise.
    #[arg(long)]
    deletion_p: Option<f64>,
    /// Per-word substitution probability of the text noise.
    #[arg(long)]
    substitution_p: Option<f64>,
    /// Evaluate on at most this many validation examples per epoch.
    #[arg(long)]
    eval_limit: Option<usize>,
}

impl TrainOverrides {
    /// Flag over file over default.
    fn resolve(&self) -> delib_core::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.model.decoder.mode = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.alpha {
            cfg.model.decoder.alpha = v;
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda = v;
        }
        if let Some(v) = self.peak_lr {
            cfg.schedule.peak_lr = v;
            cfg.schedule.floor_lr = cfg.schedule.floor_lr.min(v);
        }
        if let Some(v) = self.stage_scale {
            cfg.schedule.stage_scale = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.noise_meta {
            cfg.noise.meta = v;
        }
        if let Some(v) = self.deletion_p {
            cfg.noise.deletion_p = v;
        }
        if let Some(v) = self.substitution_p {
            cfg.noise.substitution_p = v;
        }
        if self.eval_limit.is_some() {
            cfg.eval_limit = self.eval_limit;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: TrainOverrides,
    /// Dataset directory or JSONL file with split labels.
    #[arg(long)]
    data: PathBuf,
    /// Confusion TSV; built from the train split when omitted.
    #[arg(long)]
    confusions: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Score the gold parses themselves instead of a model.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    /// Fail unless the checkpoint holds this decoder.
    #[arg(long)]
    mode: Option<DecoderMode>,
    /// Dataset directory or JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// RNG seed; same seed, same outputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// One or more checkpoints.
    #[arg(long, num_args = 1.., required = true)]
    ckpt: Vec<PathBuf>,
    /// Forced output lengths.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25,30,35,40,45,50")]
    lengths: Vec<usize>,
    /// Timed samples per length.
    #[arg(long, default_value_t = 50)]
    runs: usize,
    /// Untimed runs before measuring each length.
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Words of the utterance whose encoding is decoded.
    #[arg(long, default_value = "call john")]
    utterance: String,
    /// RNG seed; same seed, same outputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepAlphaArgs {
    #[command(flatten)]
    cfg: TrainOverrides,
    /// Dataset directory or JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// Confusion TSV; built from the train split when omitted.
    #[arg(long)]
    confusions: Option<PathBuf>,
    /// Length multipliers to train.
    #[arg(long, value_delimiter = ',', default_value = "1.1,2,3,4")]
    alphas: Vec<f64>,
    /// Also time every model at the default lengths.
    #[arg(long)]
    bench: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: TrainOverrides,
    /// Dataset directory or JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// Confusion TSV; built from the train split when omitted.
    #[arg(long)]
    confusions: Option<PathBuf>,
    /// Seeds to train each variant with.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Subset of sampling, del, subs, none.
    #[arg(long, value_delimiter = ',', default_value = "sampling,del,subs,none")]
    variants: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config { .. }) => EXIT_USAGE,
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.out_root;
    let out_dir = |p: &Path| -> anyhow::Result<PathBuf> {
        let dir = match &root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        };
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    };
    match cli.command {
        Command::GenData(a) => gen_data(a, out_dir),
        Command::BuildConfusions(a) => confusions(a, out_dir),
        Command::Train(a) => train(a, out_dir),
        Command::Eval(a) => eval(a, out_dir),
        Command::Bench(a) => bench(a, out_dir),
        Command::SweepAlpha(a) => sweep(a, out_dir),
        Command::AblateNoise(a) => ablate(a, out_dir),
    }
}

fn gen_data(a: GenDataArgs, out_dir: impl Fn(&Path) -> anyhow::Result<PathBuf>) -> anyhow::Result<()> {
    let spec = match &a.spec {
        Some(p) => GrammarSpec::load(p)?,
        None => GrammarSpec::default(),
    };
    let examples = spec.generate(a.n, a.seed)?;
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::start("gen-data", a.seed);
    m.config(&serde_json::json!({ "n": a.n, "spec_path": a.spec, "grammar": spec }));
    m.artifacts(corpus::save_splits(&examples, &dir)?);
    let errors = examples.iter().filter(|e| e.had_asr_error).count();
    log::info!("{} examples, {} with recognition errors", examples.len(), errors);
    m.finish(&dir)?;
    Ok(())
}

fn train_split(data: &Path) -> delib_core::Result<(Vec<delib_core::Example>, Vec<delib_core::Example>)> {
    let all = corpus::load(data)?;
    let train = corpus::of_split(&all, Split::Train);
    Ok((all, train))
}

fn confusions_from(train: &[delib_core::Example]) -> delib_core::Result<ConfusionDictionary> {
    if train.is_empty() {
        return Err(Error::usage("dataset has no training examples"));
    }
    let pairs: Vec<_> = train.iter().map(|e| (e.hyp_words.clone(), e.gold_words.clone())).collect();
    build_confusions(&pairs)
}

fn confusions(a: BuildConfusionsArgs, out_dir: impl Fn(&Path) -> anyhow::Result<PathBuf>) -> anyhow::Result<()> {
    let (_, train) = train_split(&a.data)?;
    let dict = confusions_from(&train)?;
    let dir = out_dir(&a.out)?;
    let path = dir.join("confusions.tsv");
    dict.save(&path)?;
    log::info!("{} confusion pairs from {} training examples", dict.len(), train.len());
    let mut m = ManifestBuilder::start("build-confusions", a.seed);
    m.config(&serde_json::json!({ "data": a.data }));
    m.artifact(path);
    m.finish(&dir)?;
    Ok(())
}

fn load_data(data: &Path, confusions: Option<&Path>) -> delib_core::Result<DataSplits> {
    let (all, train) = train_split(data)?;
    let dict = match confusions {
        Some(p) => ConfusionDictionary::load(p)?,
        None => confusions_from(&train)?,
    };
    Ok(DataSplits::new(&all, dict))
}

fn write(m: &mut ManifestBuilder, path: PathBuf, text: &str) -> delib_core::Result<()> {
    write_atomic(&path, text.as_bytes())?;
    m.artifact(path);
    Ok(())
}

fn train(a: TrainArgs, out_dir: impl Fn(&Path) -> anyhow::Result<PathBuf>) -> anyhow::Result<()> {
    let cfg = a.cfg.resolve()?;
    let data = load_data(&a.data, a.confusions.as_deref())?;
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::start("train", cfg.seed);
    m.config(&cfg);
    let (outcome, report) = data.run(&cfg)?;
    log::info!("test: {}", report.summary());
    let ckpt = dir.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    m.artifact(ckpt);
    write(&mut m, dir.join("config.toml"), &cfg.to_toml())?;
    write(&mut m, dir.join("metrics.csv"), &metrics_csv(&outcome.history))?;
    write(&mut m, dir.join("eval.csv"), &report.to_csv())?;
    m.finish(&dir)?;
    Ok(())
}

#[derive(Serialize)]
struct ReportSummary {
    em_total: f64,
    em_asr_error: f64,
    em_no_asr_error: f64,
    n_total: usize,
    n_asr_error: usize,
    n_no_asr_error: usize,
}

fn eval(a: EvalArgs, out_dir: impl Fn(&Path) -> anyhow::Result<PathBuf>) -> anyhow::Result<()> {
    let examples = corpus::of_split(&corpus::load(&a.data)?, a.split);
    let report = match &a.ckpt {
        Some(p) => {
            let model = match a.mode {
                Some(mode) => Model::load_expect(p, mode)?,
                None => Model::load(p)?,
            };
            evaluate(&model, &examples)?
        }
        None => evaluate(&OracleParser, &examples)?,
    };
    println!("{}", report.summary());
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::start("eval", a.seed);
    m.config(&serde_json::json!({
        "ckpt": a.ckpt, "oracle": a.oracle, "data": a.data, "split": a.split.as_str(),
    }));
    write(&mut m, dir.join("eval.csv"), &report.to_csv())?;
    let summary = ReportSummary {
        em_total: report.em_total,
        em_asr_error: report.em_asr_error,
        em_no_asr_error: report.em_no_asr_error,
        n_total: report.n_total,
        n_asr_error: report.n_asr_error,
        n_no_asr_error: report.n_no_asr_error,
    };
    write(&mut m, dir.join("report.json"), &serde_json::to_string_pretty(&summary)?)?;
    m.finish(&dir)?;
    Ok(())
}

fn bench(a: BenchArgs, out_dir: impl Fn(&Path) -> anyhow::Result<PathBuf>) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        lengths: a.lengths.clone(),
        runs: a.runs,
        warmup: a.warmup,
        ..BenchConfig::default()
    };
    let words: Vec<String> = a.utterance.split_whitespace().map(String::from).collect();
    let mut profiles = Vec::with_capacity(a.ckpt.len());
    for p in &a.ckpt {
        let model = Model::load(p)?;
        let (memory, valid) = model.encode_memory(&words, &words)?;
        let profile = bench_latency(&model, &memory, valid, &cfg)?;
        for pt in &profile.points {
            log::info!("{} length {}: mean {:.1} µs", profile.mode, pt.length, pt.mean_us);
        }
        profiles.push(profile);
    }
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::start("bench", a.seed);
    m.config(&serde_json::json!({
        "ckpt": a.ckpt, "lengths": a.lengths, "runs": a.runs, "warmup": a.warmup, "utterance": a.utterance,
    }));
    write(&mut m, dir.join("latency.csv"), &latency_csv(&profiles))?;
    let fits: Vec<_> = profiles.iter().map(|p| serde_json::json!({ "mode": p.mode, "fit": p.fit })).collect();
    write(&mut m, dir.join("fits.json"), &serde_json::to_string_pretty(&fits)?)?;
    m.finish(&dir)?;
    Ok(())
}

fn sweep(a: SweepAlphaArgs, out_dir: impl Fn(&Path) -> anyhow::Result<PathBuf>) -> anyhow::Result<()> {
    let cfg = a.cfg.resolve()?;
    let data = load_data(&a.data, a.confusions.as_deref())?;
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::start("sweep-alpha", cfg.seed);
    m.config(&serde_json::json!({ "train": cfg, "alphas": a.alphas, "bench": a.bench }));
    let bench = a.bench.then(BenchConfig::default);
    let rows = alpha_sweep(&cfg, &a.alphas, &data, bench.as_ref())?;
    let reports: Vec<_> = rows.iter().map(|r| r.report.clone()).collect();
    write(&mut m, dir.join("alpha_sweep.csv"), &sweep_csv(&reports))?;
    let profiles: Vec<_> = rows.iter().filter_map(|r| r.latency.clone()).collect();
    if !profiles.is_empty() {
        let mut csv = String::from("alpha,length,mean_us\n");
        for (row, p) in rows.iter().zip(&profiles) {
            for pt in &p.points {
                csv.push_str(&format!("{},{},{:.3}\n", row.alpha, pt.length, pt.mean_us));
            }
        }
        write(&mut m, dir.join("alpha_latency.csv"), &csv)?;
    }
    m.finish(&dir)?;
    Ok(())
}

fn ablate(a: AblateArgs, out_dir: impl Fn(&Path) -> anyhow::Result<PathBuf>) -> anyhow::Result<()> {
    let cfg = a.cfg.resolve()?;
    let variants = a
        .variants
        .iter()
        .map(|v| {
            ABLATION_VARIANTS
                .iter()
                .find(|(name, _)| name == v)
                .copied()
                .ok_or_else(|| Error::usage(format!("unknown variant `{v}`")))
        })
        .collect::<delib_core::Result<Vec<_>>>()?;
    let data = load_data(&a.data, a.confusions.as_deref())?;
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::start("ablate-noise", cfg.seed);
    m.config(&serde_json::json!({ "train": cfg, "seeds": a.seeds, "variants": a.variants }));
    let rows = denoise_ablation(&cfg, &variants, &a.seeds, &data)?;
    write(&mut m, dir.join("ablation.csv"), &sweep_csv(&rows))?;
    m.finish(&dir)?;
    Ok(())
}
