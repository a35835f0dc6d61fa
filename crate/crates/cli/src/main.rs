//! `chai`: calibrate, generate, bench, analyze and compare from the shell.
//!
//! Exit codes: 0 on success, 2 on usage or validation errors (bad flags,
//! unreadable or malformed inputs, missing profile), 1 on runtime failures.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chai_core::accounting::DEFAULT_CACHE_WIDTH_BYTES;
use chai_core::attention::AttentionTrace;
use chai_core::bench::{bench_csv, run_bench, BenchOptions};
use chai_core::clustering::{
    cluster_heads, cluster_size_histogram, correlation_matrix, elbow_select, error_curve,
    extract_features, membership_stability, KMeansOptions, DEFAULT_ELBOW_THRESHOLD,
};
use chai_core::engine::{
    calibrate, compare_outputs, generate, CalibrationOptions, CalibrationProfile,
    GenerateOptions, Mode, DEFAULT_WINDOW,
};
use chai_core::fixture::{planted_model, synthetic_corpus};
use chai_core::model::{byte_tokens, init_random, load_weights, ModelConfig, Weights};
use chai_core::plan::ClusterPlan;
use chai_core::ChaiError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chai", version, about = "Clustered head attention inference engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random weight file, optionally with planted head clusters.
    Init(InitArgs),
    /// Write a pseudo-random token corpus as JSON.
    SynthCorpus(SynthCorpusArgs),
    /// Choose per-layer cluster counts from a corpus and write a profile.
    Calibrate(CalibrateArgs),
    /// Greedy generation in one attention mode.
    Generate(GenerateArgs),
    /// Time-to-first/next-token sweep over sequence lengths.
    Bench(BenchArgs),
    /// Statistics over an exported attention trace.
    Analyze(AnalyzeArgs),
    /// Logit divergence of a clustered mode from MHA.
    Compare(CompareArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 512)]
    ffn: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 512)]
    max_seq: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-layer cluster counts to plant, e.g. `1,4,8,1`.
    #[arg(long, value_delimiter = ',')]
    planted: Option<Vec<usize>>,
    /// Where to write the planted plan as JSON.
    #[arg(long, requires = "planted")]
    plan_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthCorpusArgs {
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    weights: PathBuf,
    /// JSON array of token-id arrays, or a text file with one sample per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Samples to draw; defaults to the whole corpus.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_ELBOW_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Elbow-curve CSV; defaults to the profile path with `.elbow.csv`.
    #[arg(long)]
    elbow_out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    /// File of little-endian u32 token ids.
    #[arg(long, conflicts_with = "text")]
    prompt: Option<PathBuf>,
    /// Inline prompt, one token per byte.
    #[arg(long)]
    text: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "MHA", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    identify_at: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the attention trace of the MHA steps as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    seq_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "MHA,CHAI", value_parser = parse_mode)]
    modes: Vec<Mode>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 16)]
    decode_steps: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    identify_at: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Analysis {
    Correlation,
    Elbow,
    Stability,
    Histogram,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum)]
    what: Analysis,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Supplies cluster counts; required for stability.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Feature window, in steps from the first traced step.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_ELBOW_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First step of the stability report; defaults to the first full window.
    #[arg(long)]
    from: Option<usize>,
    /// Last step of the stability report; defaults to the last traced step.
    #[arg(long)]
    to: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value = "CHAI", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    identify_at: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult<T = ()> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Bad inputs are the caller's fault; broken internal invariants are not.
fn classify(e: ChaiError) -> Failure {
    match e {
        ChaiError::Shape(_) | ChaiError::Contract(_) => runtime(e),
        _ => usage(e),
    }
}

fn invalid(msg: impl Display) -> Failure {
    usage(anyhow!("{msg}"))
}

fn read_input(path: &Path) -> CmdResult<Vec<u8>> {
    fs::read(path).map_err(|e| usage(anyhow!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(runtime)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

fn json_string<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable output") + "\n"
}

fn load_model(path: &Path) -> CmdResult<Weights> {
    if !path.exists() {
        return Err(invalid(format!("weights file {} does not exist", path.display())));
    }
    load_weights(path).map_err(classify)
}

fn load_profile(path: &Path, config: Option<&ModelConfig>) -> CmdResult<CalibrationProfile> {
    let bytes = read_input(path)?;
    let text = String::from_utf8(bytes).map_err(|_| invalid(format!("{} is not UTF-8", path.display())))?;
    let profile = CalibrationProfile::from_json(&text)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if let Some(config) = config {
        profile.check_model(config).map_err(classify)?;
    }
    Ok(profile)
}

fn required_profile(path: Option<&Path>, mode: Mode, config: &ModelConfig) -> CmdResult<Option<CalibrationProfile>> {
    match (mode.needs_profile(), path) {
        (true, None) => Err(invalid(format!("mode {mode} requires --profile"))),
        (_, Some(p)) => load_profile(p, Some(config)).map(Some),
        (false, None) => Ok(None),
    }
}

fn load_prompt(args: &PromptArgs, vocab: usize) -> CmdResult<Vec<u32>> {
    let tokens = match (&args.prompt, &args.text) {
        (Some(path), _) => {
            let bytes = read_input(path)?;
            if bytes.len() % 4 != 0 {
                return Err(invalid(format!(
                    "prompt file {} is {} bytes, not a whole number of u32 tokens",
                    path.display(),
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        (None, Some(text)) => byte_tokens(text),
        (None, None) => return Err(invalid("one of --prompt or --text is required")),
    };
    if tokens.is_empty() {
        return Err(invalid("prompt is empty"));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid(format!("prompt token {t} is outside the vocabulary of {vocab}")));
    }
    Ok(tokens)
}

fn load_corpus(path: &Path) -> CmdResult<Vec<Vec<u32>>> {
    let bytes = read_input(path)?;
    let text = String::from_utf8(bytes).map_err(|_| invalid(format!("{} is not UTF-8", path.display())))?;
    if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| invalid(format!("corpus {}: {e}", path.display())))
    } else {
        Ok(text.lines().filter(|l| !l.is_empty()).map(byte_tokens).collect())
    }
}

fn threads() -> CmdResult<usize> {
    match std::env::var("CHAI_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(invalid(format!("CHAI_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn cmd_init(a: InitArgs) -> CmdResult {
    let config = ModelConfig::new(a.layers, a.heads, a.dim, a.ffn, a.vocab, a.max_seq).map_err(classify)?;
    let (weights, plan) = match &a.planted {
        Some(counts) => {
            let (w, p) = planted_model(&config, counts, a.seed).map_err(classify)?;
            (w, Some(p))
        }
        None => (init_random(&config, a.seed).map_err(classify)?, None),
    };
    write_output(&a.out, weights.to_bytes())?;
    if let (Some(path), Some(plan)) = (&a.plan_out, &plan) {
        write_output(path, json_string(plan))?;
    }
    Ok(())
}

fn cmd_synth_corpus(a: SynthCorpusArgs) -> CmdResult {
    if a.vocab == 0 || a.samples == 0 || a.len == 0 {
        return Err(invalid("vocab, samples and len must be positive"));
    }
    let corpus = synthetic_corpus(a.vocab, a.samples, a.len, a.seed);
    write_output(&a.out, serde_json::to_string(&corpus).expect("token lists serialise") + "\n")
}

fn cmd_calibrate(a: CalibrateArgs) -> CmdResult {
    let corpus = load_corpus(&a.corpus)?;
    let weights = load_model(&a.weights)?;
    let threads = threads()?;
    let mut opts = CalibrationOptions::new(a.samples.unwrap_or(corpus.len()), a.seed);
    opts.window = a.window;
    opts.threshold = a.threshold;
    opts.threads = threads;
    if !(a.threshold >= 0.0 && a.threshold.is_finite()) {
        return Err(invalid(format!("threshold must be a non-negative number, got {}", a.threshold)));
    }
    let profile = calibrate(&weights, &corpus, &opts).map_err(classify)?;
    write_output(&a.out, profile.to_json() + "\n")?;
    let elbow_path = a.elbow_out.unwrap_or_else(|| a.out.with_extension("elbow.csv"));
    write_output(&elbow_path, profile.elbow_csv())
}

fn cmd_generate(a: GenerateArgs) -> CmdResult {
    let weights = load_model(&a.weights)?;
    let profile = required_profile(a.profile.as_deref(), a.mode, &weights.config)?;
    let prompt = load_prompt(&a.prompt, weights.config.vocab_size)?;
    let mut opts = GenerateOptions::new(a.mode, a.steps);
    opts.identify_at = a.identify_at;
    opts.seed = a.seed;
    opts.kmeans = KMeansOptions::default().with_seed(a.seed);
    opts.record_trace = a.trace.is_some();
    let result = generate(&weights, &prompt, &opts, profile.as_ref()).map_err(classify)?;
    if let (Some(path), Some(trace)) = (&a.trace, &result.trace) {
        write_output(path, trace.to_csv_string())?;
    }
    write_output(&a.out, json_string(&result))
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let weights = load_model(&a.weights)?;
    let needs = a.modes.iter().any(|m| m.needs_profile());
    let profile = match (&a.profile, needs) {
        (None, true) => return Err(invalid("clustered modes require --profile")),
        (Some(p), _) => Some(load_profile(p, Some(&weights.config))?),
        (None, false) => None,
    };
    let opts = BenchOptions {
        seq_lens: a.seq_lens,
        modes: a.modes,
        repeats: a.repeats,
        decode_steps: a.decode_steps,
        identify_at: a.identify_at,
        seed: a.seed,
        cache_width_bytes: DEFAULT_CACHE_WIDTH_BYTES,
    };
    let rows = run_bench(&weights, profile.as_ref(), &opts).map_err(classify)?;
    write_output(&a.out, bench_csv(&rows))
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let bytes = read_input(&a.trace)?;
    let trace = AttentionTrace::read_csv(bytes.as_slice()).map_err(classify)?;
    let first = trace
        .first_step()
        .ok_or_else(|| invalid(format!("trace {} is empty", a.trace.display())))?;
    let last = trace.last_step().expect("non-empty trace");
    let profile = a.profile.as_deref().map(|p| load_profile(p, None)).transpose()?;
    if a.window == 0 {
        return Err(invalid("window must be positive"));
    }
    let window = first..=(first + a.window - 1).min(last);
    let kmeans = KMeansOptions::default().with_seed(a.seed);
    let layers = trace.num_layers();

    match a.what {
        Analysis::Correlation => {
            let mut csv = String::from("layer,head");
            for h in 0..trace.num_heads() {
                csv.push_str(&format!(",h{h}"));
            }
            csv.push('\n');
            for l in 0..layers {
                let f = extract_features(&trace, l, window.clone()).map_err(classify)?;
                let m = correlation_matrix(&f.vectors).map_err(classify)?;
                for (h, row) in m.iter().enumerate() {
                    csv.push_str(&format!("{l},{h}"));
                    for v in row {
                        csv.push_str(&format!(",{v}"));
                    }
                    csv.push('\n');
                }
            }
            write_output(&a.out.join("correlation.csv"), csv)
        }
        Analysis::Elbow => {
            let mut csv = String::from("layer,k,error,chosen\n");
            for l in 0..layers {
                let f = extract_features(&trace, l, window.clone()).map_err(classify)?;
                let curve = error_curve(&f.vectors, &kmeans).map_err(classify)?;
                let chosen = elbow_select(&curve, a.threshold).map_err(classify)?;
                for (i, e) in curve.iter().enumerate() {
                    csv.push_str(&format!("{l},{},{e},{}\n", i + 1, u8::from(i + 1 == chosen)));
                }
            }
            write_output(&a.out.join("elbow.csv"), csv)
        }
        Analysis::Histogram => {
            let mut plans = Vec::with_capacity(layers);
            for l in 0..layers {
                let f = extract_features(&trace, l, window.clone()).map_err(classify)?;
                let k = match &profile {
                    Some(p) => *p
                        .cluster_counts()
                        .get(l)
                        .ok_or_else(|| invalid(format!("profile has no layer {l}")))?,
                    None => {
                        let curve = error_curve(&f.vectors, &kmeans).map_err(classify)?;
                        elbow_select(&curve, a.threshold).map_err(classify)?
                    }
                };
                plans.push(cluster_heads(&f, k, &kmeans).map_err(classify)?);
            }
            let plan = ClusterPlan { layers: plans };
            let histogram: Vec<_> = (0..layers)
                .map(|l| {
                    serde_json::json!({
                        "layer": l,
                        "cluster_count": plan.layers[l].cluster_count,
                        "sizes": cluster_size_histogram(&plan, l),
                    })
                })
                .collect();
            write_output(&a.out.join("histogram.json"), json_string(&histogram))
        }
        Analysis::Stability => {
            let profile = profile.ok_or_else(|| invalid("stability needs --profile for cluster counts"))?;
            let from = a.from.unwrap_or(first + profile.metadata.window - 1);
            let to = a.to.unwrap_or(last);
            let report = membership_stability(&trace, &profile, from, to).map_err(classify)?;
            let mut csv = String::from("layer,step,changes\n");
            for (l, counts) in report.changes.iter().enumerate() {
                for (s, c) in report.steps.iter().zip(counts) {
                    csv.push_str(&format!("{l},{s},{c}\n"));
                }
            }
            write_output(&a.out.join("stability.csv"), csv)?;
            write_output(&a.out.join("stability.json"), json_string(&report))
        }
    }
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let weights = load_model(&a.weights)?;
    let profile = load_profile(&a.profile, Some(&weights.config))?;
    let prompt = load_prompt(&a.prompt, weights.config.vocab_size)?;
    let mut base = GenerateOptions::new(a.mode, a.steps);
    base.identify_at = a.identify_at;
    base.seed = a.seed;
    base.kmeans = KMeansOptions::default().with_seed(a.seed);
    let report = compare_outputs(&weights, &prompt, a.steps, &profile, a.mode, &base).map_err(classify)?;
    write_output(&a.out, json_string(&report))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init(a) => cmd_init(a),
        Command::SynthCorpus(a) => cmd_synth_corpus(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
