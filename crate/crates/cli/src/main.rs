use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use spatial_eval::dataset::{load_samples, to_ood_polarity, validate_file, write_samples, Benchmark};
use spatial_eval::grpo::{compute_advantages, dynamic_sampling_filter, grpo_loss, grpo_loss_gradient, GrpoConfig, Group, GroupSample, RatioBaseline};
use spatial_eval::prompting::{AblationMode, Strategy};
use spatial_eval::runner::{render_report, run_eval, RunConfig, RunError};
use spatial_eval::vlm_client::{scripted_stub, Backend, ClientError, EndpointConfig, Fault, HttpBackend, Rule};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;

#[derive(Parser)]
#[command(name = "spatial-eval", version, about = "Spatial reasoning evaluation harness for vision-language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) an evaluation against an endpoint.
    Eval(EvalArgs),
    /// Recompute the report from a results file.
    Report(ReportArgs),
    /// Rewrite Depth/Distance questions to the opposite polarity.
    TransformOod(TransformArgs),
    /// Check a dataset file and list every violation.
    ValidateDataset(ValidateArgs),
    /// Advantages, filtering, loss and gradient for reward groups.
    GrpoSim(GrpoArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset JSONL file.
    #[arg(long)]
    dataset: PathBuf,
    /// Strategy, e.g. `direct`, `scene-graph-cot`, `few-shot-conversational:4+pot`.
    #[arg(long, default_value = "scene-graph-cot")]
    strategy: Strategy,
    /// Answer samples per question.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Apply the polarity transform to Depth/Distance samples.
    #[arg(long)]
    ood: bool,
    /// `with-image`, `prompt-only` or `question-only`.
    #[arg(long, default_value = "with-image")]
    ablation: AblationMode,
    /// Base URL of a chat-completions endpoint.
    #[arg(long, default_value = "http://localhost:8000/v1")]
    endpoint_url: String,
    #[arg(long, default_value = "default")]
    model: String,
    /// Seed for exemplar selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for results, manifest and report.
    #[arg(long)]
    out: PathBuf,
    /// Exemplar JSONL file, required by few-shot strategies.
    #[arg(long)]
    exemplars: Option<PathBuf>,
    /// `cvbench` or `sat`; decides the exemplar set.
    #[arg(long, default_value = "cvbench")]
    benchmark: Benchmark,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    /// Maximum concurrent requests.
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1024)]
    max_tokens: u32,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Request all k samples in one call using the `n` parameter.
    #[arg(long)]
    server_side_n: bool,
    /// Answer from a scripted rules file instead of the network.
    #[arg(long)]
    stub: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// In-distribution results file.
    results: PathBuf,
    /// OOD results file; adds the gap table.
    #[arg(long)]
    ood: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    path: PathBuf,
}

#[derive(Args)]
struct GrpoArgs {
    /// JSONL with `rewards`, `policy_logprobs`, `ref_logprobs` (and optionally `old_logprobs`).
    groups: PathBuf,
    /// KL coefficient.
    #[arg(long, default_value_t = GrpoConfig::BETA_V2)]
    beta: f64,
    /// Added to the reward std before dividing.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// `reference` or `old-policy`.
    #[arg(long, default_value = "reference", value_parser = parse_baseline)]
    ratio_baseline: RatioBaseline,
}

fn parse_baseline(s: &str) -> Result<RatioBaseline, String> {
    match s {
        "reference" => Ok(RatioBaseline::Reference),
        "old-policy" => Ok(RatioBaseline::OldPolicy),
        _ => Err(format!("unknown ratio baseline `{s}`")),
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: message.into() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Config(_) | RunError::Client(ClientError::AuthMissing(_) | ClientError::Config(_)) => EXIT_CONFIG,
            RunError::Client(c) if c.is_transport() => EXIT_TRANSPORT,
            _ => EXIT_DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum StubFile {
    Rules(Vec<Rule>),
    Full {
        rules: Vec<Rule>,
        #[serde(default)]
        faults: Vec<Fault>,
    },
}

fn load_stub(path: &Path) -> Result<Arc<dyn Backend>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let parsed: StubFile =
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let (rules, faults) = match parsed {
        StubFile::Rules(r) => (r, Vec::new()),
        StubFile::Full { rules, faults } => (rules, faults),
    };
    let stub = faults.into_iter().fold(scripted_stub(rules), |s, f| s.with_fault(f));
    Ok(Arc::new(stub))
}

fn eval(a: EvalArgs) -> Result<u8, Failure> {
    let endpoint = EndpointConfig {
        base_url: a.endpoint_url,
        model: a.model,
        api_key_env: a.api_key_env,
        temperature: a.temperature,
        max_tokens: a.max_tokens,
        timeout_ms: a.timeout_secs.saturating_mul(1000),
        max_retries: a.max_retries,
        parallelism: a.parallelism,
        server_side_n: a.server_side_n,
        ..EndpointConfig::default()
    };
    let backend: Arc<dyn Backend> = match &a.stub {
        Some(p) => load_stub(p)?,
        None => Arc::new(HttpBackend::new(&endpoint)),
    };
    let cfg = RunConfig {
        dataset_path: a.dataset,
        exemplar_path: a.exemplars,
        benchmark: a.benchmark,
        strategy: a.strategy,
        ablation: a.ablation,
        endpoint,
        k: a.k,
        seed: a.seed,
        output_dir: a.out,
        ood: a.ood,
    };
    let summary = run_eval(&cfg, backend)?;
    print!("{}", summary.report.markdown());
    eprintln!(
        "evaluated {} sample(s), skipped {} already finished, {} error(s)",
        summary.evaluated, summary.skipped, summary.errors
    );
    Ok(if summary.transport_failures > 0 { EXIT_TRANSPORT } else { 0 })
}

fn report(a: ReportArgs) -> Result<u8, Failure> {
    let r = render_report(&a.results, a.ood.as_deref())?;
    if let Some(path) = &a.json {
        fs::write(path, r.to_json()).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    }
    print!("{}", r.markdown());
    Ok(0)
}

fn transform_ood(a: TransformArgs) -> Result<u8, Failure> {
    let samples = load_samples(&a.input).map_err(|e| Failure::data(e.to_string()))?;
    let mut transformed = 0;
    let out: Vec<_> = samples
        .into_iter()
        .map(|s| match to_ood_polarity(&s) {
            Ok(t) => {
                transformed += 1;
                t
            }
            Err(_) => s,
        })
        .collect();
    let file = File::create(&a.output).map_err(|e| Failure::data(format!("{}: {e}", a.output.display())))?;
    write_samples(BufWriter::new(file), &out).map_err(|e| Failure::data(e.to_string()))?;
    eprintln!("transformed {transformed} of {} sample(s)", out.len());
    Ok(0)
}

fn validate_dataset(a: ValidateArgs) -> Result<u8, Failure> {
    let problems = validate_file(&a.path).map_err(|e| Failure::data(e.to_string()))?;
    if problems.is_empty() {
        eprintln!("{}: ok", a.path.display());
        return Ok(0);
    }
    for (line, message) in &problems {
        eprintln!("{}:{line}: {message}", a.path.display());
    }
    Ok(EXIT_DATA)
}

#[derive(serde::Deserialize)]
struct GroupLine {
    rewards: Vec<f64>,
    policy_logprobs: Vec<f64>,
    ref_logprobs: Vec<f64>,
    #[serde(default)]
    old_logprobs: Option<Vec<f64>>,
}

fn grpo_sim(a: GrpoArgs) -> Result<u8, Failure> {
    let text = fs::read_to_string(&a.groups).map_err(|e| Failure::data(format!("{}: {e}", a.groups.display())))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut dropped_total = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = i + 1;
        let g: GroupLine =
            serde_json::from_str(line).map_err(|e| Failure::data(format!("line {lineno}: {e}")))?;
        let n = g.rewards.len();
        if g.policy_logprobs.len() != n || g.ref_logprobs.len() != n || g.old_logprobs.as_ref().is_some_and(|o| o.len() != n) {
            return Err(Failure::data(format!("line {lineno}: rewards and log-prob arrays differ in length")));
        }
        let samples = (0..n)
            .map(|j| GroupSample {
                old_logprob: g.old_logprobs.as_ref().map(|o| o[j]),
                ..GroupSample::new(g.policy_logprobs[j], g.ref_logprobs[j], g.rewards[j])
            })
            .collect();
        let cfg = GrpoConfig {
            beta: a.beta,
            advantage_epsilon: a.eps,
            ratio_baseline: a.ratio_baseline,
            ..GrpoConfig::v2(n)
        };
        let advantages = compute_advantages(&g.rewards, a.eps).map_err(|e| Failure::data(format!("line {lineno}: {e}")))?;
        let group = Group { samples, advantages: Some(advantages.clone()) };
        let (kept, dropped) = dynamic_sampling_filter(vec![group]);
        dropped_total += dropped;
        let record: Value = match kept.first() {
            Some(group) => {
                let loss = grpo_loss(group, &cfg).map_err(|e| Failure::data(format!("line {lineno}: {e}")))?;
                let gradient = grpo_loss_gradient(group, &cfg).map_err(|e| Failure::data(format!("line {lineno}: {e}")))?;
                json!({"line": lineno, "advantages": advantages, "dropped": false, "loss": loss, "gradient": gradient})
            }
            None => json!({"line": lineno, "advantages": advantages, "dropped": true, "loss": null, "gradient": null}),
        };
        writeln!(out, "{record}").map_err(|e| Failure::data(e.to_string()))?;
    }
    eprintln!("dropped {dropped_total} group(s) with identical rewards");
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::TransformOod(a) => transform_ood(a),
        Command::ValidateDataset(a) => validate_dataset(a),
        Command::GrpoSim(a) => grpo_sim(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
