//! End-to-end evaluation runs: strategy dispatch, persistence, resume and
//! report emission.
//!
//! A run directory holds `results.jsonl` (one line per sample, in dataset
//! order), `manifest.json`, `report.json` and `report.md`. The results file
//! is the record of what has been evaluated; the manifest mirrors it and
//! pins the configuration so a resumed run cannot silently change settings.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{load_exemplars, load_samples, select_exemplars, to_ood_polarity, Benchmark, Category, Choice, DatasetError, Exemplar, Sample};
use crate::extraction::{extract_answer, extract_scene_graph, normalize_answer};
use crate::metrics::{aggregate_report, render_gap_markdown, render_markdown, EvalRecord, Report};
use crate::prompting::{
    ablate, apply_decorators, build_answer_step, build_describe_answer, build_describe_step, build_direct, build_fewshot,
    build_optical_flow_step, build_scene_graph_step, catalog, AblationMode, FewShotMode, Phase, PromptError, Strategy,
    StrategyKind, Transcript,
};
use crate::vlm_client::{Backend, ClientError, CompletionResult, EndpointConfig, RequestMeta, VlmClient};

pub const HARNESS_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_MD_FILE: &str = "report.md";

mod strategy_str {
    use super::Strategy;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &Strategy, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Strategy, D::Error> {
        String::deserialize(de)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    #[serde(default)]
    pub exemplar_path: Option<PathBuf>,
    pub benchmark: Benchmark,
    #[serde(with = "strategy_str")]
    pub strategy: Strategy,
    #[serde(default)]
    pub ablation: AblationMode,
    pub endpoint: EndpointConfig,
    pub k: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ood: bool,
}

impl RunConfig {
    pub fn new(dataset_path: impl Into<PathBuf>, strategy: Strategy, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset_path: dataset_path.into(),
            exemplar_path: None,
            benchmark: Benchmark::Cvbench,
            strategy,
            ablation: AblationMode::WithImage,
            endpoint: EndpointConfig::default(),
            k: 1,
            seed: 0,
            output_dir: output_dir.into(),
            ood: false,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.k == 0 {
            return Err(RunError::Config("k must be >= 1".into()));
        }
        if self.strategy.kind.shots().is_some() && self.exemplar_path.is_none() {
            return Err(RunError::Config(format!("strategy `{}` requires an exemplar file", self.strategy)));
        }
        self.endpoint.validate().map_err(RunError::Config)
    }

    /// Hash over everything that changes what a sample's result would be.
    /// Operational knobs (parallelism, retries, timeouts, key variable) are
    /// left out so a run can be resumed with different ones.
    pub fn fingerprint(&self) -> String {
        let e = &self.endpoint;
        let key = serde_json::json!({
            "dataset_path": self.dataset_path,
            "exemplar_path": self.exemplar_path,
            "benchmark": self.benchmark,
            "strategy": self.strategy.to_string(),
            "ablation": self.ablation,
            "k": self.k,
            "seed": self.seed,
            "ood": self.ood,
            "base_url": e.base_url,
            "model": e.model,
            "temperature": e.temperature,
            "max_tokens": e.max_tokens,
            "server_side_n": e.server_side_n,
            "catalog": catalog::hash(),
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DatasetError),
    #[error("client setup failed: {0}")]
    Client(#[from] ClientError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed result line {line}: {message}")]
    MalformedResultLine { line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Pending,
    Done,
    Error,
}

impl SampleStatus {
    pub fn is_terminal(self) -> bool {
        self != SampleStatus::Pending
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub status: SampleStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub harness_version: String,
    pub catalog_hash: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub samples: Vec<ManifestEntry>,
}

impl RunManifest {
    /// Moves a sample out of `Pending`; terminal statuses never change.
    pub fn mark(&mut self, id: &str, status: SampleStatus) -> bool {
        match self.samples.iter_mut().find(|e| e.id == id) {
            Some(e) if !e.status.is_terminal() => {
                e.status = status;
                true
            }
            _ => false,
        }
    }

    pub fn count(&self, status: SampleStatus) -> usize {
        self.samples.iter().filter(|e| e.status == status).count()
    }

    pub fn load(path: &Path) -> Result<Option<RunManifest>, RunError> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| RunError::Config(format!("unreadable manifest {}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    /// Write to a sibling temp file and rename over the target.
    pub fn store(&self, path: &Path) -> Result<(), RunError> {
        let tmp = path.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// One persisted sample outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub id: String,
    pub ood: bool,
    pub category: Category,
    pub strategy: String,
    pub transcript_round1_hash: String,
    pub scene_graph: Option<String>,
    pub responses: Vec<String>,
    pub answers: Vec<String>,
    pub truth: String,
    pub status: SampleStatus,
    pub error: Option<String>,
    /// One entry per model call: round 1 (if any), then each answer sample.
    pub latency_ms: Vec<u64>,
    pub question: String,
    #[serde(default)]
    pub choices: Option<Vec<Choice>>,
}

impl ResultLine {
    pub fn to_record(&self) -> EvalRecord {
        EvalRecord {
            sample_id: self.id.clone(),
            category: self.category,
            strategy: self.strategy.clone(),
            predictions: self.answers.clone(),
            truth: self.truth.clone(),
            ood: self.ood,
            choices: self.choices.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report: Report,
    #[serde(default)]
    pub ood_report: Option<Report>,
    /// Samples with status `error`; they are excluded from the scores.
    pub errors: usize,
}

impl RunReport {
    pub fn markdown(&self) -> String {
        let mut md = render_markdown(&self.report);
        if let Some(ood) = &self.ood_report {
            md.push('\n');
            md.push_str(&render_markdown(ood));
            md.push('\n');
            md.push_str(&render_gap_markdown(&self.report, ood));
        }
        if self.errors > 0 {
            md.push_str(&format!("\nErrored samples (not scored): {}\n", self.errors));
        }
        md
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub report: RunReport,
    pub evaluated: usize,
    pub skipped: usize,
    pub errors: usize,
    pub transport_failures: usize,
}

/// Parses a results file. A final line without a trailing newline that does
/// not parse is treated as an interrupted write and reported separately.
fn read_result_lines(path: &Path, tolerate_torn_tail: bool) -> Result<(Vec<ResultLine>, Option<u64>), RunError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && tolerate_torn_tail => return Ok((Vec::new(), None)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut offset = 0u64;
    let mut buf = String::new();
    let mut lineno = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            return Ok((lines, None));
        }
        lineno += 1;
        let complete = buf.ends_with('\n');
        if buf.trim().is_empty() {
            offset += n as u64;
            continue;
        }
        match serde_json::from_str::<ResultLine>(buf.trim_end()) {
            Ok(line) if complete || !tolerate_torn_tail => lines.push(line),
            Ok(_) => return Ok((lines, Some(offset))),
            Err(_) if !complete && tolerate_torn_tail => return Ok((lines, Some(offset))),
            Err(e) => return Err(RunError::MalformedResultLine { line: lineno, message: e.to_string() }),
        }
        offset += n as u64;
    }
}

/// Later lines for the same id replace earlier ones; first-seen order kept.
fn dedup_last(lines: Vec<ResultLine>) -> Vec<ResultLine> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, ResultLine> = HashMap::new();
    for l in lines {
        if !by_id.contains_key(&l.id) {
            order.push(l.id.clone());
        }
        by_id.insert(l.id.clone(), l);
    }
    order.into_iter().filter_map(|id| by_id.remove(&id)).collect()
}

fn report_from_lines(lines: &[ResultLine]) -> (Report, usize) {
    let done: Vec<&ResultLine> = lines.iter().filter(|l| l.status == SampleStatus::Done).collect();
    let min_k = done.iter().map(|l| l.answers.len()).min().unwrap_or(1);
    let k = (min_k > 1).then_some(min_k);
    let records: Vec<EvalRecord> = done.iter().map(|l| l.to_record()).collect();
    (aggregate_report(&records, k), lines.len() - done.len())
}

/// Recomputes every metric from raw result lines. With an OOD results file
/// the report also carries the OOD table and the per-category gap.
pub fn render_report(results_path: &Path, ood_path: Option<&Path>) -> Result<RunReport, RunError> {
    let (lines, _) = read_result_lines(results_path, false)?;
    let (report, errors) = report_from_lines(&dedup_last(lines));
    let ood_report = match ood_path {
        Some(p) => {
            let (ood_lines, _) = read_result_lines(p, false)?;
            Some(report_from_lines(&dedup_last(ood_lines)).0)
        }
        None => None,
    };
    Ok(RunReport { report, ood_report, errors })
}

struct Plan {
    samples: Vec<Sample>,
    exemplars: Vec<Exemplar>,
}

fn plan(cfg: &RunConfig) -> Result<Plan, RunError> {
    let mut samples = load_samples(&cfg.dataset_path)?;
    if cfg.ood {
        for s in &mut samples {
            if !s.is_ood() {
                if let Ok(t) = to_ood_polarity(s) {
                    *s = t;
                }
            }
        }
    }
    let exemplars = match (cfg.strategy.kind.shots(), &cfg.exemplar_path) {
        (Some(shots), Some(path)) => {
            let pool = load_exemplars(path)?;
            let set = select_exemplars(&pool, cfg.benchmark, cfg.seed)?;
            if shots > set.len() {
                return Err(RunError::Config(format!(
                    "{shots} shots requested but the {:?} exemplar set has {}",
                    cfg.benchmark,
                    set.len()
                )));
            }
            set.into_iter().take(shots).collect()
        }
        _ => Vec::new(),
    };
    Ok(Plan { samples, exemplars })
}

#[derive(Debug, Error)]
enum SampleError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("round-1 response is empty")]
    EmptyRound1,
}

struct Outcome {
    line: ResultLine,
    transport: bool,
}

fn millis(r: &CompletionResult) -> u64 {
    r.latency.as_millis() as u64
}

fn prepare(t: Transcript, cfg: &RunConfig, sample: &Sample, decorate: bool) -> Result<Transcript, PromptError> {
    let t = if decorate { apply_decorators(&t, &cfg.strategy.decorators, sample)? } else { t };
    Ok(ablate(t, cfg.ablation))
}

fn evaluate(sample: &Sample, cfg: &RunConfig, exemplars: &[Exemplar], client: &VlmClient) -> Outcome {
    let meta = RequestMeta::for_sample(sample.id.clone());
    let mut line = ResultLine {
        id: sample.id.clone(),
        ood: sample.is_ood(),
        category: sample.category,
        strategy: cfg.strategy.to_string(),
        transcript_round1_hash: String::new(),
        scene_graph: None,
        responses: Vec::new(),
        answers: Vec::new(),
        truth: sample.truth.clone(),
        status: SampleStatus::Done,
        error: None,
        latency_ms: Vec::new(),
        question: sample.question.clone(),
        choices: sample.choices.clone(),
    };

    let result = (|| -> Result<(), SampleError> {
        let kind = cfg.strategy.kind;
        let round1 = match kind {
            StrategyKind::Direct => None,
            StrategyKind::SceneGraphCot => Some(build_scene_graph_step(sample)),
            StrategyKind::OpticalFlowCot => Some(
                build_optical_flow_step(sample).unwrap_or_else(|_| build_scene_graph_step(sample)),
            ),
            StrategyKind::DescribeCot => Some(build_describe_step(sample)),
            StrategyKind::FewShotStructured(_) => {
                Some(build_fewshot(sample, exemplars, Phase::SceneGraphGen, FewShotMode::Structured, None)?)
            }
            StrategyKind::FewShotConversational(_) => {
                Some(build_fewshot(sample, exemplars, Phase::SceneGraphGen, FewShotMode::Conversational, None)?)
            }
        };

        let answer_transcript = match round1 {
            None => {
                let t = prepare(build_direct(sample, cfg.ablation), cfg, sample, true)?;
                line.transcript_round1_hash = t.sha256();
                t
            }
            Some(t) => {
                let t = prepare(t, cfg, sample, true)?;
                line.transcript_round1_hash = t.sha256();
                let r1 = client.complete(&t, &meta)?;
                line.latency_ms.push(millis(&r1));
                let context = if kind == StrategyKind::DescribeCot {
                    Some(r1.text.trim().to_string()).filter(|s| !s.is_empty())
                } else {
                    extract_scene_graph(&r1.text).ok().map(|(text, _)| text)
                };
                let context = context.ok_or(SampleError::EmptyRound1)?;
                line.scene_graph = Some(context.clone());
                let t2 = match kind {
                    StrategyKind::DescribeCot => build_describe_answer(sample, &context)?,
                    StrategyKind::FewShotStructured(_) => {
                        build_fewshot(sample, exemplars, Phase::AnswerGen, FewShotMode::Structured, Some(&context))?
                    }
                    StrategyKind::FewShotConversational(_) => {
                        build_fewshot(sample, exemplars, Phase::AnswerGen, FewShotMode::Conversational, Some(&context))?
                    }
                    _ => build_answer_step(sample, &context)?,
                };
                prepare(t2, cfg, sample, false)?
            }
        };

        let group = client.complete_group(&answer_transcript, cfg.k, &meta)?;
        for r in &group {
            line.latency_ms.push(millis(r));
            line.answers.push(
                extract_answer(&r.text)
                    .map(|raw| normalize_answer(&raw, sample))
                    .unwrap_or_default(),
            );
            line.responses.push(r.text.clone());
        }
        Ok(())
    })();

    let transport = match result {
        Ok(()) => false,
        Err(e) => {
            line.status = SampleStatus::Error;
            line.error = Some(e.to_string());
            line.responses.clear();
            line.answers.clear();
            matches!(&e, SampleError::Client(c) if c.is_transport())
        }
    };
    Outcome { line, transport }
}

/// Runs (or resumes) an evaluation and writes all artifacts into
/// `cfg.output_dir`. Per-sample failures are recorded, not raised.
pub fn run_eval(cfg: &RunConfig, backend: Arc<dyn Backend>) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let plan = plan(cfg)?;
    let client = VlmClient::new(cfg.endpoint.clone(), backend)?;

    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let results_path = cfg.output_dir.join(RESULTS_FILE);
    let manifest_path = cfg.output_dir.join(MANIFEST_FILE);
    let fingerprint = cfg.fingerprint();

    let previous = RunManifest::load(&manifest_path)?;
    if let Some(m) = &previous {
        if m.config_hash != fingerprint {
            return Err(RunError::Config(format!(
                "{} holds a run with a different configuration",
                cfg.output_dir.display()
            )));
        }
    } else if results_path.exists() {
        return Err(RunError::Config(format!(
            "{} exists without a manifest",
            results_path.display()
        )));
    }

    let (existing, torn_at) = read_result_lines(&results_path, true)?;
    if let Some(len) = torn_at {
        let f = OpenOptions::new().write(true).open(&results_path).map_err(io_err(&results_path))?;
        f.set_len(len).map_err(io_err(&results_path))?;
    }
    let finished: HashMap<String, SampleStatus> = existing.iter().map(|l| (l.id.clone(), l.status)).collect();

    let mut manifest = RunManifest {
        harness_version: HARNESS_VERSION.into(),
        catalog_hash: catalog::hash(),
        config_hash: fingerprint,
        config: cfg.clone(),
        started_at: previous.as_ref().map_or_else(unix_now, |m| m.started_at),
        finished_at: None,
        samples: plan
            .samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                status: finished.get(&s.id).copied().unwrap_or(SampleStatus::Pending),
            })
            .collect(),
    };
    manifest.store(&manifest_path)?;

    let pending: Vec<&Sample> = plan.samples.iter().filter(|s| !finished.contains_key(&s.id)).collect();
    let skipped = plan.samples.len() - pending.len();
    let mut out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results_path)
        .map_err(io_err(&results_path))?;

    let mut transport_failures = 0;
    let workers = cfg.endpoint.parallelism.min(pending.len()).max(1);
    let next = AtomicUsize::new(0);
    let write_result = std::thread::scope(|scope| -> Result<(), RunError> {
        let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, client, exemplars) = (&next, &pending, &client, &plan.exemplars);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = pending.get(i) else { break };
                if tx.send((i, evaluate(sample, cfg, exemplars, client))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Single writer, releasing lines in dataset order.
        let mut buffered: BTreeMap<usize, Outcome> = BTreeMap::new();
        let mut expected = 0;
        for (i, outcome) in rx {
            buffered.insert(i, outcome);
            while let Some(o) = buffered.remove(&expected) {
                let mut text = serde_json::to_string(&o.line).expect("result line serializes");
                text.push('\n');
                out.write_all(text.as_bytes()).map_err(io_err(&results_path))?;
                out.flush().map_err(io_err(&results_path))?;
                transport_failures += usize::from(o.transport);
                manifest.mark(&o.line.id, o.line.status);
                manifest.store(&manifest_path)?;
                expected += 1;
            }
        }
        Ok(())
    });
    // On a write failure the receiver is dropped, so workers stop at their next send.
    write_result?;

    let report = render_report(&results_path, None)?;
    fs::write(cfg.output_dir.join(REPORT_JSON_FILE), report.to_json()).map_err(io_err(&cfg.output_dir))?;
    fs::write(cfg.output_dir.join(REPORT_MD_FILE), report.markdown()).map_err(io_err(&cfg.output_dir))?;
    manifest.finished_at = Some(unix_now());
    manifest.store(&manifest_path)?;

    Ok(RunSummary {
        errors: manifest.count(SampleStatus::Error),
        report,
        evaluated: pending.len(),
        skipped,
        transport_failures,
    })
}
