//! Evaluation harness for spatial reasoning with vision-language models.

pub mod dataset;
pub mod extraction;
pub mod grpo;
pub mod metrics;
pub mod prompting;
pub mod vlm_client;
pub mod runner;

pub use dataset::{Benchmark, Category, Choice, DatasetError, Exemplar, ImageRef, Sample};
pub use extraction::{extract_answer, extract_scene_graph, normalize_answer, parse_scene_graph, ExtractionTier, SceneGraph};
pub use grpo::{GrpoConfig, GrpoError, Group, GroupSample};
pub use metrics::{aggregate_report, close_call_pct, id_ood_gap, pass_at_k, EvalRecord, MetricsError, Ratio, Report, Score};
pub use prompting::{AblationMode, ChatMessage, Decorator, FewShotMode, Part, Phase, PromptError, Role, Strategy, StrategyKind, Transcript};
pub use runner::{render_report, run_eval, ResultLine, RunConfig, RunError, RunManifest, RunReport, RunSummary};
pub use vlm_client::{Backend, ClientError, CompletionResult, EndpointConfig, RequestMeta, ScriptedStub, VlmClient};
