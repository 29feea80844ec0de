//! Chat transcript builders for every prompting strategy and decorator.
//!
//! All builders are pure: identical inputs give byte-identical transcripts.
//! Prompt strings live in [`catalog`] so they can be hashed and documented
//! from one place.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{validate_exemplar, Category, Exemplar, ImageRef, Sample, META_CONTEXT, META_DEPTH_IMAGE};

pub mod catalog {
    pub const SYSTEM_SCENE_GRAPH: &str = "You are an AI assistant proficient in visual and spatial reasoning with tasks involving counting, relations, depth, distances, etc., and generate scene graphs based on images and questions. Think and then answer.";
    pub const PROMPT_SCENE_GRAPH: &str = "For the provided image and its associated question, think and generate a scene graph in JSON format that includes the following: (1) Objects relevant to answering the question, (2) Object attributes relevant to answering the question, (3) Object relationships relevant to answering the question.";
    pub const SYSTEM_ANSWER: &str = "You are an AI assistant proficient in visual and spatial reasoning with tasks involving counting, relations, depth, distances, etc. Think and then answer. Final answer should be provided between <answer> and </answer> tags.";
    pub const PROMPT_ANSWER: &str = "Use the image and scene graph as context and answer the following question.";
    pub const SYSTEM_DIRECT: &str = "You are an AI assistant proficient in visual and spatial reasoning with tasks involving counting, relations, depth, distances, etc. Answer directly without explanation. Final answer should be provided between <answer> and </answer> tags.";
    pub const PROMPT_OPTICAL_FLOW: &str = "The two images are successive frames: the first image, then the second image. In the scene graph, give every object a \"delta_x\" field with its horizontal displacement between the frames: \"left\" if the object moved left, \"stationary\" if the object remained stationary, \"right\" if the object moved right.";
    pub const PROMPT_DESCRIBE: &str = "Describe the objects in this image: their color, shape, size, location, relative location, reflectance and material (glossy is metallic, matte is rubber).";
    pub const PROMPT_DESCRIBE_ANSWER: &str = "Use the image and the object description as context and answer the following question.";
    pub const REQUIREMENT_CHOICE: &str = "Answer with exactly one of the provided choice labels.";
    pub const REQUIREMENT_COUNT: &str = "Answer with a single integer.";
    pub const CUE_SCENE_GRAPH: &str = "Assistant: Scene Graph:";
    pub const CUE_ANSWER: &str = "Assistant: Answer:";

    pub const DECORATOR_POT: &str = "Before answering, write the relevant relations from the scene graph as a short program that applies logical operators over the objects, and evaluate it.";
    pub const DECORATOR_COS: &str = "Encode each visual element and relation as a compact symbolic token (for example obj1 <left-of> obj2) and reason over the symbols.";
    pub const DECORATOR_VOT: &str = "Visualize the spatial layout step by step as a small text grid of the objects before reasoning.";
    pub const DECORATOR_CONFIDENCE: &str = "For each object, attribute and relationship, include a confidence score between 0 and 1.";
    pub const DECORATOR_VLBA: &str = "Give the approximate image coordinates [x, y] of each object, then check that each coordinate maps back to the object it names.";
    pub const DECORATOR_DEPTH: &str = "The last image is a depth map of the scene; brighter regions are nearer to the camera.";

    /// Every prompt string, in a fixed order.
    pub const ALL: &[(&str, &str)] = &[
        ("SYSTEM_SCENE_GRAPH", SYSTEM_SCENE_GRAPH),
        ("PROMPT_SCENE_GRAPH", PROMPT_SCENE_GRAPH),
        ("SYSTEM_ANSWER", SYSTEM_ANSWER),
        ("PROMPT_ANSWER", PROMPT_ANSWER),
        ("SYSTEM_DIRECT", SYSTEM_DIRECT),
        ("PROMPT_OPTICAL_FLOW", PROMPT_OPTICAL_FLOW),
        ("PROMPT_DESCRIBE", PROMPT_DESCRIBE),
        ("PROMPT_DESCRIBE_ANSWER", PROMPT_DESCRIBE_ANSWER),
        ("REQUIREMENT_CHOICE", REQUIREMENT_CHOICE),
        ("REQUIREMENT_COUNT", REQUIREMENT_COUNT),
        ("CUE_SCENE_GRAPH", CUE_SCENE_GRAPH),
        ("CUE_ANSWER", CUE_ANSWER),
        ("DECORATOR_POT", DECORATOR_POT),
        ("DECORATOR_COS", DECORATOR_COS),
        ("DECORATOR_VOT", DECORATOR_VOT),
        ("DECORATOR_CONFIDENCE", DECORATOR_CONFIDENCE),
        ("DECORATOR_VLBA", DECORATOR_VLBA),
        ("DECORATOR_DEPTH", DECORATOR_DEPTH),
    ];

    /// SHA-256 over every catalog entry; recorded in run manifests.
    pub fn hash() -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, text) in ALL {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(text.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Part {
    Text { text: String },
    Image { image: ImageRef },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text { text: s.into() }
    }

    pub fn image(img: ImageRef) -> Self {
        Part::Image { image: img }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Part::Image { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn new(role: Role, parts: Vec<Part>) -> Self {
        ChatMessage { role, parts }
    }

    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage::new(Role::System, vec![Part::text(text)])
    }

    /// Text parts joined by newlines.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image { image } => Some(image),
            Part::Text { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub messages: Vec<ChatMessage>,
}

impl Transcript {
    /// Checks the shape invariants: non-empty parts, no images in system
    /// messages, at most one leading system message, then strict user/assistant
    /// alternation ending on a user turn.
    pub fn check(&self) -> Result<(), String> {
        let mut rest = self.messages.as_slice();
        if let Some(first) = rest.first() {
            if first.role == Role::System {
                if first.parts.iter().any(Part::is_image) {
                    return Err("system message carries an image".into());
                }
                rest = &rest[1..];
            }
        }
        if rest.is_empty() {
            return Err("transcript has no user message".into());
        }
        for (i, m) in rest.iter().enumerate() {
            if m.parts.is_empty() {
                return Err(format!("message {i} has no parts"));
            }
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return Err(format!("message {i} has role {:?}, expected {expected:?}", m.role));
            }
        }
        if rest.last().map(|m| m.role) != Some(Role::User) {
            return Err("final message is not a user turn".into());
        }
        Ok(())
    }

    pub fn system_text(&self) -> Option<String> {
        self.messages.first().filter(|m| m.role == Role::System).map(ChatMessage::text)
    }

    pub fn last_user(&self) -> &ChatMessage {
        self.messages.last().expect("builders never emit empty transcripts")
    }

    /// All text of all messages, newline joined.
    pub fn full_text(&self) -> String {
        self.messages.iter().map(ChatMessage::text).collect::<Vec<_>>().join("\n")
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(|m| m.images().count()).sum()
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("transcript serialization is infallible")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Decorator {
    Pot,
    Cos,
    Vot,
    ConfidenceScores,
    Vlba,
    DepthMapAttachment,
}

impl Decorator {
    pub const ALL: [Decorator; 6] = [
        Decorator::Pot,
        Decorator::Cos,
        Decorator::Vot,
        Decorator::ConfidenceScores,
        Decorator::Vlba,
        Decorator::DepthMapAttachment,
    ];

    pub fn instruction(self) -> &'static str {
        match self {
            Decorator::Pot => catalog::DECORATOR_POT,
            Decorator::Cos => catalog::DECORATOR_COS,
            Decorator::Vot => catalog::DECORATOR_VOT,
            Decorator::ConfidenceScores => catalog::DECORATOR_CONFIDENCE,
            Decorator::Vlba => catalog::DECORATOR_VLBA,
            Decorator::DepthMapAttachment => catalog::DECORATOR_DEPTH,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Decorator::Pot => "pot",
            Decorator::Cos => "cos",
            Decorator::Vot => "vot",
            Decorator::ConfidenceScores => "confidence",
            Decorator::Vlba => "vlba",
            Decorator::DepthMapAttachment => "depth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    Direct,
    SceneGraphCot,
    OpticalFlowCot,
    DescribeCot,
    FewShotStructured(usize),
    FewShotConversational(usize),
}

impl StrategyKind {
    pub fn is_two_step(self) -> bool {
        !matches!(self, StrategyKind::Direct)
    }

    pub fn shots(self) -> Option<usize> {
        match self {
            StrategyKind::FewShotStructured(k) | StrategyKind::FewShotConversational(k) => Some(k),
            _ => None,
        }
    }
}

/// A base strategy plus an ordered decorator set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub decorators: BTreeSet<Decorator>,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Strategy { kind, decorators: BTreeSet::new() }
    }

    pub fn with(mut self, d: Decorator) -> Self {
        self.decorators.insert(d);
        self
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StrategyKind::Direct => f.write_str("direct")?,
            StrategyKind::SceneGraphCot => f.write_str("scene-graph-cot")?,
            StrategyKind::OpticalFlowCot => f.write_str("optical-flow-cot")?,
            StrategyKind::DescribeCot => f.write_str("describe-cot")?,
            StrategyKind::FewShotStructured(k) => write!(f, "few-shot-structured:{k}")?,
            StrategyKind::FewShotConversational(k) => write!(f, "few-shot-conversational:{k}")?,
        }
        for d in &self.decorators {
            write!(f, "+{}", d.slug())?;
        }
        Ok(())
    }
}

impl FromStr for Strategy {
    type Err = String;

    /// Parses `base[:k][+decorator...]`, e.g. `few-shot-conversational:4+depth`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut pieces = s.split('+');
        let base = pieces.next().unwrap_or_default().trim().to_ascii_lowercase();
        let (name, shots) = match base.split_once(':') {
            Some((n, k)) => {
                let k: usize = k.parse().map_err(|_| format!("invalid shot count `{k}`"))?;
                (n.to_string(), Some(k))
            }
            None => (base.clone(), None),
        };
        let few_shot = |k: Option<usize>| -> Result<usize, String> {
            match k {
                Some(0) => Err("few-shot strategies need k >= 1".into()),
                Some(k) => Ok(k),
                None => Ok(4),
            }
        };
        let kind = match name.as_str() {
            "direct" | "no-thinking" => StrategyKind::Direct,
            "scene-graph-cot" | "sg-cot" => StrategyKind::SceneGraphCot,
            "optical-flow-cot" => StrategyKind::OpticalFlowCot,
            "describe-cot" => StrategyKind::DescribeCot,
            "few-shot-structured" => StrategyKind::FewShotStructured(few_shot(shots)?),
            "few-shot-conversational" => StrategyKind::FewShotConversational(few_shot(shots)?),
            other => return Err(format!("unknown strategy `{other}`")),
        };
        if shots.is_some() && kind.shots().is_none() {
            return Err(format!("strategy `{name}` takes no shot count"));
        }
        let mut strategy = Strategy::new(kind);
        for piece in pieces {
            let d = Decorator::ALL
                .into_iter()
                .find(|d| d.slug() == piece.trim().to_ascii_lowercase())
                .ok_or_else(|| format!("unknown decorator `{piece}`"))?;
            strategy.decorators.insert(d);
        }
        Ok(strategy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Images plus any auxiliary context text.
    #[default]
    WithImage,
    /// All image parts removed.
    PromptOnly,
    /// Images and question only, auxiliary context dropped.
    QuestionOnly,
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "with-image" | "withimage" => Ok(AblationMode::WithImage),
            "prompt-only" | "promptonly" => Ok(AblationMode::PromptOnly),
            "question-only" | "questiononly" => Ok(AblationMode::QuestionOnly),
            other => Err(format!("unknown ablation mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SceneGraphGen,
    AnswerGen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FewShotMode {
    Structured,
    Conversational,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("scene graph text is empty")]
    EmptySceneGraph,
    #[error("optical flow prompting needs a 2-image motion sample")]
    NotImagePair,
    #[error("description text is empty")]
    EmptyDescription,
    #[error("few-shot prompting needs at least one exemplar")]
    EmptyExemplars,
    #[error("invalid exemplar `{id}`: {report}")]
    InvalidExemplar { id: String, report: String },
    #[error("depth-map decorator needs meta[\"{}\"]", META_DEPTH_IMAGE)]
    MissingDepthImage,
}

/// "(A) text (B) text" on one line.
pub fn render_choices(sample: &Sample) -> Option<String> {
    sample.choices.as_ref().filter(|c| !c.is_empty()).map(|choices| {
        choices
            .iter()
            .map(|c| format!("({}) {}", c.label, c.text))
            .collect::<Vec<_>>()
            .join(" ")
    })
}

fn question_block(sample: &Sample) -> String {
    let mut s = format!("Question: {}", sample.question);
    if let Some(c) = render_choices(sample) {
        s.push('\n');
        s.push_str(&c);
    }
    s
}

fn evaluation_requirement(sample: &Sample) -> Option<&'static str> {
    if sample.choices.as_ref().is_some_and(|c| !c.is_empty()) {
        Some(catalog::REQUIREMENT_CHOICE)
    } else if sample.category == Category::Counting {
        Some(catalog::REQUIREMENT_COUNT)
    } else {
        None
    }
}

fn with_requirement(base: &str, sample: &Sample) -> String {
    match evaluation_requirement(sample) {
        Some(req) => format!("{base} {req}"),
        None => base.to_string(),
    }
}

fn image_parts(images: &[ImageRef]) -> impl Iterator<Item = Part> + '_ {
    images.iter().cloned().map(Part::image)
}

fn user(images: &[ImageRef], text: String) -> ChatMessage {
    let mut parts: Vec<Part> = image_parts(images).collect();
    parts.push(Part::text(text));
    ChatMessage::new(Role::User, parts)
}

fn transcript(messages: Vec<ChatMessage>) -> Transcript {
    let t = Transcript { messages };
    debug_assert_eq!(t.check(), Ok(()));
    t
}

/// Removes every image part for [`AblationMode::PromptOnly`]; other modes pass through.
pub fn ablate(mut t: Transcript, mode: AblationMode) -> Transcript {
    if mode == AblationMode::PromptOnly {
        for m in &mut t.messages {
            m.parts.retain(|p| !p.is_image());
        }
    }
    t
}

/// Answer-only prompt with no reasoning instruction.
pub fn build_direct(sample: &Sample, ablation: AblationMode) -> Transcript {
    let mut sections = Vec::new();
    if ablation != AblationMode::QuestionOnly {
        if let Some(ctx) = sample.meta.get(META_CONTEXT).filter(|c| !c.trim().is_empty()) {
            sections.push(format!("Context: {ctx}"));
        }
    }
    sections.push(question_block(sample));
    let t = transcript(vec![
        ChatMessage::system(with_requirement(catalog::SYSTEM_DIRECT, sample)),
        user(&sample.images, sections.join("\n\n")),
    ]);
    ablate(t, ablation)
}

/// Round one of scene-graph prompting: ask for the three-part JSON graph.
pub fn build_scene_graph_step(sample: &Sample) -> Transcript {
    transcript(vec![
        ChatMessage::system(catalog::SYSTEM_SCENE_GRAPH),
        user(
            &sample.images,
            format!("{}\n\n{}", question_block(sample), catalog::PROMPT_SCENE_GRAPH),
        ),
    ])
}

/// Round two: answer with the extracted scene graph as context.
pub fn build_answer_step(sample: &Sample, scene_graph_text: &str) -> Result<Transcript, PromptError> {
    if scene_graph_text.trim().is_empty() {
        return Err(PromptError::EmptySceneGraph);
    }
    Ok(transcript(vec![
        ChatMessage::system(with_requirement(catalog::SYSTEM_ANSWER, sample)),
        user(
            &sample.images,
            format!(
                "Scene Graph:\n{scene_graph_text}\n\n{}\n{}",
                catalog::PROMPT_ANSWER,
                question_block(sample)
            ),
        ),
    ]))
}

/// Scene-graph round for image pairs, asking for a per-object `delta_x`.
pub fn build_optical_flow_step(sample: &Sample) -> Result<Transcript, PromptError> {
    if sample.images.len() != 2 || !sample.category.is_motion() {
        return Err(PromptError::NotImagePair);
    }
    Ok(transcript(vec![
        ChatMessage::system(catalog::SYSTEM_SCENE_GRAPH),
        user(
            &sample.images,
            format!(
                "{}\n\n{}\n{}",
                question_block(sample),
                catalog::PROMPT_SCENE_GRAPH,
                catalog::PROMPT_OPTICAL_FLOW
            ),
        ),
    ]))
}

pub fn build_describe_step(sample: &Sample) -> Transcript {
    transcript(vec![user(&sample.images, catalog::PROMPT_DESCRIBE.to_string())])
}

pub fn build_describe_answer(sample: &Sample, description: &str) -> Result<Transcript, PromptError> {
    if description.trim().is_empty() {
        return Err(PromptError::EmptyDescription);
    }
    Ok(transcript(vec![
        ChatMessage::system(with_requirement(catalog::SYSTEM_ANSWER, sample)),
        user(
            &sample.images,
            format!(
                "Description:\n{description}\n\n{}\n{}",
                catalog::PROMPT_DESCRIBE_ANSWER,
                question_block(sample)
            ),
        ),
    ]))
}

fn exemplar_answer_line(answer: &str) -> String {
    format!("Answer: <answer>{answer}</answer>")
}

fn exemplar_solution(ex: &Exemplar, phase: Phase) -> String {
    let mut lines = Vec::with_capacity(3);
    if !ex.reasoning.trim().is_empty() {
        lines.push(format!("Reasoning: {}", ex.reasoning));
    }
    lines.push(format!("Scene Graph: {}", ex.scene_graph));
    if phase == Phase::AnswerGen {
        lines.push(exemplar_answer_line(&ex.answer));
    }
    lines.join("\n")
}

/// Few-shot prompt in either layout.
///
/// `Structured` packs every exemplar into one user message; in the
/// scene-graph phase exemplar answers are never rendered. `Conversational`
/// replays each exemplar as a user turn and a pre-filled assistant turn and
/// closes with the scene-graph or answer cue. The answer phase needs the
/// scene graph produced by the first round.
pub fn build_fewshot(
    sample: &Sample,
    exemplars: &[Exemplar],
    phase: Phase,
    mode: FewShotMode,
    scene_graph: Option<&str>,
) -> Result<Transcript, PromptError> {
    if exemplars.is_empty() {
        return Err(PromptError::EmptyExemplars);
    }
    for ex in exemplars {
        let report = validate_exemplar(ex);
        if !report.is_ok() {
            return Err(PromptError::InvalidExemplar { id: ex.sample.id.clone(), report: report.to_string() });
        }
    }
    let sg = match phase {
        Phase::SceneGraphGen => None,
        Phase::AnswerGen => Some(scene_graph.filter(|s| !s.trim().is_empty()).ok_or(PromptError::EmptySceneGraph)?),
    };
    let system = match phase {
        Phase::SceneGraphGen => ChatMessage::system(catalog::SYSTEM_SCENE_GRAPH),
        Phase::AnswerGen => ChatMessage::system(with_requirement(catalog::SYSTEM_ANSWER, sample)),
    };

    let messages = match mode {
        FewShotMode::Structured => {
            let mut parts = Vec::new();
            for (i, ex) in exemplars.iter().enumerate() {
                parts.push(Part::text(format!("Example {}:\nImage:", i + 1)));
                parts.extend(image_parts(&ex.sample.images));
                parts.push(Part::text(format!(
                    "{}\n{}",
                    question_block(&ex.sample),
                    exemplar_solution(ex, phase)
                )));
            }
            parts.push(Part::text("Now the target.\nImage:"));
            parts.extend(image_parts(&sample.images));
            let request = match sg {
                None => format!("{}\n\n{}", question_block(sample), catalog::PROMPT_SCENE_GRAPH),
                Some(sg) => format!(
                    "Scene Graph: {sg}\n\n{}\n{}",
                    catalog::PROMPT_ANSWER,
                    question_block(sample)
                ),
            };
            parts.push(Part::text(request));
            vec![system, ChatMessage::new(Role::User, parts)]
        }
        FewShotMode::Conversational => {
            let mut messages = vec![system];
            for ex in exemplars {
                let mut parts = vec![Part::text("Image:")];
                parts.extend(image_parts(&ex.sample.images));
                parts.push(Part::text(question_block(&ex.sample)));
                messages.push(ChatMessage::new(Role::User, parts));
                messages.push(ChatMessage::new(Role::Assistant, vec![Part::text(exemplar_solution(ex, phase))]));
            }
            let mut parts = vec![Part::text("Image:")];
            parts.extend(image_parts(&sample.images));
            let closing = match sg {
                None => format!("{}\n{}", question_block(sample), catalog::CUE_SCENE_GRAPH),
                Some(sg) => format!(
                    "{}\nScene Graph: {sg}\n{}",
                    question_block(sample),
                    catalog::CUE_ANSWER
                ),
            };
            parts.push(Part::text(closing));
            messages.push(ChatMessage::new(Role::User, parts));
            messages
        }
    };
    Ok(transcript(messages))
}

/// Appends each decorator's instruction (and the depth image, if requested)
/// to the last user message, in enumeration order. Instructions already
/// present are not repeated.
pub fn apply_decorators(
    t: &Transcript,
    decorators: &BTreeSet<Decorator>,
    sample: &Sample,
) -> Result<Transcript, PromptError> {
    let depth = if decorators.contains(&Decorator::DepthMapAttachment) {
        Some(
            sample
                .meta
                .get(META_DEPTH_IMAGE)
                .filter(|d| !d.is_empty())
                .map(|d| ImageRef::new(d.clone()))
                .ok_or(PromptError::MissingDepthImage)?,
        )
    } else {
        None
    };
    let mut out = t.clone();
    let last = out.messages.last_mut().expect("transcripts are non-empty");
    for d in decorators {
        if *d == Decorator::DepthMapAttachment {
            if let Some(img) = &depth {
                if !last.images().any(|i| i == img) {
                    last.parts.push(Part::image(img.clone()));
                }
            }
        }
        if !last.text().contains(d.instruction()) {
            last.parts.push(Part::text(d.instruction()));
        }
    }
    Ok(out)
}
