//! Benchmark schema, JSONL ingestion, few-shot exemplar store and the
//! out-of-distribution polarity transform.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Meta key set on samples produced by [`to_ood_polarity`].
pub const META_OOD: &str = "ood_polarity";
/// Meta key holding the pre-transform question, used to invert the transform exactly.
pub const META_OOD_SOURCE: &str = "ood_source_question";
/// Meta key naming a precomputed depth image attached by the depth-map decorator.
pub const META_DEPTH_IMAGE: &str = "depth_image";
/// Meta key holding auxiliary scene description text used by the baseline ablations.
pub const META_CONTEXT: &str = "context";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Counting,
    Relation,
    Depth,
    Distance,
    EgoMovement,
    ObjectMovement,
    Other,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Counting,
        Category::Relation,
        Category::Depth,
        Category::Distance,
        Category::EgoMovement,
        Category::ObjectMovement,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Counting => "Counting",
            Category::Relation => "Relation",
            Category::Depth => "Depth",
            Category::Distance => "Distance",
            Category::EgoMovement => "EgoMovement",
            Category::ObjectMovement => "ObjectMovement",
            Category::Other => "Other",
        }
    }

    pub fn is_motion(self) -> bool {
        matches!(self, Category::EgoMovement | Category::ObjectMovement)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

/// An image reference: a filesystem path or a `data:image/<fmt>;base64,` URI.
/// Images are opaque to the harness.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        ImageRef(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_data_uri(&self) -> bool {
        self.0.starts_with("data:")
    }

    /// `Some(format)` for a well-formed `data:image/<fmt>;base64,<payload>` URI.
    pub fn data_uri_format(&self) -> Option<&str> {
        let rest = self.0.strip_prefix("data:image/")?;
        let (fmt, payload) = rest.split_once(";base64,")?;
        if fmt.is_empty() || payload.is_empty() || !fmt.chars().all(|c| c.is_ascii_alphanumeric() || c == '+' || c == '-' || c == '.') {
            return None;
        }
        Some(fmt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

impl Choice {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Choice { label: label.into(), text: text.into() }
    }
}

/// One benchmark item. Field order is the canonical JSONL key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub images: Vec<ImageRef>,
    pub question: String,
    #[serde(default)]
    pub choices: Option<Vec<Choice>>,
    pub truth: String,
    pub category: Category,
    pub source: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn choice_labels(&self) -> impl Iterator<Item = &str> {
        self.choices.iter().flatten().map(|c| c.label.as_str())
    }

    pub fn choice_text(&self, label: &str) -> Option<&str> {
        self.choices
            .iter()
            .flatten()
            .find(|c| c.label == label)
            .map(|c| c.text.as_str())
    }

    pub fn is_ood(&self) -> bool {
        self.meta.get(META_OOD).map(String::as_str) == Some("true")
    }
}

/// A worked few-shot example. Serialized as the sample object plus
/// `reasoning`, `scene_graph` and `answer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    #[serde(flatten)]
    pub sample: Sample,
    #[serde(default)]
    pub reasoning: String,
    pub scene_graph: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.violations.push(Violation { field, message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("question contains no polarity phrase from the swap table")]
    NoPolarityPhrase,
    #[error("polarity transform needs exactly 2 choices, found {0}")]
    NotBinary(usize),
    #[error("polarity transform applies to Depth/Distance samples, got {0}")]
    UnsupportedCategory(Category),
    #[error("exemplar pool has no {0} exemplar")]
    MissingCategory(Category),
}

fn is_count(s: &str) -> bool {
    let s = s.trim();
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && s.parse::<u64>().is_ok()
}

/// Lists every violated sample invariant; an empty report means the sample is valid.
pub fn validate(sample: &Sample) -> ValidationReport {
    let mut report = ValidationReport::default();
    if sample.id.trim().is_empty() {
        report.push("id", "empty id");
    }
    for img in &sample.images {
        if img.as_str().is_empty() {
            report.push("images", "empty image reference");
        } else if img.is_data_uri() && img.data_uri_format().is_none() {
            report.push("images", "malformed data URI");
        }
    }
    if sample.category.is_motion() && sample.images.len() != 2 {
        report.push(
            "images",
            format!("image-pair required for {} (found {})", sample.category, sample.images.len()),
        );
    }
    match &sample.choices {
        Some(choices) => {
            let mut seen = HashSet::new();
            for c in choices {
                if c.label.trim().is_empty() {
                    report.push("choices", "empty choice label");
                }
                if !seen.insert(c.label.as_str()) {
                    report.push("choices", format!("duplicate choice label `{}`", c.label));
                }
            }
            let hits = choices.iter().filter(|c| c.label == sample.truth).count();
            if hits != 1 {
                report.push("truth", format!("truth `{}` is not one of the choice labels", sample.truth));
            } else if sample.category == Category::Counting {
                let text = sample.choice_text(&sample.truth).unwrap_or_default();
                if !is_count(text) {
                    report.push("truth", format!("non-integer count `{text}` behind label `{}`", sample.truth));
                }
            }
        }
        None => {
            if sample.category == Category::Counting && !is_count(&sample.truth) {
                report.push("truth", format!("non-integer count `{}`", sample.truth));
            }
        }
    }
    report
}

/// Sample invariants plus the exemplar-specific ones.
pub fn validate_exemplar(ex: &Exemplar) -> ValidationReport {
    let mut report = validate(&ex.sample);
    if ex.scene_graph.trim().is_empty() {
        report.push("scene_graph", "empty scene graph");
    }
    let probe = Sample { truth: ex.answer.clone(), ..ex.sample.clone() };
    for v in validate(&probe).violations {
        if v.field == "truth" {
            report.push("answer", v.message);
        }
    }
    report
}

fn read_jsonl<T, F>(path: &Path, mut check: F) -> Result<Vec<T>, DatasetError>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T, usize) -> Result<(), DatasetError>,
{
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            line: line_no,
            field: serde_field_hint(&e.to_string()),
            message: e.to_string(),
        })?;
        check(&record, line_no)?;
        out.push(record);
    }
    Ok(out)
}

// serde_json messages name the field in backticks ("missing field `truth`").
fn serde_field_hint(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<record>").to_string()
}

fn first_violation(report: &ValidationReport, line: usize) -> Result<(), DatasetError> {
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(DatasetError::Schema {
            line,
            field: v.field.to_string(),
            message: report.to_string(),
        }),
    }
}

/// Loads canonical JSONL, rejecting the first record that fails validation
/// or repeats an earlier id. Blank lines are skipped.
pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>, DatasetError> {
    let mut ids = HashSet::new();
    read_jsonl(path.as_ref(), |s: &Sample, line| {
        first_violation(&validate(s), line)?;
        if !ids.insert(s.id.clone()) {
            return Err(DatasetError::Schema {
                line,
                field: "id".into(),
                message: format!("duplicate id `{}`", s.id),
            });
        }
        Ok(())
    })
}

pub fn load_exemplars(path: impl AsRef<Path>) -> Result<Vec<Exemplar>, DatasetError> {
    read_jsonl(path.as_ref(), |e: &Exemplar, line| first_violation(&validate_exemplar(e), line))
}

/// Reads every line of a dataset file and validates it without stopping at
/// the first failure. Returns `(line, report)` pairs for failing lines.
pub fn validate_file(path: impl AsRef<Path>) -> Result<Vec<(usize, String)>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut failures = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Sample>(line) {
            Err(e) => failures.push((idx + 1, e.to_string())),
            Ok(s) => {
                let report = validate(&s);
                if !report.is_ok() {
                    failures.push((idx + 1, report.to_string()));
                }
                if !ids.insert(s.id.clone()) {
                    failures.push((idx + 1, format!("id: duplicate id `{}`", s.id)));
                }
            }
        }
    }
    Ok(failures)
}

pub fn to_canonical_line(sample: &Sample) -> String {
    serde_json::to_string(sample).expect("sample serialization is infallible")
}

/// Writes samples as canonical JSONL: fixed key order, minimal whitespace, one per line.
pub fn write_samples<W: Write>(mut out: W, samples: &[Sample]) -> std::io::Result<()> {
    for s in samples {
        writeln!(out, "{}", to_canonical_line(s))?;
    }
    Ok(())
}

// Longest phrases first so compound forms win over their prefixes.
const POLARITY_SWAPS: &[(&str, &str)] = &[
    ("closest to", "farthest from"),
    ("farthest from", "closest to"),
    ("closer to", "farther from"),
    ("farther from", "closer to"),
    ("in front of", "behind"),
    ("close to", "far from"),
    ("far from", "close to"),
    ("farthest", "closest"),
    ("closest", "farthest"),
    ("farther", "closer"),
    ("closer", "farther"),
    ("nearer", "farther"),
    ("behind", "in front of"),
];

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

fn match_case(original: &str, replacement: &str) -> String {
    let upper = original.chars().next().is_some_and(char::is_uppercase);
    if !upper {
        return replacement.to_string();
    }
    let mut chars = replacement.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Applies the polarity swap table left to right with longest match first,
/// on word boundaries. Returns `None` when no phrase occurs.
pub fn swap_polarity(question: &str) -> Option<String> {
    let bytes = question.as_bytes();
    let lower = question.to_ascii_lowercase();
    let mut out = String::with_capacity(question.len() + 8);
    let mut i = 0;
    let mut swapped = false;
    while i < bytes.len() {
        let at_boundary = i == 0 || !is_word_byte(bytes[i - 1]);
        let hit = at_boundary
            .then(|| {
                POLARITY_SWAPS.iter().find(|(from, _)| {
                    let end = i + from.len();
                    lower[i..].starts_with(from) && (end == bytes.len() || !is_word_byte(bytes[end]))
                })
            })
            .flatten();
        match hit {
            Some((from, to)) => {
                out.push_str(&match_case(&question[i..i + from.len()], to));
                i += from.len();
                swapped = true;
            }
            None => {
                let ch = question[i..].chars().next().expect("in-bounds char");
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    swapped.then_some(out)
}

/// Rewrites a binary Depth/Distance question to the opposite spatial polarity
/// and flips the truth label; images are untouched.
///
/// Applying it to its own output restores the original sample exactly
/// (the source question is kept in meta so one-way phrases like "nearer" invert too).
pub fn to_ood_polarity(sample: &Sample) -> Result<Sample, DatasetError> {
    if !matches!(sample.category, Category::Depth | Category::Distance) {
        return Err(DatasetError::UnsupportedCategory(sample.category));
    }
    let choices = sample.choices.as_deref().unwrap_or_default();
    if choices.len() != 2 {
        return Err(DatasetError::NotBinary(choices.len()));
    }
    let swapped = swap_polarity(&sample.question).ok_or(DatasetError::NoPolarityPhrase)?;
    let truth = choices
        .iter()
        .find(|c| c.label != sample.truth)
        .map(|c| c.label.clone())
        .ok_or(DatasetError::NotBinary(choices.len()))?;

    let mut out = sample.clone();
    out.truth = truth;
    if sample.is_ood() {
        // Inverse direction: restore the recorded source question when it is
        // consistent with the current one.
        match sample.meta.get(META_OOD_SOURCE) {
            Some(src) if swap_polarity(src).as_deref() == Some(sample.question.as_str()) => {
                out.question = src.clone();
            }
            _ => out.question = swapped,
        }
        out.meta.remove(META_OOD);
        out.meta.remove(META_OOD_SOURCE);
    } else {
        out.question = swapped;
        out.meta.insert(META_OOD.into(), "true".into());
        out.meta.insert(META_OOD_SOURCE.into(), sample.question.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Cvbench,
    Sat,
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cvbench" | "cv-bench" => Ok(Benchmark::Cvbench),
            "sat" => Ok(Benchmark::Sat),
            other => Err(format!("unknown benchmark `{other}` (expected cvbench or sat)")),
        }
    }
}

const CORE_CATEGORIES: [Category; 4] = [
    Category::Counting,
    Category::Relation,
    Category::Depth,
    Category::Distance,
];

/// Picks one exemplar per static category (Counting, Relation, Depth,
/// Distance), plus one motion exemplar for SAT. Same-category ties are
/// broken by a seeded uniform draw.
pub fn select_exemplars(
    pool: &[Exemplar],
    benchmark: Benchmark,
    seed: u64,
) -> Result<Vec<Exemplar>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |pred: &dyn Fn(Category) -> bool, missing: Category| {
        let candidates: Vec<&Exemplar> = pool.iter().filter(|e| pred(e.sample.category)).collect();
        if candidates.is_empty() {
            return Err(DatasetError::MissingCategory(missing));
        }
        Ok(candidates[rng.gen_range(0..candidates.len())].clone())
    };
    let mut out = Vec::with_capacity(5);
    for cat in CORE_CATEGORIES {
        out.push(pick(&|c| c == cat, cat)?);
    }
    if benchmark == Benchmark::Sat {
        out.push(pick(&Category::is_motion, Category::EgoMovement)?);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn sample(id: &str, category: Category) -> Sample {
        let (images, question, choices, truth) = match category {
            Category::Counting => (1, "How many cubes are there?", None, "3"),
            Category::EgoMovement | Category::ObjectMovement => (
                2,
                "Did the camera move left or right?",
                Some(vec![Choice::new("A", "left"), Choice::new("B", "right")]),
                "A",
            ),
            _ => (
                1,
                "Which object is closer to the camera?",
                Some(vec![Choice::new("A", "the lamp"), Choice::new("B", "the chair")]),
                "A",
            ),
        };
        Sample {
            id: id.into(),
            images: (0..images).map(|i| ImageRef::new(format!("img/{id}_{i}.png"))).collect(),
            question: question.into(),
            choices,
            truth: truth.into(),
            category,
            source: "test".into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn exemplar(id: &str, category: Category) -> Exemplar {
        let sample = sample(id, category);
        let answer = sample.truth.clone();
        Exemplar {
            sample,
            reasoning: format!("reasoning for {id}"),
            scene_graph: format!("{{\"objects\":[\"{id}\"]}}"),
            answer,
        }
    }
}
