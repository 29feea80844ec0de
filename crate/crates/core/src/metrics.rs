//! Exact-match accuracy, Pass@k, close-call percentage, per-category reports
//! and the ID-OOD gap. Fractions are computed as integer ratios.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Category, Choice};
use crate::extraction::parse_count;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("record `{id}` has {have} predictions, Pass@{need} needs {need}")]
    InsufficientPredictions { id: String, have: usize, need: usize },
    #[error("record `{0}` is not a Counting record")]
    NonCountingRecord(String),
    #[error("report has no {0} row")]
    MissingCategory(Category),
}

/// One scored sample: a group of normalized predictions against the truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub category: Category,
    pub strategy: String,
    pub predictions: Vec<String>,
    pub truth: String,
    pub ood: bool,
    /// Lets multiple-choice counting records resolve labels to counts.
    #[serde(default)]
    pub choices: Option<Vec<Choice>>,
}

impl EvalRecord {
    pub fn first_correct(&self) -> bool {
        self.predictions.first() == Some(&self.truth)
    }

    fn resolve<'a>(&'a self, answer: &'a str) -> &'a str {
        self.choices
            .iter()
            .flatten()
            .find(|c| c.label == answer)
            .map(|c| c.text.as_str())
            .unwrap_or(answer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Ratio { num, den }
    }

    /// `num / den`, with 0/0 read as 0.
    pub fn fraction(self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

/// Share of records where any of the first `k` predictions equals the truth.
pub fn pass_at_k(records: &[EvalRecord], k: usize) -> Result<Ratio, MetricsError> {
    pass_at_k_of(records, k)
}

fn pass_at_k_of<'a>(records: impl IntoIterator<Item = &'a EvalRecord>, k: usize) -> Result<Ratio, MetricsError> {
    let k = k.max(1);
    let (mut hits, mut total) = (0, 0);
    for r in records {
        total += 1;
        if r.predictions.len() < k {
            return Err(MetricsError::InsufficientPredictions {
                id: r.sample_id.clone(),
                have: r.predictions.len(),
                need: k,
            });
        }
        if r.predictions[..k].contains(&r.truth) {
            hits += 1;
        }
    }
    Ok(Ratio::new(hits, total))
}

/// Among wrong first predictions, the share off by exactly one. `None` when
/// nothing is wrong. Unparseable predictions count as wrong and not close.
pub fn close_call_pct(records: &[EvalRecord]) -> Result<Option<Ratio>, MetricsError> {
    close_call_of(records)
}

fn close_call_of<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Result<Option<Ratio>, MetricsError> {
    let mut wrong = 0;
    let mut close = 0;
    for r in records {
        if r.category != Category::Counting {
            return Err(MetricsError::NonCountingRecord(r.sample_id.clone()));
        }
        if r.first_correct() {
            continue;
        }
        wrong += 1;
        let predicted = r.predictions.first().and_then(|p| parse_count(r.resolve(p)));
        let truth = parse_count(r.resolve(&r.truth));
        if let (Some(p), Some(t)) = (predicted, truth) {
            if p.abs_diff(t) == 1 {
                close += 1;
            }
        }
    }
    Ok((wrong > 0).then(|| Ratio::new(close, wrong)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub n: usize,
    pub pass1: f64,
    pub pass1_hits: u64,
    pub passk: Option<f64>,
    pub passk_hits: Option<u64>,
    pub close_call: Option<f64>,
    pub close_call_counts: Option<(u64, u64)>,
}

impl Score {
    /// A row carrying only a Pass@1 value, e.g. a reported figure.
    pub fn from_pass1(pass1: f64) -> Self {
        Score {
            n: 0,
            pass1,
            pass1_hits: 0,
            passk: None,
            passk_hits: None,
            close_call: None,
            close_call_counts: None,
        }
    }

    fn compute(records: &[&EvalRecord], k: Option<usize>, with_close_call: bool) -> Score {
        let rows = || records.iter().copied();
        let pass1 = pass_at_k_of(rows(), 1).unwrap_or(Ratio::new(0, records.len() as u64));
        let passk = k.and_then(|k| pass_at_k_of(rows(), k).ok());
        let close = if with_close_call { close_call_of(rows()).ok().flatten() } else { None };
        Score {
            n: records.len(),
            pass1: pass1.fraction(),
            pass1_hits: pass1.num,
            passk: passk.map(Ratio::fraction),
            passk_hits: passk.map(|r| r.num),
            close_call: close.map(Ratio::fraction),
            close_call_counts: close.map(|r| (r.num, r.den)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub k: Option<usize>,
    pub categories: BTreeMap<Category, Score>,
    pub total: Score,
}

impl Report {
    pub fn get(&self, category: Category) -> Option<&Score> {
        self.categories.get(&category)
    }
}

/// Per-category and record-weighted total scores. Every category gets a row,
/// possibly with `n = 0`. Pass@k is filled in where every record has at
/// least `k` predictions; close-call only for Counting.
pub fn aggregate_report(records: &[EvalRecord], k: Option<usize>) -> Report {
    let categories = Category::ALL
        .into_iter()
        .map(|cat| {
            let rows: Vec<&EvalRecord> = records.iter().filter(|r| r.category == cat).collect();
            (cat, Score::compute(&rows, k, cat == Category::Counting))
        })
        .collect();
    let all: Vec<&EvalRecord> = records.iter().collect();
    Report { k, categories, total: Score::compute(&all, k, false) }
}

/// `pass1(id) - pass1(ood)` for one category; negative when OOD is higher.
pub fn id_ood_gap(id: &Report, ood: &Report, category: Category) -> Result<f64, MetricsError> {
    let a = id.get(category).ok_or(MetricsError::MissingCategory(category))?;
    let b = ood.get(category).ok_or(MetricsError::MissingCategory(category))?;
    Ok(a.pass1 - b.pass1)
}

pub fn percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

fn opt_percent(f: Option<f64>) -> String {
    f.map(percent).unwrap_or_else(|| "-".to_string())
}

/// Markdown table `Category | Pass@1 | Pass@k | Close-Call | n` plus a Total
/// row. Only populated categories are listed unless the report is empty.
pub fn render_markdown(report: &Report) -> String {
    let passk_header = report.k.map(|k| format!("Pass@{k}")).unwrap_or_else(|| "Pass@k".into());
    let mut out = format!("| Category | Pass@1 | {passk_header} | Close-Call | n |\n|---|---|---|---|---|\n");
    let show_all = report.total.n == 0;
    let mut row = |name: &str, s: &Score| {
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {} | {} |",
            percent(s.pass1),
            opt_percent(s.passk),
            opt_percent(s.close_call),
            s.n
        );
    };
    for (cat, score) in &report.categories {
        if show_all || score.n > 0 {
            row(cat.as_str(), score);
        }
    }
    row("Total", &report.total);
    out
}

/// Gap table for every category populated in both reports.
pub fn render_gap_markdown(id: &Report, ood: &Report) -> String {
    let mut out = String::from("| Category | ID Pass@1 | OOD Pass@1 | ID-OOD Gap |\n|---|---|---|---|\n");
    for (cat, a) in &id.categories {
        let Some(b) = ood.get(*cat) else { continue };
        if a.n == 0 || b.n == 0 {
            continue;
        }
        let _ = writeln!(
            out,
            "| {cat} | {} | {} | {} |",
            percent(a.pass1),
            percent(b.pass1),
            percent(a.pass1 - b.pass1)
        );
    }
    out
}
