//! Response parsing: scene-graph text extraction by tier, best-effort scene
//! graph structuring, answer-tag extraction and answer normalization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::dataset::{Category, Sample};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractionError {
    #[error("response is empty")]
    EmptyResponse,
}

/// Where a scene graph was found, in priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExtractionTier {
    FencedBlock,
    BraceBalanced,
    CodeTag,
    WholeText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub attributes: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub raw: String,
}

impl SceneGraph {
    pub fn is_structured(&self) -> bool {
        !self.objects.is_empty() || !self.relations.is_empty()
    }
}

const FENCE: &str = "```";

fn is_lang_tag(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '+' | '-' | '.'))
}

fn strip_lang_tag(inner: &str) -> &str {
    if let Some((first, rest)) = inner.split_once('\n') {
        if is_lang_tag(first.trim()) {
            return rest;
        }
    }
    // ```json{...} with the tag glued to the payload
    let tag_len = inner
        .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '+' | '-' | '.')))
        .unwrap_or(inner.len());
    let (tag, rest) = inner.split_at(tag_len);
    if is_lang_tag(tag) && (rest.starts_with('{') || rest.starts_with('[')) {
        rest
    } else {
        inner
    }
}

fn fenced_block(response: &str) -> Option<&str> {
    let start = response.find(FENCE)? + FENCE.len();
    let len = response[start..].find(FENCE)?;
    Some(strip_lang_tag(&response[start..start + len]).trim()).filter(|s| !s.is_empty())
}

/// First outermost balanced `{...}` span. Braces inside JSON string literals
/// are ignored. If a `{` never closes, scanning restarts at the next `{`.
pub fn brace_span(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut search = 0;
    while let Some(off) = text[search..].find('{') {
        let start = search + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[start..=i]);
                    }
                }
                _ => {}
            }
        }
        search = start + 1;
    }
    None
}

fn code_tag(response: &str) -> Option<&str> {
    let start = response.find("<code>")? + "<code>".len();
    let len = response[start..].find("</code>")?;
    Some(response[start..start + len].trim()).filter(|s| !s.is_empty())
}

/// Pulls scene-graph text out of a model response: fenced block, then brace
/// span, then `<code>` tag, else the whole (trimmed) response.
pub fn extract_scene_graph(response: &str) -> Result<(String, ExtractionTier), ExtractionError> {
    let trimmed = response.trim();
    if trimmed.is_empty() {
        return Err(ExtractionError::EmptyResponse);
    }
    let found = fenced_block(response)
        .map(|s| (s, ExtractionTier::FencedBlock))
        .or_else(|| brace_span(response).map(|s| (s.trim(), ExtractionTier::BraceBalanced)))
        .or_else(|| code_tag(response).map(|s| (s, ExtractionTier::CodeTag)))
        .unwrap_or((trimmed, ExtractionTier::WholeText));
    Ok((found.0.to_string(), found.1))
}

const OBJECT_KEYS: &[&str] = &["objects", "nodes", "entities"];
const ATTRIBUTE_KEYS: &[&str] = &["attributes", "object_attributes", "attrs"];
const RELATION_KEYS: &[&str] = &["relationships", "relations", "edges", "object_relationships"];
const NAME_KEYS: &[&str] = &["name", "id", "label", "object", "type"];
const SUBJECT_KEYS: &[&str] = &["subject", "source", "from", "head", "subj"];
const PREDICATE_KEYS: &[&str] = &["predicate", "relation", "relationship", "rel", "type", "label"];
const TARGET_KEYS: &[&str] = &["object", "target", "to", "tail", "obj"];

fn get_ci<'a>(map: &'a Map<String, Value>, keys: &[&str]) -> Option<(&'a str, &'a Value)> {
    keys.iter()
        .find_map(|k| map.iter().find(|(mk, _)| mk.eq_ignore_ascii_case(k)))
        .map(|(k, v)| (k.as_str(), v))
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
    .filter(|s| !s.is_empty())
}

fn parse_objects(v: &Value) -> Vec<SceneObject> {
    let from_entry = |name: String, attrs: Option<&Map<String, Value>>, skip: Option<&str>| SceneObject {
        name,
        attributes: attrs
            .map(|m| {
                m.iter()
                    .filter(|(k, _)| Some(k.as_str()) != skip)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect()
            })
            .unwrap_or_default(),
    };
    match v {
        Value::Array(items) => items
            .iter()
            .filter_map(|item| match item {
                Value::Object(m) => {
                    let (key, name) = get_ci(m, NAME_KEYS)?;
                    Some(from_entry(scalar_string(name)?, Some(m), Some(key)))
                }
                other => scalar_string(other).map(|n| from_entry(n, None, None)),
            })
            .collect(),
        Value::Object(m) => m
            .iter()
            .map(|(name, attrs)| from_entry(name.clone(), attrs.as_object(), None))
            .collect(),
        _ => Vec::new(),
    }
}

fn merge_attributes(objects: &mut Vec<SceneObject>, v: &Value) {
    let mut add = |name: String, attrs: BTreeMap<String, Value>| {
        match objects.iter_mut().find(|o| o.name == name) {
            Some(o) => o.attributes.extend(attrs),
            None => objects.push(SceneObject { name, attributes: attrs }),
        }
    };
    match v {
        Value::Object(m) => {
            for (name, attrs) in m {
                let attrs = match attrs {
                    Value::Object(a) => a.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
                    other => BTreeMap::from([("value".to_string(), other.clone())]),
                };
                add(name.clone(), attrs);
            }
        }
        Value::Array(items) => {
            for item in items.iter().filter_map(Value::as_object) {
                let Some((key, name)) = get_ci(item, NAME_KEYS) else { continue };
                let Some(name) = scalar_string(name) else { continue };
                let attrs = item
                    .iter()
                    .filter(|(k, _)| k.as_str() != key)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                add(name, attrs);
            }
        }
        _ => {}
    }
}

fn parse_relation(v: &Value) -> Option<Relation> {
    let (subject, predicate, object) = match v {
        Value::Object(m) => {
            let subject = get_ci(m, SUBJECT_KEYS).and_then(|(_, v)| scalar_string(v))?;
            let object = m
                .iter()
                .find(|(k, _)| TARGET_KEYS.iter().any(|t| k.eq_ignore_ascii_case(t)))
                .and_then(|(_, v)| scalar_string(v))?;
            let predicate = get_ci(m, PREDICATE_KEYS)
                .and_then(|(_, v)| scalar_string(v))
                .unwrap_or_default();
            (subject, predicate, object)
        }
        Value::Array(items) if items.len() == 3 => (
            scalar_string(&items[0])?,
            scalar_string(&items[1]).unwrap_or_default(),
            scalar_string(&items[2])?,
        ),
        _ => return None,
    };
    Some(Relation { subject, predicate, object })
}

fn structure_from(map: &Map<String, Value>) -> Option<(Vec<SceneObject>, Vec<Relation>)> {
    let objects = get_ci(map, OBJECT_KEYS);
    let attributes = get_ci(map, ATTRIBUTE_KEYS);
    let relations = get_ci(map, RELATION_KEYS);
    if objects.is_none() && attributes.is_none() && relations.is_none() {
        return None;
    }
    let mut objs = objects.map(|(_, v)| parse_objects(v)).unwrap_or_default();
    if let Some((_, v)) = attributes {
        merge_attributes(&mut objs, v);
    }
    let rels = relations
        .and_then(|(_, v)| v.as_array())
        .map(|items| items.iter().filter_map(parse_relation).collect())
        .unwrap_or_default();
    Some((objs, rels))
}

/// Best-effort structuring of extracted scene-graph text. Never fails:
/// anything unrecognized yields empty lists with `raw` preserved.
pub fn parse_scene_graph(text: &str) -> SceneGraph {
    let raw = text.to_string();
    let value = serde_json::from_str::<Value>(text.trim())
        .ok()
        .or_else(|| brace_span(text).and_then(|s| serde_json::from_str(s).ok()));
    let parsed = value.as_ref().and_then(Value::as_object).and_then(|m| {
        structure_from(m).or_else(|| {
            // {"scene_graph": {...}} wrappers
            match m.values().collect::<Vec<_>>().as_slice() {
                [Value::Object(inner)] => structure_from(inner),
                _ => None,
            }
        })
    });
    let (objects, relations) = parsed.unwrap_or_default();
    SceneGraph { objects, relations, raw }
}

/// Content of the last `<answer>...</answer>` pair, else the last non-empty line.
pub fn extract_answer(response: &str) -> Result<String, ExtractionError> {
    if response.trim().is_empty() {
        return Err(ExtractionError::EmptyResponse);
    }
    if let Some(close) = response.rfind("</answer>") {
        if let Some(open) = response[..close].rfind("<answer>") {
            return Ok(response[open + "<answer>".len()..close].trim().to_string());
        }
    }
    Ok(response
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or_default()
        .to_string())
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

fn count_token(tok: &str) -> Option<u64> {
    if !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()) {
        return tok.parse().ok();
    }
    NUMBER_WORDS
        .iter()
        .position(|w| w.eq_ignore_ascii_case(tok))
        .map(|i| i as u64)
}

/// First integer token or number word (zero to twenty) in the text.
pub fn parse_count(text: &str) -> Option<u64> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .find_map(count_token)
}

fn strip_trailing_punct(s: &str) -> &str {
    s.trim().trim_end_matches(['.', '!', ',', ';']).trim()
}

fn match_label<'a>(raw: &str, labels: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    let lower = raw.to_lowercase();
    labels.into_iter().find(|label| {
        let l = label.to_lowercase();
        if lower == l {
            return true;
        }
        let bracketed = format!("({l})");
        if lower == bracketed || lower.starts_with(&format!("{bracketed} ")) {
            return true;
        }
        [".", ")", ":"].iter().any(|sep| {
            let head = format!("{l}{sep}");
            lower == head || lower.starts_with(&format!("{head} "))
        })
    })
}

/// Maps a raw extracted answer onto the sample's answer space: choice labels
/// for multiple choice (by label form or choice text), digits for counting.
/// Anything unrecognized is returned trimmed. Idempotent.
pub fn normalize_answer(raw: &str, sample: &Sample) -> String {
    let trimmed = raw.trim();
    if let Some(choices) = sample.choices.as_ref().filter(|c| !c.is_empty()) {
        if let Some(label) = match_label(trimmed, choices.iter().map(|c| c.label.as_str())) {
            return label.to_string();
        }
        let bare = strip_trailing_punct(trimmed);
        if let Some(c) = choices.iter().find(|c| c.text.trim().eq_ignore_ascii_case(bare)) {
            return c.label.clone();
        }
        return trimmed.to_string();
    }
    if sample.category == Category::Counting {
        if let Some(n) = count_token(strip_trailing_punct(trimmed)) {
            return n.to_string();
        }
    }
    trimmed.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::sample;
    use crate::dataset::Choice;

    #[test]
    fn tier_examples() {
        assert_eq!(
            extract_scene_graph("Here: ```json\n{\"objects\":[]}\n```").unwrap(),
            ("{\"objects\":[]}".to_string(), ExtractionTier::FencedBlock)
        );
        assert_eq!(
            extract_scene_graph("no structure at all").unwrap(),
            ("no structure at all".to_string(), ExtractionTier::WholeText)
        );
        assert_eq!(
            extract_scene_graph("prefix {\"a\":{\"b\":1}} suffix").unwrap(),
            ("{\"a\":{\"b\":1}}".to_string(), ExtractionTier::BraceBalanced)
        );
        assert_eq!(
            extract_scene_graph("see <code> objects: cube </code>").unwrap(),
            ("objects: cube".to_string(), ExtractionTier::CodeTag)
        );
        assert_eq!(extract_scene_graph("  \n"), Err(ExtractionError::EmptyResponse));
    }

    #[test]
    fn inline_fence_tag_stripped() {
        let (text, tier) = extract_scene_graph("```json{\"objects\":[]}```").unwrap();
        assert_eq!((text.as_str(), tier), ("{\"objects\":[]}", ExtractionTier::FencedBlock));
        let (text, _) = extract_scene_graph("```hello world```").unwrap();
        assert_eq!(text, "hello world");
    }

    #[test]
    fn fence_beats_earlier_brace() {
        let (text, tier) = extract_scene_graph("{\"x\":1} then ```\n{\"y\":2}\n```").unwrap();
        assert_eq!((text.as_str(), tier), ("{\"y\":2}", ExtractionTier::FencedBlock));
    }

    #[test]
    fn empty_or_unclosed_fence_falls_through() {
        let (_, tier) = extract_scene_graph("``` ``` {\"a\":1}").unwrap();
        assert_eq!(tier, ExtractionTier::BraceBalanced);
        let (_, tier) = extract_scene_graph("```json\n{\"a\":1}").unwrap();
        assert_eq!(tier, ExtractionTier::BraceBalanced);
    }

    #[test]
    fn braces_in_strings_ignored() {
        assert_eq!(brace_span(r#"x {"a":"}{"} y"#), Some(r#"{"a":"}{"}"#));
        assert_eq!(brace_span("{ unclosed {\"ok\":1}"), Some("{\"ok\":1}"));
        assert_eq!(brace_span("nothing"), None);
    }

    #[test]
    fn parse_counts_objects_and_relations() {
        let g = parse_scene_graph(
            r#"{"objects":[{"name":"cup","color":"red"},{"name":"table"}],
                "relationships":[{"subject":"cup","predicate":"on","object":"table"}]}"#,
        );
        assert_eq!(g.objects.len(), 2);
        assert_eq!(g.relations.len(), 1);
        assert_eq!(g.objects[0].attributes.get("color"), Some(&Value::from("red")));
        assert_eq!(g.relations[0], Relation { subject: "cup".into(), predicate: "on".into(), object: "table".into() });
    }

    #[test]
    fn parse_prose_falls_back() {
        let g = parse_scene_graph("a red cup on a table");
        assert!(!g.is_structured());
        assert_eq!(g.raw, "a red cup on a table");
    }

    #[test]
    fn parse_synonyms_and_shapes() {
        let g = parse_scene_graph(
            r#"{"Nodes":["cup","table"],"Attributes":{"cup":{"color":"red"},"lamp":"tall"},
                "relations":[["cup","left of","table"],{"source":"lamp","to":"cup","rel":"behind"},{"subject":"","object":"x"}]}"#,
        );
        assert_eq!(g.objects.iter().map(|o| o.name.as_str()).collect::<Vec<_>>(), ["cup", "table", "lamp"]);
        assert_eq!(g.objects[0].attributes["color"], Value::from("red"));
        assert_eq!(g.relations.len(), 2);
        assert_eq!(g.relations[1].predicate, "behind");

        let edges = parse_scene_graph(r#"{"scene_graph":{"entities":{"cube":{"size":"big"}},"edges":[]}}"#);
        assert_eq!(edges.objects.len(), 1);
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("…reasoning… <answer>B</answer>").unwrap(), "B");
        assert_eq!(extract_answer("<answer>A</answer> no wait <answer>C</answer>").unwrap(), "C");
        assert_eq!(extract_answer("The count is\n4").unwrap(), "4");
        assert_eq!(extract_answer("<answer> 7 </answer>\n\n").unwrap(), "7");
        assert_eq!(extract_answer(""), Err(ExtractionError::EmptyResponse));
    }

    fn four_choice() -> Sample {
        let mut s = sample("q", crate::dataset::Category::Relation);
        s.choices = Some(vec![
            Choice::new("A", "left"),
            Choice::new("B", "right"),
            Choice::new("C", "above"),
            Choice::new("D", "below"),
        ]);
        s
    }

    #[test]
    fn normalize_choice_forms() {
        let s = four_choice();
        for raw in ["(b)", "B.", "b", "B) left", "(B) right", "right", "Right.", " B "] {
            assert_eq!(normalize_answer(raw, &s), "B", "{raw}");
        }
        assert_eq!(normalize_answer("Bees", &s), "Bees");
        assert_eq!(normalize_answer("E", &s), "E");
    }

    #[test]
    fn normalize_counting_words() {
        let s = sample("c", Category::Counting);
        assert_eq!(normalize_answer("three", &s), "3");
        assert_eq!(normalize_answer("Twenty.", &s), "20");
        assert_eq!(normalize_answer("007", &s), "7");
        assert_eq!(normalize_answer("twenty-one", &s), "twenty-one");
        assert_eq!(normalize_answer("B", &four_choice()), "B");
    }

    #[test]
    fn count_parsing() {
        assert_eq!(parse_count("7"), Some(7));
        assert_eq!(parse_count("there are 12 cubes"), Some(12));
        assert_eq!(parse_count("several"), None);
        assert_eq!(parse_count("I see five, maybe 6"), Some(5));
    }
}
