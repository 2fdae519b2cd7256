//! Atomic motion texts from an external language model.
//!
//! A raw motion text is turned into a prompt (system message, fixed
//! instructions, numbered demonstrations, query), sent through an
//! [`LlmTransport`], and the response is parsed into an [`AtomicTextMatrix`]:
//! one phrase per body part for each of `P` consecutive periods.

mod prompt;
mod transport;

pub use prompt::{
    build_inference_prompt, build_training_prompt, render_description_blocks, Example, PromptBundle,
    INFERENCE_TEMPLATE, SYSTEM_PROMPT, TRAINING_TEMPLATE,
};
pub use transport::{prompt_hash, FixtureRecord, FixtureStore, LlmTransport, RecordingTransport, ReplayTransport};

use std::fmt;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::decompose::FineGrainedDescription;
use crate::motion::BodyPart;

#[derive(Debug, Error, PartialEq)]
pub enum LlmError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("fine-grained description has no entries")]
    EmptyDescription,
    #[error("inference prompt needs at least one example")]
    NoExamples,
    #[error("response is not parseable: {0}")]
    NotParseable(String),
    #[error("period {period} is missing body part `{key}`")]
    MissingBodyPart { period: usize, key: String },
    #[error("period {period} has unexpected key `{key}`")]
    ExtraKey { period: usize, key: String },
    #[error("period keys are not contiguous from 0: expected {expected}, found `{found}`")]
    NonContiguousPeriods { expected: usize, found: String },
    #[error("period {period}, `{key}`: phrase must be a non-empty string")]
    InvalidPhrase { period: usize, key: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no recorded response for prompt hash {hash}")]
    FixtureMiss { hash: String },
    #[error("fixture store: {0}")]
    Store(String),
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

/// `P` periods, each holding one phrase per body part in [`BodyPart::ALL`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomicTextMatrix {
    periods: Vec<[String; BodyPart::COUNT]>,
}

impl AtomicTextMatrix {
    pub fn new(periods: Vec<[String; BodyPart::COUNT]>) -> Result<Self> {
        if periods.is_empty() {
            return Err(LlmError::NotParseable("no periods".into()));
        }
        for (p, row) in periods.iter().enumerate() {
            for part in BodyPart::ALL {
                if row[part.index()].trim().is_empty() {
                    return Err(LlmError::InvalidPhrase {
                        period: p,
                        key: part.as_str().into(),
                    });
                }
            }
        }
        Ok(AtomicTextMatrix { periods })
    }

    pub fn period_count(&self) -> usize {
        self.periods.len()
    }

    pub fn phrase(&self, period: usize, part: BodyPart) -> &str {
        &self.periods[period][part.index()]
    }

    pub fn periods(&self) -> &[[String; BodyPart::COUNT]] {
        &self.periods
    }

    /// Phrases of one body part across all periods.
    pub fn column(&self, part: BodyPart) -> impl Iterator<Item = &str> {
        self.periods.iter().map(move |p| p[part.index()].as_str())
    }

    /// Pretty JSON with four-space indentation, keys in canonical order.
    pub fn to_json_pretty(&self) -> String {
        let mut out = Vec::new();
        let fmt = serde_json::ser::PrettyFormatter::with_indent(b"    ");
        let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
        self.serialize(&mut ser).expect("matrix serializes");
        String::from_utf8(out).expect("utf-8 json")
    }

    /// Validate a JSON object keyed by period index.
    pub fn from_value(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| LlmError::NotParseable("top-level value is not an object".into()))?;
        let mut keyed: Vec<(usize, &String, &Value)> = Vec::with_capacity(obj.len());
        for (k, v) in obj {
            let idx = k.trim().parse::<usize>().map_err(|_| LlmError::NonContiguousPeriods {
                expected: 0,
                found: k.clone(),
            })?;
            keyed.push((idx, k, v));
        }
        keyed.sort_by_key(|(i, _, _)| *i);
        let mut periods = Vec::with_capacity(keyed.len());
        for (expected, (idx, key, v)) in keyed.into_iter().enumerate() {
            if idx != expected {
                return Err(LlmError::NonContiguousPeriods {
                    expected,
                    found: key.clone(),
                });
            }
            periods.push(parse_period(expected, v)?);
        }
        Self::new(periods)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| LlmError::NotParseable(e.to_string()))?;
        Self::from_value(&v)
    }
}

fn parse_period(period: usize, value: &Value) -> Result<[String; BodyPart::COUNT]> {
    let obj: &Map<String, Value> = value
        .as_object()
        .ok_or_else(|| LlmError::NotParseable(format!("period {period} is not an object")))?;
    for part in BodyPart::ALL {
        if !obj.contains_key(part.as_str()) {
            return Err(LlmError::MissingBodyPart {
                period,
                key: part.as_str().into(),
            });
        }
    }
    if let Some(extra) = obj.keys().find(|k| BodyPart::parse(k).is_none()) {
        return Err(LlmError::ExtraKey {
            period,
            key: extra.clone(),
        });
    }
    let mut row: [String; BodyPart::COUNT] = Default::default();
    for part in BodyPart::ALL {
        let phrase = obj[part.as_str()]
            .as_str()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| LlmError::InvalidPhrase {
                period,
                key: part.as_str().into(),
            })?;
        row[part.index()] = phrase.to_string();
    }
    Ok(row)
}

impl Serialize for AtomicTextMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        struct Period<'a>(&'a [String; BodyPart::COUNT]);
        impl Serialize for Period<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut map = s.serialize_map(Some(BodyPart::COUNT))?;
                for part in BodyPart::ALL {
                    map.serialize_entry(part.as_str(), &self.0[part.index()])?;
                }
                map.end()
            }
        }
        let mut map = s.serialize_map(Some(self.periods.len()))?;
        for (i, p) in self.periods.iter().enumerate() {
            map.serialize_entry(&i.to_string(), &Period(p))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for AtomicTextMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        AtomicTextMatrix::from_value(&v).map_err(D::Error::custom)
    }
}

impl fmt::Display for AtomicTextMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json_pretty())
    }
}

/// Candidate JSON payloads in a response: fenced blocks first, then every `{`.
fn json_candidates(response: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = response;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map_or(0, |n| n + 1);
        match after[body_start..].find("```") {
            Some(close) => {
                out.push(&after[body_start..body_start + close]);
                rest = &after[body_start + close + 3..];
            }
            None => break,
        }
    }
    for (i, _) in response.match_indices('{') {
        out.push(&response[i..]);
    }
    out
}

/// Extract and validate the atomic text matrix from a model response.
///
/// Surrounding prose and code fences are ignored. The first JSON object that
/// looks like a period map (all keys numeric) is validated; structural errors
/// name the offending period and key.
pub fn parse_response(response: &str) -> Result<AtomicTextMatrix> {
    let mut first_object: Option<Value> = None;
    for candidate in json_candidates(response) {
        let trimmed = candidate.trim_start();
        if !trimmed.starts_with('{') {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(trimmed).into_iter::<Value>();
        let Some(Ok(value)) = stream.next() else {
            continue;
        };
        let Some(obj) = value.as_object() else {
            continue;
        };
        if !obj.is_empty() && obj.keys().all(|k| k.trim().parse::<usize>().is_ok()) {
            return AtomicTextMatrix::from_value(&value);
        }
        first_object.get_or_insert(value);
    }
    match first_object {
        Some(v) => AtomicTextMatrix::from_value(&v),
        None => Err(LlmError::NotParseable("no JSON object found".into())),
    }
}

/// Inference-stage decomposition of a raw text.
pub fn atomize(
    transport: &dyn LlmTransport,
    raw_text: &str,
    examples: &[Example],
    periods_hint: Option<usize>,
) -> Result<AtomicTextMatrix> {
    let bundle = build_inference_prompt(raw_text, examples, periods_hint)?;
    let response = transport.complete(&bundle.system, &bundle.user_message())?;
    parse_response(&response)
}

/// Training-stage summarization of a fine-grained description.
pub fn summarize(
    transport: &dyn LlmTransport,
    raw_text: &str,
    description: &FineGrainedDescription,
) -> Result<AtomicTextMatrix> {
    let bundle = build_training_prompt(raw_text, description)?;
    let response = transport.complete(&bundle.system, &bundle.user_message())?;
    parse_response(&response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn period(tag: &str) -> [String; 6] {
        BodyPart::ALL.map(|p| format!("{tag} {}", p.as_str()))
    }

    #[test]
    fn serialize_roundtrip() {
        let m = AtomicTextMatrix::new(vec![period("a"), period("b")]).unwrap();
        assert_eq!(parse_response(&m.to_json_pretty()).unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<AtomicTextMatrix>(&json).unwrap(), m);
        assert!(json.starts_with("{\"0\":{\"spine\":"));
    }

    #[test]
    fn fenced_and_prose_wrapped() {
        let m = AtomicTextMatrix::new(vec![period("x")]).unwrap();
        let bare = m.to_json_pretty();
        let fenced = format!("Sure, here it is:\n```json\n{bare}\n```\nHope this helps.");
        let prose = format!("Output: {bare} (end)");
        assert_eq!(parse_response(&fenced).unwrap(), parse_response(&bare).unwrap());
        assert_eq!(parse_response(&prose).unwrap(), m);
    }

    #[test]
    fn period_ordering_is_normalized() {
        let mut obj = Map::new();
        let m = AtomicTextMatrix::new(vec![period("a"), period("b")]).unwrap();
        let v: Value = serde_json::to_value(&m).unwrap();
        obj.insert("1".into(), v["1"].clone());
        obj.insert("0".into(), v["0"].clone());
        // serde_json maps are sorted; build the text by hand to force order
        let text = format!("{{\"1\": {}, \"0\": {}}}", v["1"], v["0"]);
        assert_eq!(parse_response(&text).unwrap(), m);
        assert_eq!(AtomicTextMatrix::from_value(&Value::Object(obj)).unwrap(), m);
    }

    #[test]
    fn structural_errors_name_period_and_key() {
        let m = AtomicTextMatrix::new(vec![period("a"), period("b")]).unwrap();
        let mut v = serde_json::to_value(&m).unwrap();
        v["1"].as_object_mut().unwrap().remove("spine");
        assert_eq!(
            AtomicTextMatrix::from_value(&v),
            Err(LlmError::MissingBodyPart { period: 1, key: "spine".into() })
        );

        let mut v = serde_json::to_value(&m).unwrap();
        v["0"].as_object_mut().unwrap().insert("head".into(), "nods".into());
        assert_eq!(
            AtomicTextMatrix::from_value(&v),
            Err(LlmError::ExtraKey { period: 0, key: "head".into() })
        );

        let text = format!("{{\"0\": {}, \"2\": {}}}", serde_json::to_value(&m).unwrap()["0"], serde_json::to_value(&m).unwrap()["1"]);
        assert!(matches!(parse_response(&text), Err(LlmError::NonContiguousPeriods { expected: 1, .. })));

        let mut v = serde_json::to_value(&m).unwrap();
        v["0"]["trajectory"] = Value::String("  ".into());
        assert_eq!(
            AtomicTextMatrix::from_value(&v),
            Err(LlmError::InvalidPhrase { period: 0, key: "trajectory".into() })
        );

        assert!(matches!(parse_response("no json here"), Err(LlmError::NotParseable(_))));
        assert!(matches!(parse_response("{}"), Err(LlmError::NotParseable(_))));
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(
            phrases in prop::collection::vec(prop::collection::vec("[a-z][a-z ,'\"]{0,20}", 6), 1..5),
        ) {
            let periods: Vec<[String; 6]> = phrases
                .into_iter()
                .map(|v| {
                    let v: Vec<String> = v.into_iter().map(|s| s.trim().to_string()).map(|s| if s.is_empty() { "x".into() } else { s }).collect();
                    v.try_into().unwrap()
                })
                .collect();
            let m = AtomicTextMatrix::new(periods).unwrap();
            prop_assert_eq!(parse_response(&m.to_json_pretty()).unwrap(), m.clone());
            prop_assert_eq!(parse_response(&serde_json::to_string(&m).unwrap()).unwrap(), m);
        }
    }
}
