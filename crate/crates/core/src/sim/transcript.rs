//! JSON-lines transcript: a header line, one line per record, then one
//! snapshot line per party.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::knowledge::{Knowledge, KnowledgeItem, MetaItem};
use super::{KeyId, Message, PartyId};
use crate::attestation::Tick;

pub const SCHEMA_ID: &str = "trustsim-transcript/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub attacks: Vec<String>,
    pub variants: BTreeMap<String, String>,
}

impl Header {
    pub fn new(scenario: &str, seed: u64, attacks: Vec<String>, variants: BTreeMap<String, String>) -> Self {
        Header { schema: SCHEMA_ID.to_string(), scenario: scenario.to_string(), seed, attacks, variants }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Record {
    Party { party: PartyId, role: String },
    Message { tick: Tick, msg: Message },
    Drop { tick: Tick, msg: Message },
    KeyGrant { tick: Tick, party: PartyId, key: KeyId },
    Event { tick: Tick, name: String, data: Value },
    Advance { tick: Tick, by: Tick },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartySnapshot {
    pub party: PartyId,
    pub role: String,
    pub keys: Vec<KeyId>,
    pub knowledge: Vec<KnowledgeItem>,
    pub metadata: Vec<MetaItem>,
}

impl PartySnapshot {
    pub fn from_knowledge(party: PartyId, role: String, k: Knowledge) -> Self {
        PartySnapshot {
            party,
            role,
            keys: k.keys.into_iter().collect(),
            knowledge: k.items.into_iter().collect(),
            metadata: k.metadata,
        }
    }

    pub fn to_knowledge(&self) -> Knowledge {
        Knowledge {
            keys: self.keys.iter().cloned().collect(),
            items: self.knowledge.iter().cloned().collect(),
            metadata: self.metadata.clone(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TranscriptError {
    #[error("transcript is empty")]
    Empty,
    #[error("line 1: bad header: {0}")]
    Header(String),
    #[error("unsupported transcript schema {0}")]
    Schema(String),
    #[error("line {line}: {detail}")]
    Line { line: usize, detail: String },
    #[error("line {0}: record after snapshot section")]
    RecordAfterSnapshot(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub header: Header,
    pub records: Vec<Record>,
    pub snapshot: Vec<PartySnapshot>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |v: &Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        push(&serde_json::to_value(&self.header).expect("header serializes"));
        for r in &self.records {
            push(&serde_json::to_value(r).expect("record serializes"));
        }
        for s in &self.snapshot {
            let mut v = serde_json::to_value(s).expect("snapshot serializes");
            v.as_object_mut().expect("object").insert("type".into(), Value::String("snapshot".into()));
            push(&v);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TranscriptError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(TranscriptError::Empty)?;
        let header: Header = serde_json::from_str(first).map_err(|e| TranscriptError::Header(e.to_string()))?;
        if header.schema != SCHEMA_ID {
            return Err(TranscriptError::Schema(header.schema));
        }
        let mut records = Vec::new();
        let mut snapshot = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            let line_err = |detail: String| TranscriptError::Line { line: n, detail };
            let mut v: Value = serde_json::from_str(line).map_err(|e| line_err(e.to_string()))?;
            let is_snapshot = v.get("type").and_then(Value::as_str) == Some("snapshot");
            if is_snapshot {
                v.as_object_mut().expect("object").remove("type");
                snapshot.push(serde_json::from_value(v).map_err(|e| line_err(e.to_string()))?);
            } else {
                if !snapshot.is_empty() {
                    return Err(TranscriptError::RecordAfterSnapshot(n));
                }
                records.push(serde_json::from_value(v).map_err(|e| line_err(e.to_string()))?);
            }
        }
        Ok(Transcript { header, records, snapshot })
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.records.iter().filter_map(|r| match r {
            Record::Message { msg, .. } => Some(msg),
            _ => None,
        })
    }

    /// Events with the given name, with their tick.
    pub fn events<'a>(&'a self, name: &'a str) -> impl Iterator<Item = (Tick, &'a Value)> + 'a {
        self.records.iter().filter_map(move |r| match r {
            Record::Event { tick, name: n, data } if n == name => Some((*tick, data)),
            _ => None,
        })
    }

    pub fn snapshot_of(&self, party: &str) -> Option<&PartySnapshot> {
        self.snapshot.iter().find(|s| s.party == party)
    }

    pub fn role_of(&self, party: &str) -> Option<&str> {
        self.records.iter().find_map(|r| match r {
            Record::Party { party: p, role } if p == party => Some(role.as_str()),
            _ => None,
        })
    }

    /// Parties playing the given role, in registration order. A party
    /// with several roles has them joined by `+`.
    pub fn parties_with_role<'a>(&'a self, role: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.records.iter().filter_map(move |r| match r {
            Record::Party { party, role: r } if r.split('+').any(|x| x == role) => Some(party.as_str()),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Channel, Envelope, Sim};
    use serde::Serialize;

    #[derive(Serialize)]
    struct Delivery {
        order_id: String,
        good_id: String,
    }

    fn sample() -> Transcript {
        let mut s = Sim::new(Header::new("unit", 7, vec!["tamper".into()], BTreeMap::new()));
        s.register("a", "device").unwrap();
        s.register("b", "pos").unwrap();
        s.grant_key("a", &"k".to_string()).unwrap();
        s.send(
            Envelope::new("delivery", "b", "a", Channel::short_range()),
            &Delivery { order_id: "1".into(), good_id: "g".into() },
        )
        .unwrap();
        s.event("note", serde_json::json!({"x": 1}));
        s.advance(3);
        s.finish()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let t = sample();
        let text = t.to_jsonl();
        let back = Transcript::parse(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_jsonl(), text);
        assert!(
            text.starts_with("{\"attacks\":[\"tamper\"],\"scenario\":\"unit\",\"schema\":\"trustsim-transcript/1\"")
        );
    }

    #[test]
    fn parse_errors() {
        assert_eq!(Transcript::parse(""), Err(TranscriptError::Empty));
        assert!(matches!(Transcript::parse("nope"), Err(TranscriptError::Header(_))));
        let other = "{\"schema\":\"x/2\",\"scenario\":\"s\",\"seed\":1,\"attacks\":[],\"variants\":{}}";
        assert!(matches!(Transcript::parse(other), Err(TranscriptError::Schema(_))));
        let mut text = sample().to_jsonl();
        text.push_str("{\"type\":\"advance\",\"tick\":9,\"by\":1}\n");
        assert!(matches!(Transcript::parse(&text), Err(TranscriptError::RecordAfterSnapshot(_))));
        let bad = sample().to_jsonl().replace("\"type\":\"advance\"", "\"type\":\"teleport\"");
        assert!(matches!(Transcript::parse(&bad), Err(TranscriptError::Line { .. })));
    }

    #[test]
    fn accessors() {
        let t = sample();
        assert_eq!(t.messages().count(), 1);
        assert_eq!(t.events("note").count(), 1);
        assert_eq!(t.role_of("b"), Some("pos"));
        assert_eq!(t.parties_with_role("device").collect::<Vec<_>>(), vec!["a"]);
        assert!(t.snapshot_of("a").unwrap().knowledge.iter().any(|k| k.value == "g"));
    }
}
