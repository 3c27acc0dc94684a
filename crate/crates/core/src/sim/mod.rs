//! Deterministic event loop: message delivery over modeled channels,
//! transcript recording, and per-party knowledge tracking.
//!
//! Time is an integer tick that advances by one per delivered (or dropped)
//! message. Delivery is in-order and reliable unless a scripted [`Hook`]
//! drops or modifies a message.

pub mod audit;
pub mod knowledge;
pub mod schema;
pub mod transcript;

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use knowledge::{Knowledge, KnowledgeItem, MetaItem, Selector};
pub use transcript::{Header, PartySnapshot, Record, Transcript};

use crate::attestation::Tick;

pub type PartyId = String;
pub type KeyId = String;

/// Sensitivity label attached to every payload field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Identity,
    Good,
    Price,
    Token,
    Balance,
    Policy,
    Plumbing,
}

impl Label {
    pub const ALL: [Label; 7] =
        [Label::Identity, Label::Good, Label::Price, Label::Token, Label::Balance, Label::Policy, Label::Plumbing];

    /// Labels that must never reach an external facility provider.
    pub const SENSITIVE: [Label; 5] = [Label::Identity, Label::Good, Label::Price, Label::Token, Label::Balance];

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Identity => "identity",
            Label::Good => "good",
            Label::Price => "price",
            Label::Token => "token",
            Label::Balance => "balance",
            Label::Policy => "policy",
            Label::Plumbing => "plumbing",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        Label::ALL.into_iter().find(|l| l.as_str() == s)
    }

    pub fn is_sensitive(&self) -> bool {
        Label::SENSITIVE.contains(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    MobileNetwork,
    ShortRange,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub kind: ChannelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier: Option<PartyId>,
}

impl Channel {
    /// Mobile network link carried by `carrier`.
    pub fn mobile(carrier: &str) -> Self {
        Channel { kind: ChannelKind::MobileNetwork, carrier: Some(carrier.to_string()) }
    }

    /// Fixed-line link with no carrier in the model.
    pub fn direct() -> Self {
        Channel { kind: ChannelKind::MobileNetwork, carrier: None }
    }

    pub fn short_range() -> Self {
        Channel { kind: ChannelKind::ShortRange, carrier: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub label: Label,
    pub value: Value,
    /// End-to-end sealed for the holders of this key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sealed: Option<KeyId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    pub kind: String,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub channel: Channel,
    /// Transport encryption under a session key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<KeyId>,
    pub payload: BTreeMap<String, Field>,
}

impl Message {
    /// Rebuild the typed body from the payload.
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, SimError> {
        let obj: serde_json::Map<String, Value> =
            self.payload.iter().map(|(k, f)| (k.clone(), f.value.clone())).collect();
        serde_json::from_value(Value::Object(obj))
            .map_err(|e| SimError::Decode { kind: self.kind.clone(), detail: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown party {0}")]
    UnknownParty(String),
    #[error("duplicate party {0}")]
    DuplicateParty(String),
    #[error("unknown message kind {0}")]
    UnknownKind(String),
    #[error("message {kind}: {detail}")]
    Schema { kind: String, detail: String },
    #[error("cannot decode {kind}: {detail}")]
    Decode { kind: String, detail: String },
    #[error("short-range channel cannot have a carrier")]
    CarrierOnShortRange,
}

/// Scripted interference with one message in transit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hook {
    pub kind: String,
    /// Zero-based occurrence among messages of `kind`.
    pub occurrence: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<PartyId>,
    pub action: HookAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum HookAction {
    Drop,
    Modify { field: String, value: Value },
}

/// Outcome of [`Sim::deliver`].
#[derive(Clone, Debug, PartialEq)]
pub enum Delivery {
    Delivered(Message),
    Dropped,
}

impl Delivery {
    pub fn into_message(self) -> Option<Message> {
        match self {
            Delivery::Delivered(m) => Some(m),
            Delivery::Dropped => None,
        }
    }
}

/// Addressing and protection for an outgoing message.
#[derive(Clone, Debug)]
pub struct Envelope<'a> {
    pub kind: &'a str,
    pub from: &'a str,
    pub to: &'a str,
    pub channel: Channel,
    pub encrypt: Option<KeyId>,
    pub seal: BTreeMap<String, KeyId>,
}

impl<'a> Envelope<'a> {
    pub fn new(kind: &'a str, from: &'a str, to: &'a str, channel: Channel) -> Self {
        Envelope { kind, from, to, channel, encrypt: None, seal: BTreeMap::new() }
    }

    pub fn encrypted(mut self, key: Option<&KeyId>) -> Self {
        self.encrypt = key.cloned();
        self
    }

    pub fn seal_field(mut self, field: &str, key: &KeyId) -> Self {
        self.seal.insert(field.to_string(), key.clone());
        self
    }
}

/// The event loop state for one run.
#[derive(Debug)]
pub struct Sim {
    header: Header,
    tick: Tick,
    next_id: u64,
    roles: BTreeMap<PartyId, String>,
    knowledge: BTreeMap<PartyId, Knowledge>,
    records: Vec<Record>,
    hooks: Vec<Hook>,
    kind_counts: BTreeMap<(String, Option<PartyId>), usize>,
}

impl Sim {
    pub fn new(header: Header) -> Self {
        Sim {
            header,
            tick: 0,
            next_id: 0,
            roles: BTreeMap::new(),
            knowledge: BTreeMap::new(),
            records: Vec::new(),
            hooks: Vec::new(),
            kind_counts: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> Tick {
        self.tick
    }

    /// Messages of `kind` offered for delivery so far, from any sender.
    pub fn occurrences(&self, kind: &str) -> usize {
        *self.kind_counts.get(&(kind.to_string(), None)).unwrap_or(&0)
    }

    pub fn add_hook(&mut self, hook: Hook) {
        self.hooks.push(hook);
    }

    pub fn register(&mut self, party: &str, role: &str) -> Result<(), SimError> {
        if self.roles.contains_key(party) {
            return Err(SimError::DuplicateParty(party.to_string()));
        }
        self.roles.insert(party.to_string(), role.to_string());
        self.knowledge.insert(party.to_string(), Knowledge::default());
        self.records.push(Record::Party { party: party.to_string(), role: role.to_string() });
        Ok(())
    }

    pub fn is_registered(&self, party: &str) -> bool {
        self.roles.contains_key(party)
    }

    pub fn role_of(&self, party: &str) -> Option<&str> {
        self.roles.get(party).map(String::as_str)
    }

    /// Give `party` a session or sealing key.
    pub fn grant_key(&mut self, party: &str, key: &KeyId) -> Result<(), SimError> {
        let k = self.knowledge.get_mut(party).ok_or_else(|| SimError::UnknownParty(party.to_string()))?;
        if k.keys.insert(key.clone()) {
            self.records.push(Record::KeyGrant { tick: self.tick, party: party.to_string(), key: key.clone() });
        }
        Ok(())
    }

    /// Attach an annotation to the transcript.
    pub fn event(&mut self, name: &str, data: Value) {
        self.records.push(Record::Event { tick: self.tick, name: name.to_string(), data });
    }

    /// Let simulated time pass without traffic.
    pub fn advance(&mut self, by: Tick) {
        self.tick += by;
        self.records.push(Record::Advance { tick: self.tick, by });
    }

    /// Encode `body` under the schema for `env.kind` and deliver it.
    pub fn send<T: Serialize>(&mut self, env: Envelope<'_>, body: &T) -> Result<Delivery, SimError> {
        let spec = schema::lookup(env.kind).ok_or_else(|| SimError::UnknownKind(env.kind.to_string()))?;
        let value = serde_json::to_value(body)
            .map_err(|e| SimError::Schema { kind: env.kind.to_string(), detail: e.to_string() })?;
        let Value::Object(obj) = value else {
            return Err(SimError::Schema { kind: env.kind.to_string(), detail: "body is not an object".into() });
        };
        let mut payload = BTreeMap::new();
        for (name, value) in obj {
            let label = spec.label_of(&name).ok_or_else(|| SimError::Schema {
                kind: env.kind.to_string(),
                detail: format!("field {name} not in schema"),
            })?;
            let sealed = env.seal.get(&name).cloned();
            payload.insert(name, Field { label, value, sealed });
        }
        spec.check(&payload).map_err(|detail| SimError::Schema { kind: env.kind.to_string(), detail })?;
        let msg = Message {
            id: self.next_id,
            kind: env.kind.to_string(),
            sender: env.from.to_string(),
            receiver: env.to.to_string(),
            channel: env.channel,
            envelope: env.encrypt,
            payload,
        };
        self.next_id += 1;
        self.deliver(msg)
    }

    /// Deliver a fully built message: apply hooks, update knowledge, record.
    pub fn deliver(&mut self, mut msg: Message) -> Result<Delivery, SimError> {
        for p in [&msg.sender, &msg.receiver] {
            if !self.roles.contains_key(p) {
                return Err(SimError::UnknownParty(p.clone()));
            }
        }
        if msg.channel.kind == ChannelKind::ShortRange && msg.channel.carrier.is_some() {
            return Err(SimError::CarrierOnShortRange);
        }
        if let Some(c) = &msg.channel.carrier {
            if !self.roles.contains_key(c) {
                return Err(SimError::UnknownParty(c.clone()));
            }
        }

        let any_key = (msg.kind.clone(), None);
        let sender_key = (msg.kind.clone(), Some(msg.sender.clone()));
        let n_any = *self.kind_counts.get(&any_key).unwrap_or(&0);
        let n_sender = *self.kind_counts.get(&sender_key).unwrap_or(&0);
        *self.kind_counts.entry(any_key).or_default() += 1;
        *self.kind_counts.entry(sender_key).or_default() += 1;

        self.tick += 1;
        let hook = self.hooks.iter().find(|h| {
            h.kind == msg.kind
                && match &h.sender {
                    Some(s) => *s == msg.sender && h.occurrence == n_sender,
                    None => h.occurrence == n_any,
                }
        });
        match hook.map(|h| h.action.clone()) {
            Some(HookAction::Drop) => {
                self.records.push(Record::Drop { tick: self.tick, msg });
                return Ok(Delivery::Dropped);
            }
            Some(HookAction::Modify { field, value }) => {
                if let Some(f) = msg.payload.get_mut(&field) {
                    f.value = value;
                }
                self.event("hook-modify", serde_json::json!({ "message": msg.id, "field": field }));
            }
            None => {}
        }

        knowledge::apply_delivery(&mut self.knowledge, &msg);
        self.records.push(Record::Message { tick: self.tick, msg: msg.clone() });
        Ok(Delivery::Delivered(msg))
    }

    pub fn knowledge_of(&self, party: &str) -> Result<&Knowledge, SimError> {
        self.knowledge.get(party).ok_or_else(|| SimError::UnknownParty(party.to_string()))
    }

    pub fn knowledge_query(&self, party: &str, selector: &Selector) -> Result<BTreeSet<String>, SimError> {
        Ok(self.knowledge_of(party)?.query(selector))
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Close the run and attach the knowledge snapshot.
    pub fn finish(self) -> Transcript {
        let roles = self.roles;
        let snapshot = self
            .knowledge
            .into_iter()
            .map(|(party, k)| {
                let role = roles.get(&party).cloned().unwrap_or_default();
                PartySnapshot::from_knowledge(party, role, k)
            })
            .collect();
        Transcript { header: self.header, records: self.records, snapshot }
    }
}
