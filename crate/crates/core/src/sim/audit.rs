//! Offline transcript audit. Re-derives every party's key set, knowledge
//! and carrier metadata from the raw records and compares them with the
//! snapshot, alongside structural checks on the records themselves.
//!
//! Deliberately shares no code with the live tracker in `knowledge`.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use super::schema;
use super::transcript::{Record, Transcript};
use super::{ChannelKind, Message};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Derived {
    keys: BTreeSet<String>,
    items: BTreeSet<(String, String, String)>,
    meta: Vec<(u64, String, String, String, Vec<String>, usize)>,
}

fn flatten(v: &Value) -> Vec<String> {
    let scalar = |v: &Value| -> String {
        if let Value::String(s) = v {
            s.clone()
        } else {
            serde_json::to_string(v).unwrap_or_default()
        }
    };
    match v {
        Value::Null => vec![],
        Value::Array(a) => a.iter().map(scalar).collect(),
        _ => vec![scalar(v)],
    }
}

fn opens(keys: &BTreeSet<String>, key: &Option<String>) -> bool {
    match key {
        None => true,
        Some(k) => keys.contains(k),
    }
}

fn absorb(d: &mut Derived, msg: &Message) {
    for (name, f) in &msg.payload {
        if opens(&d.keys, &f.sealed) {
            for v in flatten(&f.value) {
                d.items.insert((name.clone(), f.label.as_str().to_string(), v));
            }
        }
    }
}

/// Audit findings; empty means the transcript is consistent.
pub fn audit(t: &Transcript) -> Vec<String> {
    let mut findings = Vec::new();
    let mut parties: BTreeMap<String, Derived> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    let mut last_tick = 0;

    for (i, r) in t.records.iter().enumerate() {
        let tick = match r {
            Record::Party { .. } => None,
            Record::Message { tick, .. }
            | Record::Drop { tick, .. }
            | Record::KeyGrant { tick, .. }
            | Record::Event { tick, .. }
            | Record::Advance { tick, .. } => Some(*tick),
        };
        if let Some(tk) = tick {
            if tk < last_tick {
                findings.push(format!("record {i}: tick {tk} goes backwards from {last_tick}"));
            }
            last_tick = last_tick.max(tk);
        }
        match r {
            Record::Party { party, .. } => {
                if parties.insert(party.clone(), Derived::default()).is_some() {
                    findings.push(format!("record {i}: party {party} registered twice"));
                }
            }
            Record::KeyGrant { party, key, .. } => match parties.get_mut(party) {
                Some(d) => {
                    d.keys.insert(key.clone());
                }
                None => findings.push(format!("record {i}: key grant to unknown party {party}")),
            },
            Record::Message { msg, .. } | Record::Drop { msg, .. } => {
                if !ids.insert(msg.id) {
                    findings.push(format!("record {i}: duplicate message id {}", msg.id));
                }
                for p in [&msg.sender, &msg.receiver].into_iter().chain(msg.channel.carrier.as_ref()) {
                    if !parties.contains_key(p) {
                        findings.push(format!("message {}: unknown party {p}", msg.id));
                    }
                }
                match schema::lookup(&msg.kind) {
                    None => findings.push(format!("message {}: unknown kind {}", msg.id, msg.kind)),
                    Some(s) => {
                        if let Err(e) = s.check(&msg.payload) {
                            findings.push(format!("message {} ({}): {e}", msg.id, msg.kind));
                        }
                    }
                }
                if msg.channel.kind == ChannelKind::ShortRange && msg.channel.carrier.is_some() {
                    findings.push(format!("message {}: short-range message has a carrier", msg.id));
                }
                if let Record::Message { .. } = r {
                    if let Some(d) = parties.get_mut(&msg.receiver) {
                        if opens(&d.keys, &msg.envelope) {
                            absorb(d, msg);
                        }
                    }
                    let carrier = msg.channel.carrier.as_ref().filter(|c| **c != msg.sender && **c != msg.receiver);
                    if let Some(d) = carrier.and_then(|c| parties.get_mut(c)) {
                        let count = msg.payload.len();
                        if opens(&d.keys, &msg.envelope) {
                            absorb(d, msg);
                            let names = msg.payload.keys().cloned().collect();
                            d.meta.push((
                                msg.id,
                                msg.kind.clone(),
                                msg.sender.clone(),
                                msg.receiver.clone(),
                                names,
                                count,
                            ));
                        } else {
                            d.meta.push((
                                msg.id,
                                "encrypted".into(),
                                msg.sender.clone(),
                                msg.receiver.clone(),
                                vec![],
                                count,
                            ));
                        }
                    }
                }
            }
            Record::Event { .. } | Record::Advance { .. } => {}
        }
    }

    let snap_parties: BTreeSet<&str> = t.snapshot.iter().map(|s| s.party.as_str()).collect();
    let derived_parties: BTreeSet<&str> = parties.keys().map(String::as_str).collect();
    if snap_parties != derived_parties {
        findings.push(format!("snapshot parties {snap_parties:?} differ from registered {derived_parties:?}"));
    }
    for s in &t.snapshot {
        let Some(d) = parties.get(&s.party) else { continue };
        let keys: BTreeSet<String> = s.keys.iter().cloned().collect();
        if keys != d.keys {
            findings.push(format!("{}: key set differs from grants", s.party));
        }
        let items: BTreeSet<(String, String, String)> =
            s.knowledge.iter().map(|k| (k.field.clone(), k.label.as_str().to_string(), k.value.clone())).collect();
        for extra in items.difference(&d.items) {
            findings.push(format!("{}: knows {}={} with no readable delivery", s.party, extra.0, extra.2));
        }
        for missing in d.items.difference(&items) {
            findings.push(format!("{}: snapshot omits {}={}", s.party, missing.0, missing.2));
        }
        let meta: Vec<_> = s
            .metadata
            .iter()
            .map(|m| {
                (m.message, m.kind.clone(), m.sender.clone(), m.receiver.clone(), m.field_names.clone(), m.field_count)
            })
            .collect();
        if meta != d.meta {
            findings.push(format!("{}: carrier metadata differs from derivation", s.party));
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::knowledge::KnowledgeItem;
    use crate::sim::{Channel, Envelope, Header, Label, Sim};
    use serde::Serialize;

    #[derive(Serialize)]
    struct Notice {
        order_id: String,
        good_id: String,
        price: u64,
    }

    fn run() -> Transcript {
        let mut s = Sim::new(Header::new("audit", 1, vec![], BTreeMap::new()));
        for p in ["d", "v", "m"] {
            s.register(p, p).unwrap();
        }
        let k = "s".to_string();
        s.grant_key("d", &k).unwrap();
        s.grant_key("v", &k).unwrap();
        let n = Notice { order_id: "1".into(), good_id: "tea".into(), price: 4 };
        s.send(Envelope::new("vendor-notice", "d", "v", Channel::mobile("m")).encrypted(Some(&k)), &n).unwrap();
        s.send(Envelope::new("vendor-notice", "d", "v", Channel::mobile("m")), &n).unwrap();
        s.finish()
    }

    #[test]
    fn clean_run_has_no_findings() {
        assert_eq!(audit(&run()), Vec::<String>::new());
    }

    #[test]
    fn detects_injected_knowledge() {
        let mut t = run();
        t.snapshot.iter_mut().find(|s| s.party == "d").unwrap().knowledge.push(KnowledgeItem {
            field: "price".into(),
            label: Label::Price,
            value: "99".into(),
        });
        assert!(audit(&t).iter().any(|f| f.contains("no readable delivery")));
    }

    #[test]
    fn detects_omitted_knowledge_and_metadata() {
        let mut t = run();
        let m = t.snapshot.iter_mut().find(|s| s.party == "m").unwrap();
        m.knowledge.clear();
        m.metadata.pop();
        let f = audit(&t);
        assert!(f.iter().any(|f| f.contains("omits")));
        assert!(f.iter().any(|f| f.contains("metadata")));
    }

    #[test]
    fn detects_schema_violation_and_short_range_carrier() {
        let mut t = run();
        if let Record::Message { msg, .. } =
            t.records.iter_mut().rev().find(|r| matches!(r, Record::Message { .. })).unwrap()
        {
            msg.payload.remove("price");
            msg.channel = Channel { kind: ChannelKind::ShortRange, carrier: Some("m".into()) };
        }
        let f = audit(&t);
        assert!(f.iter().any(|f| f.contains("missing field price")));
        assert!(f.iter().any(|f| f.contains("short-range")));
    }
}
