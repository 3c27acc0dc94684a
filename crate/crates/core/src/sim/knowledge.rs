//! What each party has learned from delivered traffic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{KeyId, Label, Message, PartyId};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub field: String,
    pub label: Label,
    pub value: String,
}

/// Traffic metadata observed by a carrier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaItem {
    pub message: u64,
    /// Message kind, or `"encrypted"` when the carrier cannot open it.
    pub kind: String,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub field_names: Vec<String>,
    pub field_count: usize,
}

pub const OPAQUE_KIND: &str = "encrypted";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knowledge {
    pub keys: BTreeSet<KeyId>,
    pub items: BTreeSet<KnowledgeItem>,
    pub metadata: Vec<MetaItem>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selector {
    Label(Label),
    Field(String),
}

impl Knowledge {
    pub fn query(&self, selector: &Selector) -> BTreeSet<String> {
        self.items
            .iter()
            .filter(|i| match selector {
                Selector::Label(l) => i.label == *l,
                Selector::Field(f) => i.field == *f,
            })
            .map(|i| i.value.clone())
            .collect()
    }

    fn can_open(&self, key: Option<&KeyId>) -> bool {
        key.is_none_or(|k| self.keys.contains(k))
    }
}

/// Knowledge values for one field. Arrays contribute each element.
pub fn value_strings(v: &Value) -> Vec<String> {
    fn one(v: &Value) -> String {
        match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
    match v {
        Value::Array(items) => items.iter().map(one).collect(),
        Value::Null => Vec::new(),
        other => vec![one(other)],
    }
}

fn readable_items(k: &Knowledge, msg: &Message) -> Vec<KnowledgeItem> {
    msg.payload
        .iter()
        .filter(|(_, f)| k.can_open(f.sealed.as_ref()))
        .flat_map(|(name, f)| {
            value_strings(&f.value).into_iter().map(move |value| KnowledgeItem {
                field: name.clone(),
                label: f.label,
                value,
            })
        })
        .collect()
}

/// Update knowledge for one delivered message.
pub fn apply_delivery(all: &mut BTreeMap<PartyId, Knowledge>, msg: &Message) {
    if let Some(k) = all.get_mut(&msg.receiver) {
        if k.can_open(msg.envelope.as_ref()) {
            let items = readable_items(k, msg);
            k.items.extend(items);
        }
    }
    let Some(carrier) = &msg.channel.carrier else { return };
    if *carrier == msg.sender || *carrier == msg.receiver {
        return;
    }
    let Some(k) = all.get_mut(carrier) else { return };
    if k.can_open(msg.envelope.as_ref()) {
        let items = readable_items(k, msg);
        k.items.extend(items);
        k.metadata.push(MetaItem {
            message: msg.id,
            kind: msg.kind.clone(),
            sender: msg.sender.clone(),
            receiver: msg.receiver.clone(),
            field_names: msg.payload.keys().cloned().collect(),
            field_count: msg.payload.len(),
        });
    } else {
        k.metadata.push(MetaItem {
            message: msg.id,
            kind: OPAQUE_KIND.to_string(),
            sender: msg.sender.clone(),
            receiver: msg.receiver.clone(),
            field_names: Vec::new(),
            field_count: msg.payload.len(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn arrays_expand_and_strings_unquote() {
        assert_eq!(value_strings(&json!(["a", 1])), vec!["a".to_string(), "1".to_string()]);
        assert_eq!(value_strings(&json!("x")), vec!["x".to_string()]);
        assert_eq!(value_strings(&json!({"a": 1})), vec!["{\"a\":1}".to_string()]);
        assert!(value_strings(&Value::Null).is_empty());
    }

    #[test]
    fn query_by_field_and_label() {
        let mut k = Knowledge::default();
        k.items.insert(KnowledgeItem { field: "good_id".into(), label: Label::Good, value: "cola".into() });
        k.items.insert(KnowledgeItem { field: "price".into(), label: Label::Price, value: "3".into() });
        assert_eq!(k.query(&Selector::Label(Label::Good)).len(), 1);
        assert!(k.query(&Selector::Field("price".into())).contains("3"));
        assert!(k.query(&Selector::Label(Label::Identity)).is_empty());
    }
}
