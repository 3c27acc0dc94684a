//! Catalog transcripts pass the offline audit, and the audit notices
//! snapshot and record tampering.

use std::collections::BTreeMap;

use trustsim::scenarios::{self, GENERIC_ATTACKS};
use trustsim::sim::audit::audit;
use trustsim::sim::{KnowledgeItem, Label, Record, Transcript};

fn honest(name: &str, seed: u64) -> Transcript {
    let s = scenarios::load(name).unwrap();
    let v = s.resolve_variants(&BTreeMap::new()).unwrap();
    scenarios::execute(&s, seed, None, &v).unwrap()
}

#[test]
fn every_catalog_run_audits_clean() {
    for name in scenarios::names() {
        let s = scenarios::load(name).unwrap();
        let v = s.resolve_variants(&BTreeMap::new()).unwrap();
        for attack in std::iter::once(None).chain(s.attacks.iter().map(|a| Some(a.as_str()))) {
            let t = scenarios::execute(&s, 11, attack, &v).unwrap();
            assert_eq!(audit(&t), Vec::<String>::new(), "{name} {attack:?}");
            assert_eq!(Transcript::parse(&t.to_jsonl()).unwrap(), t);
        }
    }
    assert_eq!(GENERIC_ATTACKS.len(), 5);
}

#[test]
fn audit_flags_invented_knowledge() {
    let mut t = honest("pos-sep-duties", 1);
    let snap = t.snapshot.iter_mut().find(|s| s.party == "charging").unwrap();
    snap.knowledge.push(KnowledgeItem { field: "goods".into(), label: Label::Good, value: "cola".into() });
    assert!(!audit(&t).is_empty());
}

#[test]
fn audit_flags_hidden_knowledge() {
    let mut t = honest("prepaid-happy", 1);
    let snap = t.snapshot.iter_mut().find(|s| s.party == "mno").unwrap();
    assert!(snap.knowledge.pop().is_some());
    assert!(!audit(&t).is_empty());
}

#[test]
fn audit_flags_deleted_message() {
    let mut t = honest("facility-entry", 1);
    let i =
        t.records.iter().position(|r| matches!(r, Record::Message { msg, .. } if msg.kind == "access-rights")).unwrap();
    t.records.remove(i);
    assert!(!audit(&t).is_empty());
}

#[test]
fn seeds_change_transcripts() {
    assert_ne!(honest("one-time-aik-auth", 1).to_jsonl(), honest("one-time-aik-auth", 2).to_jsonl());
}
