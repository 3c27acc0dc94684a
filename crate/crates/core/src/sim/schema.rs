//! Central message-kind table: every field of every kind and its label.

use std::collections::BTreeMap;

use super::{Field, Label};

use Label::*;

#[derive(Clone, Copy, Debug)]
pub struct FieldSpec {
    pub name: &'static str,
    pub label: Label,
    pub required: bool,
}

const fn req(name: &'static str, label: Label) -> FieldSpec {
    FieldSpec { name, label, required: true }
}

const fn opt(name: &'static str, label: Label) -> FieldSpec {
    FieldSpec { name, label, required: false }
}

#[derive(Clone, Copy, Debug)]
pub struct KindSchema {
    pub kind: &'static str,
    pub fields: &'static [FieldSpec],
}

impl KindSchema {
    pub fn label_of(&self, field: &str) -> Option<Label> {
        self.fields.iter().find(|f| f.name == field).map(|f| f.label)
    }

    /// Field set and labels match the table exactly.
    pub fn check(&self, payload: &BTreeMap<String, Field>) -> Result<(), String> {
        for (name, field) in payload {
            match self.label_of(name) {
                None => return Err(format!("field {name} not in schema")),
                Some(l) if l != field.label => {
                    return Err(format!("field {name} labeled {} but schema says {}", field.label.as_str(), l.as_str()))
                }
                Some(_) => {}
            }
        }
        for f in self.fields.iter().filter(|f| f.required) {
            if !payload.contains_key(f.name) {
                return Err(format!("missing field {}", f.name));
            }
        }
        Ok(())
    }
}

const ATTEST_RESPONSE: &[FieldSpec] = &[req("quote", Plumbing), req("log", Plumbing), req("certificate", Token)];

pub static SCHEMAS: &[KindSchema] = &[
    // Privacy CA
    KindSchema { kind: "ek-challenge", fields: &[req("challenge", Plumbing)] },
    KindSchema {
        kind: "enroll-request",
        fields: &[req("ek_certificate", Identity), req("aik_publics", Token), req("liveness", Plumbing)],
    },
    KindSchema { kind: "aik-certificates", fields: &[req("certificates", Token)] },
    KindSchema {
        kind: "replenish-request",
        fields: &[req("old_certificate", Token), req("new_aik_publics", Token), req("signature", Plumbing)],
    },
    KindSchema { kind: "pca-reject", fields: &[req("reason", Plumbing)] },
    // Attestation
    KindSchema {
        kind: "attest-challenge",
        fields: &[req("nonce", Plumbing), req("pcr_selection", Plumbing), req("freshness_deadline", Plumbing)],
    },
    KindSchema { kind: "attest-response", fields: ATTEST_RESPONSE },
    KindSchema {
        kind: "prepaid-attest-response",
        fields: &[req("quote", Plumbing), req("log", Plumbing), req("certificate", Token), req("statement", Balance)],
    },
    // Service access
    KindSchema { kind: "service-request", fields: &[req("service", Plumbing)] },
    KindSchema {
        kind: "service-result",
        fields: &[req("service", Plumbing), req("granted", Plumbing), req("reasons", Plumbing)],
    },
    // Network and subdomains
    KindSchema { kind: "network-challenge", fields: &[req("challenge", Plumbing)] },
    KindSchema { kind: "network-logon", fields: &[req("imsi", Identity), req("proof", Plumbing)] },
    KindSchema {
        kind: "network-session",
        fields: &[req("imsi", Identity), req("accepted", Plumbing), req("session", Plumbing)],
    },
    KindSchema { kind: "subdomain-request", fields: &[req("session", Plumbing), req("domain", Plumbing)] },
    KindSchema {
        kind: "subdomain-result",
        fields: &[req("domain", Plumbing), req("admitted", Plumbing), req("reason", Plumbing)],
    },
    KindSchema { kind: "feature-policy", fields: &[req("location", Policy), req("features", Policy)] },
    // Prepaid
    KindSchema { kind: "vsim-logon", fields: &[req("imsi", Identity)] },
    KindSchema {
        kind: "vsim-logon-result",
        fields: &[req("imsi", Identity), req("accepted", Plumbing), req("session", Plumbing)],
    },
    KindSchema {
        kind: "prepaid-request",
        fields: &[req("session", Plumbing), req("service", Plumbing), req("units", Plumbing)],
    },
    KindSchema {
        kind: "prepaid-grant",
        fields: &[req("session", Plumbing), req("service", Plumbing), req("units", Plumbing), req("cost", Price)],
    },
    KindSchema {
        kind: "prepaid-deny",
        fields: &[req("session", Plumbing), req("service", Plumbing), req("reason", Plumbing)],
    },
    KindSchema {
        kind: "voucher",
        fields: &[req("voucher_id", Plumbing), req("value", Balance), req("signature", Plumbing)],
    },
    // Point of sale
    KindSchema {
        kind: "price-list",
        fields: &[req("pos", Plumbing), req("goods", Good), req("prices", Price), req("signature", Plumbing)],
    },
    KindSchema {
        kind: "purchase-order",
        fields: &[
            req("order_id", Plumbing),
            req("good_id", Good),
            req("price", Price),
            req("modality", Plumbing),
            req("imsi", Identity),
            req("pos_pseudonym", Token),
            req("signature", Plumbing),
        ],
    },
    KindSchema {
        kind: "vendor-notice",
        fields: &[req("order_id", Plumbing), req("good_id", Good), req("price", Price)],
    },
    KindSchema {
        kind: "payment-notice",
        fields: &[req("order_id", Plumbing), req("price", Price), req("modality", Plumbing)],
    },
    KindSchema {
        kind: "purchase-ack",
        fields: &[
            req("order_id", Plumbing),
            req("price", Price),
            req("pos_pseudonym", Token),
            req("accepted", Plumbing),
            req("signature", Plumbing),
        ],
    },
    KindSchema { kind: "pos-identity-query", fields: &[req("pos_certificate", Token)] },
    KindSchema { kind: "pos-identity-answer", fields: &[req("pos_identity", Identity), req("valid", Plumbing)] },
    KindSchema { kind: "pos-identity-result", fields: &[req("valid", Plumbing)] },
    KindSchema { kind: "delivery", fields: &[req("order_id", Plumbing), req("good_id", Good)] },
    KindSchema {
        kind: "purchase-selection",
        fields: &[req("order_id", Plumbing), req("goods", Good), req("auth_token", Token)],
    },
    KindSchema { kind: "token-check", fields: &[req("order_id", Plumbing), req("auth_token", Token)] },
    KindSchema {
        kind: "token-result",
        fields: &[req("order_id", Plumbing), req("valid", Plumbing), req("reason", Plumbing)],
    },
    KindSchema {
        kind: "billing-data",
        fields: &[
            req("order_id", Plumbing),
            req("auth_token", Token),
            req("goods", Good),
            req("prices", Price),
            req("pos_location", Identity),
        ],
    },
    KindSchema {
        kind: "billing-package",
        fields: &[req("auth_token", Token), req("grand_total", Price), req("signature", Plumbing)],
    },
    KindSchema {
        kind: "charge-confirmation",
        fields: &[
            req("auth_token", Token),
            req("grand_total", Price),
            req("approved", Plumbing),
            req("signature", Plumbing),
        ],
    },
    KindSchema {
        kind: "owner-ack",
        fields: &[req("order_id", Plumbing), req("approved", Plumbing), req("signature", Plumbing)],
    },
    KindSchema {
        kind: "purchase-abort",
        fields: &[req("order_id", Plumbing), req("step", Plumbing), req("reason", Plumbing)],
    },
    // Facility
    KindSchema { kind: "access-check", fields: &[req("auth_token", Token), req("zone", Policy)] },
    KindSchema {
        kind: "access-rights",
        fields: &[req("allowed", Plumbing), req("zone", Policy), req("reason", Plumbing)],
    },
    KindSchema {
        kind: "policy-cache",
        fields: &[
            req("domain", Plumbing),
            req("pca_roots", Plumbing),
            req("zones", Policy),
            req("issued_at", Plumbing),
        ],
    },
    KindSchema {
        kind: "entry-result",
        fields: &[req("zone", Policy), req("granted", Plumbing), req("reason", Plumbing)],
    },
    KindSchema {
        kind: "terminal-request",
        fields: &[req("terminal", Plumbing), req("request", Plumbing), req("room", Plumbing)],
    },
    KindSchema {
        kind: "terminal-relay",
        fields: &[
            req("terminal", Plumbing),
            req("request", Plumbing),
            req("room", Plumbing),
            req("employee", Identity),
        ],
    },
    KindSchema { kind: "terminal-result", fields: &[req("terminal", Plumbing), req("ok", Plumbing)] },
    KindSchema {
        kind: "outbound-request",
        fields: &[
            req("room", Plumbing),
            req("action", Plumbing),
            req("until", Plumbing),
            req("attendees", Identity),
            req("meeting_title", Policy),
        ],
    },
    KindSchema {
        kind: "facility-request",
        fields: &[
            req("room", Plumbing),
            req("action", Plumbing),
            req("until", Plumbing),
            opt("attendees", Identity),
            opt("meeting_title", Policy),
        ],
    },
    KindSchema { kind: "facility-ack", fields: &[req("room", Plumbing), req("ok", Plumbing)] },
];

pub fn lookup(kind: &str) -> Option<&'static KindSchema> {
    SCHEMAS.iter().find(|s| s.kind == kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn kinds_unique_and_fields_unique() {
        let mut kinds = std::collections::BTreeSet::new();
        for s in SCHEMAS {
            assert!(kinds.insert(s.kind), "duplicate kind {}", s.kind);
            let mut names = std::collections::BTreeSet::new();
            for f in s.fields {
                assert!(names.insert(f.name), "duplicate field {} in {}", f.name, s.kind);
            }
        }
    }

    #[test]
    fn billing_package_is_exactly_three_fields() {
        let s = lookup("billing-package").unwrap();
        let names: Vec<_> = s.fields.iter().map(|f| f.name).collect();
        assert_eq!(names, ["auth_token", "grand_total", "signature"]);
    }

    #[test]
    fn check_rejects_label_mismatch_and_missing() {
        let s = lookup("delivery").unwrap();
        let mut p = BTreeMap::new();
        p.insert("order_id".to_string(), Field { label: Plumbing, value: json!("o"), sealed: None });
        assert!(s.check(&p).unwrap_err().contains("missing"));
        p.insert("good_id".to_string(), Field { label: Price, value: json!("g"), sealed: None });
        assert!(s.check(&p).unwrap_err().contains("labeled"));
        p.get_mut("good_id").unwrap().label = Good;
        assert!(s.check(&p).is_ok());
    }
}
