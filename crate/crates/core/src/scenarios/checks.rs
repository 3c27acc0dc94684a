//! Property checks over a finished transcript. Every check reads only the
//! transcript, the script and, for generic attacks, an attack-free
//! baseline transcript.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::facility::OUTSIDE;
use super::pos::{CLONED_DEVICE, SECOND_POS};
use super::script::{parse_selector, Expect, ScenarioKind, Script, GENERIC_ATTACKS};
use super::world::REPLAYER;
use crate::restriction::FeatureMap;
use crate::sim::audit::audit;
use crate::sim::{Label, Record, Selector, Transcript};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.to_string(), passed, detail: detail.into() }
    }

    fn from_findings(name: &str, findings: Vec<String>) -> Self {
        Check::new(name, findings.is_empty(), findings.join("; "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub attacks: Vec<String>,
    pub variants: BTreeMap<String, String>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl Report {
    pub fn push(&mut self, check: Check) {
        self.passed &= check.passed;
        self.checks.push(check);
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// A recorded verifier decision.
#[derive(Clone, Debug, Deserialize)]
pub struct VerdictEvent {
    pub id: u64,
    pub verifier: String,
    pub prover: String,
    pub aik: String,
    pub accepted: bool,
    pub reasons: Vec<String>,
    pub purpose: String,
    pub target: bool,
}

/// Events with their record position.
fn events<'a>(t: &'a Transcript, name: &'a str) -> impl Iterator<Item = (usize, &'a Value)> + 'a {
    t.records.iter().enumerate().filter_map(move |(i, r)| match r {
        Record::Event { name: n, data, .. } if n == name => Some((i, data)),
        _ => None,
    })
}

pub fn verdicts(t: &Transcript) -> Vec<(usize, VerdictEvent)> {
    events(t, "verdict").filter_map(|(i, v)| serde_json::from_value(v.clone()).ok().map(|e| (i, e))).collect()
}

fn str_of<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

fn grants<'a>(t: &'a Transcript, kind: Option<&'a str>) -> impl Iterator<Item = (usize, &'a Value)> + 'a {
    events(t, "grant").filter(move |(_, g)| kind.is_none_or(|k| str_of(g, "kind") == k))
}

fn knowledge(t: &Transcript, party: &str, selector: &Selector) -> BTreeSet<String> {
    t.snapshot_of(party).map(|s| s.to_knowledge().query(selector)).unwrap_or_default()
}

fn label(t: &Transcript, party: &str, l: Label) -> BTreeSet<String> {
    knowledge(t, party, &Selector::Label(l))
}

fn field(t: &Transcript, party: &str, f: &str) -> BTreeSet<String> {
    knowledge(t, party, &Selector::Field(f.to_string()))
}

/// Run every applicable check.
pub fn evaluate(script: &Script, t: &Transcript, baseline: Option<&Transcript>) -> Report {
    let h = &t.header;
    let mut r = Report {
        scenario: h.scenario.clone(),
        seed: h.seed,
        attacks: h.attacks.clone(),
        variants: h.variants.clone(),
        checks: Vec::new(),
        passed: true,
    };
    let attack = h.attacks.first().map(String::as_str);
    r.push(Check::from_findings("audit", audit(t)));
    r.push(grants_backed(t));
    r.push(deliveries_confirmed(t));
    r.push(aik_single_acceptance(t));
    r.push(aik_single_use(t));
    r.push(dishonest_rejected(script, t));
    if attack.is_none() {
        r.push(honest_accepted(script, t));
    }
    if script.kind == ScenarioKind::Prepaid {
        r.push(balance_conserved(t));
    }
    match script.kind {
        ScenarioKind::OneTimeAik => {
            if attack.is_none() {
                r.push(replenish_count(script, t));
            }
            r.push(blind("service-identity-blind", t, t.parties_with_role("service"), &[Label::Identity]));
        }
        ScenarioKind::Clone => {
            r.push(single_admission(script, t));
            if h.variants.get("mode").map(String::as_str) == Some("bound") {
                r.push(bound_admits_original(script, t));
            }
        }
        ScenarioKind::Prepaid => {
            r.push(prepaid_anonymity(t));
            r.push(prepaid_tamper_free(script, t, attack));
        }
        ScenarioKind::PosFig4 => {
            r.push(fig4_order(t));
            r.push(fig4_good_visibility(t));
            r.push(fig4_pos_identity(script, t));
            r.push(blind("pos-identity-blind", t, t.parties_with_role("pos"), &[Label::Identity]));
        }
        ScenarioKind::PosBilling => {
            r.push(billing_order(t));
            r.push(billing_package_exact(t));
            r.push(charging_blind(t));
            r.push(owner_blind(script, t));
            r.push(merged_linkage(t));
        }
        ScenarioKind::Facility => {
            let sensitive: Vec<Label> = Label::SENSITIVE.to_vec();
            r.push(blind("external-blind", t, t.parties_with_role("external-provider"), &sensitive));
            r.push(zone_policy(script, t));
            r.push(outbound_filtered(script, t));
        }
    }
    match attack {
        None => {
            if !script.expect.is_empty() {
                r.push(expectations("expect", &script.expect, t));
            }
        }
        Some(a) if GENERIC_ATTACKS.contains(&a) => {
            for c in generic_attack(a, t, baseline) {
                r.push(c);
            }
        }
        Some(a) => {
            r.push(specific_attack(a, t));
            if let Some(exp) = script.attack_expect.get(a) {
                r.push(expectations(&format!("attack-expect:{a}"), exp, t));
            }
        }
    }
    r
}

/// Each grant cites earlier accepted verdicts about the same prover, and
/// the prover's latest verdict before the grant was accepted.
fn grants_backed(t: &Transcript) -> Check {
    let vs = verdicts(t);
    let mut bad = Vec::new();
    for (pos, g) in grants(t, None) {
        let prover = str_of(g, "prover");
        let cited: Vec<u64> = g
            .get("verdicts")
            .and_then(Value::as_array)
            .map_or(Vec::new(), |a| a.iter().filter_map(Value::as_u64).collect());
        if cited.is_empty() {
            bad.push(format!("grant at record {pos} cites no verdict"));
        }
        for id in cited {
            match vs.iter().find(|(_, v)| v.id == id) {
                Some((i, v)) if *i < pos && v.accepted && v.prover == prover => {}
                _ => bad.push(format!(
                    "grant at record {pos} cites verdict {id} that is not an earlier acceptance of {prover}"
                )),
            }
        }
        let latest = vs.iter().rev().find(|(i, v)| *i < pos && v.prover == prover);
        if !latest.is_some_and(|(_, v)| v.accepted) {
            bad.push(format!("grant at record {pos}: latest verdict about {prover} was not an acceptance"));
        }
    }
    Check::from_findings("grants-backed", bad)
}

fn deliveries_confirmed(t: &Transcript) -> Check {
    let mut confirmed = BTreeSet::new();
    let mut bad = Vec::new();
    for r in &t.records {
        match r {
            Record::Event { name, data, .. } if name == "confirmation" => {
                confirmed.insert(str_of(data, "order_id").to_string());
            }
            Record::Message { msg, .. } if msg.kind == "delivery" => {
                let order = msg.payload.get("order_id").and_then(|f| f.value.as_str()).unwrap_or("");
                if !confirmed.contains(order) {
                    bad.push(format!("delivery for {order} without confirmation"));
                }
            }
            _ => {}
        }
    }
    Check::from_findings("deliveries-confirmed", bad)
}

fn aik_single_acceptance(t: &Transcript) -> Check {
    let mut seen = BTreeSet::new();
    let bad = verdicts(t)
        .into_iter()
        .filter(|(_, v)| v.accepted && !seen.insert((v.verifier.clone(), v.aik.clone())))
        .map(|(_, v)| format!("{} accepted aik {} twice", v.verifier, v.aik))
        .collect();
    Check::from_findings("aik-single-acceptance", bad)
}

fn aik_single_use(t: &Transcript) -> Check {
    let mut seen = BTreeSet::new();
    let bad = verdicts(t)
        .into_iter()
        .filter(|(_, v)| !seen.insert((v.prover.clone(), v.aik.clone())))
        .map(|(_, v)| format!("{} presented aik {} twice", v.prover, v.aik))
        .collect();
    Check::from_findings("aik-single-use", bad)
}

fn honest(script: &Script, prover: &str) -> Option<bool> {
    match prover {
        REPLAYER | CLONED_DEVICE => None,
        p => script.party(p).map(|d| d.honest()),
    }
}

fn dishonest_rejected(script: &Script, t: &Transcript) -> Check {
    let bad = verdicts(t)
        .into_iter()
        .filter(|(_, v)| honest(script, &v.prover) == Some(false) && v.accepted)
        .map(|(_, v)| format!("verdict {} accepted dishonest {}", v.id, v.prover))
        .collect();
    Check::from_findings("dishonest-rejected", bad)
}

fn honest_accepted(script: &Script, t: &Transcript) -> Check {
    let bad = verdicts(t)
        .into_iter()
        .filter(|(_, v)| honest(script, &v.prover) == Some(true) && !v.accepted)
        .map(|(_, v)| format!("verdict {} rejected honest {}: {}", v.id, v.prover, v.reasons.join(",")))
        .collect();
    Check::from_findings("honest-accepted", bad)
}

fn blind<'a>(name: &str, t: &Transcript, parties: impl Iterator<Item = &'a str>, labels: &[Label]) -> Check {
    let mut bad = Vec::new();
    for p in parties {
        for l in labels {
            let known = label(t, p, *l);
            if !known.is_empty() {
                bad.push(format!("{p} knows {} values: {known:?}", l.as_str()));
            }
        }
    }
    Check::from_findings(name, bad)
}

fn balance_conserved(t: &Transcript) -> Check {
    let Some((_, prov)) = events(t, "provision").next() else {
        return Check::new("balance-conserved", false, "no provision event");
    };
    let mut running = prov.get("balance").and_then(Value::as_i64).unwrap_or(0);
    let mut bad = Vec::new();
    for (i, b) in events(t, "balance") {
        running += b.get("delta").and_then(Value::as_i64).unwrap_or(0);
        let reported = b.get("balance").and_then(Value::as_i64).unwrap_or(-1);
        if running < 0 || reported != running {
            bad.push(format!("record {i}: balance {reported}, expected {running}"));
        }
    }
    let debits = events(t, "balance").filter(|(_, b)| str_of(b, "cause") == "charge").count();
    let grant_count = grants(t, Some("prepaid")).count();
    if debits != grant_count {
        bad.push(format!("{grant_count} grants but {debits} debits"));
    }
    match events(t, "final-balance").last().and_then(|(_, f)| f.get("balance").and_then(Value::as_i64)) {
        Some(f) if f == running => {}
        other => bad.push(format!("final balance {other:?}, expected {running}")),
    }
    Check::from_findings("balance-conserved", bad)
}

fn replenish_count(script: &Script, t: &Transcript) -> Check {
    let batch: usize = t.header.variants.get("batch-size").and_then(|v| v.parse().ok()).unwrap_or(10);
    let vs = verdicts(t);
    let mut bad = Vec::new();
    for d in script.parties_for("device").filter(|d| !d.foreign) {
        let used = vs.iter().filter(|(_, v)| v.prover == d.id && v.purpose == "service").count();
        let done = events(t, "replenish").filter(|(_, e)| str_of(e, "device") == d.id && e["ok"] == true).count();
        let want = used / (batch - 1);
        if done != want {
            bad.push(format!("{}: {used} authentications, {done} replenishments, expected {want}", d.id));
        }
    }
    Check::from_findings("replenish-count", bad)
}

fn admissions(t: &Transcript) -> Vec<(String, bool, String)> {
    events(t, "admission")
        .map(|(_, a)| (str_of(a, "device").to_string(), a["admitted"] == true, str_of(a, "reason").to_string()))
        .collect()
}

fn single_admission(script: &Script, t: &Transcript) -> Check {
    let root = |id: &str| script.party(id).and_then(|p| p.clone_of.clone()).unwrap_or_else(|| id.to_string());
    let mut per: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (d, ok, _) in admissions(t) {
        if ok {
            per.entry(root(&d)).or_default().insert(d);
        }
    }
    let bad = per
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(c, s)| format!("credential of {c} admitted on {s:?}"))
        .collect();
    Check::from_findings("single-admission", bad)
}

fn bound_admits_original(script: &Script, t: &Transcript) -> Check {
    let bad = admissions(t)
        .into_iter()
        .filter(|(d, ok, _)| *ok && script.party(d).is_some_and(|p| p.clone_of.is_some()))
        .map(|(d, _, _)| format!("clone {d} admitted"))
        .collect();
    Check::from_findings("bound-admits-original", bad)
}

fn prepaid_anonymity(t: &Transcript) -> Check {
    let mut bad = Vec::new();
    if t.messages().any(|m| m.kind == "enroll-request") {
        bad.push("enroll-request on the wire".to_string());
    }
    let pool: BTreeSet<String> = t
        .messages()
        .filter(|m| m.kind == "vsim-logon")
        .filter_map(|m| m.payload.get("imsi").and_then(|f| f.value.as_str()).map(str::to_string))
        .collect();
    for mno in t.parties_with_role("mno") {
        let ids = label(t, mno, Label::Identity);
        let outside: Vec<_> = ids.difference(&pool).collect();
        if !outside.is_empty() {
            bad.push(format!("{mno} knows non-pool identities {outside:?}"));
        }
    }
    Check::from_findings("prepaid-anonymity", bad)
}

fn prepaid_tamper_free(script: &Script, t: &Transcript, attack: Option<&str>) -> Check {
    let tampered =
        script.party(&script.subject).is_some_and(|p| !p.honest()) || matches!(attack, Some("tamper" | "forge-log"));
    if !tampered {
        return Check::new("prepaid-tampered-no-service", true, "not applicable");
    }
    let g = grants(t, Some("prepaid")).count();
    let debits = events(t, "balance").filter(|(_, b)| str_of(b, "cause") == "charge").count();
    Check::new("prepaid-tampered-no-service", g == 0 && debits == 0, format!("{g} grants, {debits} debits"))
}

fn steps(t: &Transcript, name: &str) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (_, e) in events(t, name) {
        out.entry(str_of(e, "order_id").to_string()).or_default().push(str_of(e, "step").to_string());
    }
    out
}

fn delivered_orders(t: &Transcript) -> BTreeSet<String> {
    grants(t, Some("delivery")).map(|(_, g)| str_of(g, "order_id").to_string()).collect()
}

fn fig4_order(t: &Transcript) -> Check {
    let flag = |k: &str| t.header.variants.get(k).is_none_or(|v| v == "on");
    let mut full = vec!["1", "2"];
    if flag("notify-vendor") {
        full.push("3");
    }
    if flag("notify-payment") {
        full.push("4");
    }
    full.extend(["5", "6", "7"]);
    let delivered = delivered_orders(t);
    let mut bad = Vec::new();
    for (order, seen) in steps(t, "fig4-step") {
        if !seen.windows(2).all(|w| w[0] < w[1]) || seen.iter().any(|s| !full.contains(&s.as_str())) {
            bad.push(format!("{order}: steps {seen:?}"));
        }
        if delivered.contains(&order) && seen != full {
            bad.push(format!("{order} delivered after steps {seen:?}, expected {full:?}"));
        }
    }
    Check::from_findings("fig4-order", bad)
}

fn fig4_good_visibility(t: &Transcript) -> Check {
    let encrypted = t.header.variants.get("encryption").is_none_or(|v| v == "on");
    let ordered = t.messages().any(|m| m.kind == "purchase-order");
    let mut bad = Vec::new();
    for mno in t.parties_with_role("mno") {
        let goods = label(t, mno, Label::Good);
        if encrypted && !goods.is_empty() {
            bad.push(format!("{mno} reads goods {goods:?} with encryption on"));
        }
        if !encrypted && ordered && goods.is_empty() {
            bad.push(format!("{mno} reads no goods with encryption off"));
        }
    }
    for v in t.parties_with_role("vendor") {
        if ordered && t.messages().any(|m| m.kind == "vendor-notice") && label(t, v, Label::Good).is_empty() {
            bad.push(format!("vendor {v} never learns the good"));
        }
    }
    Check::from_findings("good-visibility", bad)
}

fn fig4_pos_identity(script: &Script, t: &Transcript) -> Check {
    let Some(cfg) = &script.pos else { return Check::new("pos-identity-exposure", false, "no [pos] section") };
    let checked = t.header.variants.get("pos-check").is_some_and(|v| v == "mno");
    let answered = t.messages().any(|m| m.kind == "pos-identity-answer");
    let mut bad = Vec::new();
    for mno in t.parties_with_role("mno") {
        let knows = label(t, mno, Label::Identity).contains(&cfg.pos_identity);
        if knows && !checked {
            bad.push(format!("{mno} learned the POS identity without a check"));
        }
        if checked && answered && !knows {
            bad.push(format!("{mno} ran the check but lacks the POS identity"));
        }
    }
    for d in t.parties_with_role("device") {
        if label(t, d, Label::Identity).contains(&cfg.pos_identity) {
            bad.push(format!("device {d} learned the POS identity"));
        }
    }
    Check::from_findings("pos-identity-exposure", bad)
}

fn billing_order(t: &Transcript) -> Check {
    let full = ["i", "ii", "iii", "iv"];
    let delivered = delivered_orders(t);
    let mut bad = Vec::new();
    for (order, seen) in steps(t, "billing-step") {
        let idx: Vec<usize> = seen.iter().filter_map(|s| full.iter().position(|f| f == s)).collect();
        if idx.len() != seen.len() || !idx.windows(2).all(|w| w[1] == w[0] + 1) || idx.first().is_some_and(|f| *f != 0)
        {
            bad.push(format!("{order}: steps {seen:?}"));
        }
        if delivered.contains(&order) && idx.len() != full.len() {
            bad.push(format!("{order} delivered after steps {seen:?}"));
        }
    }
    Check::from_findings("billing-order", bad)
}

fn billing_package_exact(t: &Transcript) -> Check {
    let want: BTreeSet<&str> = ["auth_token", "grand_total", "signature"].into();
    let bad = t
        .messages()
        .filter(|m| m.kind == "billing-package")
        .filter(|m| m.payload.keys().map(String::as_str).collect::<BTreeSet<_>>() != want)
        .map(|m| format!("message {} carries {:?}", m.id, m.payload.keys().collect::<Vec<_>>()))
        .collect();
    Check::from_findings("billing-package-exact", bad)
}

fn charging_blind(t: &Transcript) -> Check {
    let mut bad = Vec::new();
    for p in t.parties_with_role("charging-provider") {
        if !label(t, p, Label::Good).is_empty() {
            bad.push(format!("{p} knows goods"));
        }
        for f in ["goods", "prices", "pos_location"] {
            if !field(t, p, f).is_empty() {
                bad.push(format!("{p} knows field {f}"));
            }
        }
    }
    Check::from_findings("charging-blind", bad)
}

/// The POS owner sees the basket and its own location, never who bought.
fn owner_blind(script: &Script, t: &Transcript) -> Check {
    let allowed: BTreeSet<String> =
        script.pos.iter().flat_map(|c| [c.pos_location.clone(), c.pos_identity.clone()]).collect();
    let mut bad = Vec::new();
    for p in t.parties_with_role("pos-owner") {
        if !field(t, p, "ek_certificate").is_empty() {
            bad.push(format!("{p} knows an EK certificate"));
        }
        let ids: Vec<_> = label(t, p, Label::Identity).into_iter().filter(|v| !allowed.contains(v)).collect();
        if !ids.is_empty() {
            bad.push(format!("{p} knows identities {ids:?}"));
        }
    }
    Check::from_findings("owner-blind", bad)
}

/// Auth tokens a party holds that it can tie to an enrolled EK.
pub fn profile_links(t: &Transcript, party: &str) -> BTreeSet<String> {
    let enrolled = field(t, party, "aik_publics");
    let tokens = field(t, party, "auth_token");
    enrolled.into_iter().filter(|aik| tokens.iter().any(|tok| tok.contains(aik.as_str()))).collect()
}

fn merged_linkage(t: &Transcript) -> Check {
    let charged = t.messages().any(|m| m.kind == "billing-package");
    let mut bad = Vec::new();
    for p in t.parties_with_role("charging-provider") {
        let merged = t.role_of(p).is_some_and(|r| r.split('+').any(|x| x == "pca"));
        let ids = label(t, p, Label::Identity);
        let links = profile_links(t, p);
        if merged && charged && (ids.is_empty() || links.is_empty()) {
            bad.push(format!(
                "{p} plays PCA and charging but holds {} identities, {} profile links",
                ids.len(),
                links.len()
            ));
        }
        if !merged && !(ids.is_empty() && links.is_empty()) {
            bad.push(format!(
                "separate charging provider {p} holds {} identities, {} profile links",
                ids.len(),
                links.len()
            ));
        }
    }
    Check::from_findings("charging-linkage", bad)
}

fn zone_policy(script: &Script, t: &Transcript) -> Check {
    let Some(cfg) = &script.facility else { return Check::new("zone-policy", false, "no [facility] section") };
    let mut bad = Vec::new();
    for (i, e) in events(t, "policy-applied") {
        let zone = e.get("zone").and_then(Value::as_str);
        let got: Option<FeatureMap> = serde_json::from_value(e["features"].clone()).ok();
        let want = cfg.policy.effective(zone);
        if got.as_ref() != Some(&want) {
            bad.push(format!("record {i}: {} got {got:?}, expected {want:?}", zone.unwrap_or(OUTSIDE)));
        }
    }
    Check::from_findings("zone-policy", bad)
}

fn outbound_filtered(script: &Script, t: &Transcript) -> Check {
    let Some(cfg) = &script.facility else { return Check::new("outbound-filtered", false, "no [facility] section") };
    let bad = t
        .messages()
        .filter(|m| m.kind == "facility-request")
        .flat_map(|m| {
            m.payload
                .keys()
                .filter(|f| !cfg.allowed_outbound.contains(f))
                .map(move |f| format!("message {} carries {f}", m.id))
        })
        .collect();
    Check::from_findings("outbound-filtered", bad)
}

/// Reason set a generic attack must produce, given the baseline reasons.
pub fn expected_reasons(attack: &str, baseline: &BTreeSet<String>) -> BTreeSet<String> {
    let mut b: BTreeSet<String> = baseline.iter().filter(|r| *r != "ok").cloned().collect();
    let add = match attack {
        "tamper" => "reference-mismatch",
        "forge-log" => {
            b.remove("reference-mismatch");
            "log-pcr-mismatch"
        }
        "wrong-nonce" => "stale-nonce",
        "expired-cert" => "cert-expired",
        "replay-aik" => "aik-reused",
        _ => return b,
    };
    b.insert(add.to_string());
    b
}

fn target(t: &Transcript) -> Vec<VerdictEvent> {
    verdicts(t).into_iter().filter(|(_, v)| v.target).map(|(_, v)| v).collect()
}

fn generic_attack(attack: &str, t: &Transcript, baseline: Option<&Transcript>) -> Vec<Check> {
    let name = format!("attack:{attack}");
    let Some(base) = baseline else { return vec![Check::new(&name, false, "no baseline run")] };
    let base_targets = target(base);
    let Some(b) = base_targets.first() else {
        return vec![Check::new(&name, false, "baseline has no subject attestation")];
    };
    let targets = target(t);
    let [v] = targets.as_slice() else {
        return vec![Check::new(&name, false, format!("{} target verdicts", targets.len()))];
    };
    let got: BTreeSet<String> = v.reasons.iter().cloned().collect();
    let want = expected_reasons(attack, &b.reasons.iter().cloned().collect());
    let reasons = Check::new(&name, got == want && !v.accepted, format!("reasons {got:?}, expected {want:?}"));
    let cited = grants(t, None)
        .any(|(_, g)| g["verdicts"].as_array().is_some_and(|a| a.iter().any(|x| x.as_u64() == Some(v.id))));
    vec![reasons, Check::new("attack-not-granted", !cited, if cited { "a grant cites the target verdict" } else { "" })]
}

fn aborts(t: &Transcript) -> Vec<(String, String, String)> {
    events(t, "abort")
        .map(|(_, a)| (str_of(a, "step").to_string(), str_of(a, "reason").to_string(), str_of(a, "by").to_string()))
        .collect()
}

fn specific_attack(attack: &str, t: &Transcript) -> Check {
    let name = format!("attack:{attack}");
    let all = aborts(t);
    let delivered = grants(t, Some("delivery")).count();
    let purchases = |flow: &str| steps(t, flow).len();
    match attack {
        "strip-ack" => {
            let stripped = all.iter().filter(|(s, r, _)| s == "7" && r == "bad-ack").count();
            let orders = purchases("fig4-step");
            let ok = delivered == 0 && orders > 0 && stripped == orders;
            Check::new(&name, ok, format!("{orders} orders, {stripped} aborted at step 7, {delivered} deliveries"))
        }
        "reuse-token" => {
            let stopped = all.iter().any(|(s, r, by)| s == "ii" && r == "token-reused" && by == SECOND_POS);
            let clone_served = grants(t, None).any(|(_, g)| str_of(g, "prover") == CLONED_DEVICE);
            Check::new(
                &name,
                stopped && !clone_served,
                format!("rejected at step ii: {stopped}, clone served: {clone_served}"),
            )
        }
        "charge-refused" => {
            let refused = all.iter().filter(|(s, r, _)| s == "iv" && r == "charge-refused").count();
            let orders = purchases("billing-step");
            let ok = delivered == 0 && orders > 0 && refused == orders;
            Check::new(&name, ok, format!("{orders} orders, {refused} refused at step iv, {delivered} deliveries"))
        }
        other => Check::new(&name, false, format!("no check for attack {other}")),
    }
}

/// Script expectations against the transcript.
pub fn expectations(name: &str, e: &Expect, t: &Transcript) -> Check {
    let mut bad = Vec::new();
    let mut count = |what: &str, want: Option<usize>, got: usize| {
        if let Some(w) = want.filter(|w| *w != got) {
            bad.push(format!("{what}: {got}, expected {w}"));
        }
    };
    count("grants", e.grants, grants(t, None).count());
    count("deliveries", e.deliveries, grants(t, Some("delivery")).count());
    count("entries", e.entries, grants(t, Some("entry")).count());
    count("replenishments", e.replenishments, events(t, "replenish").filter(|(_, r)| r["ok"] == true).count());
    let admitted: Vec<String> = admissions(t).into_iter().filter(|(_, ok, _)| *ok).map(|(d, _, _)| d).collect();
    count("admitted", e.admitted_count, admitted.len());
    if let Some(want) = e.admitted.as_ref().filter(|w| **w != admitted) {
        bad.push(format!("admitted {admitted:?}, expected {want:?}"));
    }
    if let Some(want) = e.final_balance {
        let got = events(t, "final-balance").last().and_then(|(_, f)| f["balance"].as_u64());
        if got != Some(want) {
            bad.push(format!("final balance {got:?}, expected {want}"));
        }
    }
    if !e.denials.is_empty() {
        let mut got: BTreeMap<String, usize> = BTreeMap::new();
        for (_, d) in events(t, "denial").chain(events(t, "entry-denied")) {
            *got.entry(str_of(d, "reason").to_string()).or_default() += 1;
        }
        for (_, ok, reason) in admissions(t) {
            if !ok {
                *got.entry(reason).or_default() += 1;
            }
        }
        if got != e.denials {
            bad.push(format!("denials {got:?}, expected {:?}", e.denials));
        }
    }
    let all = aborts(t);
    for (step, reason) in &e.aborts {
        if !all.iter().any(|(s, r, _)| s == step && r == reason) {
            bad.push(format!("no abort at step {step} for {reason}"));
        }
    }
    for (empty, pairs) in [(true, &e.knowledge_empty), (false, &e.knowledge_nonempty)] {
        for (party, sel) in pairs {
            let Ok(selector) = parse_selector(sel) else {
                bad.push(format!("bad selector {sel}"));
                continue;
            };
            let known = knowledge(t, party, &selector);
            if known.is_empty() != empty {
                bad.push(format!(
                    "{party} {sel}: {} values, expected {}",
                    known.len(),
                    if empty { "none" } else { "some" }
                ));
            }
        }
    }
    Check::from_findings(name, bad)
}
