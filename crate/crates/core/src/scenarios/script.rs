//! Scenario scripts: roster, configuration, event schedule, supported
//! attacks and expected outcomes. Parsed from TOML and validated before
//! anything runs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::restriction::FeaturePolicy;
use crate::sim::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    OneTimeAik,
    Clone,
    Prepaid,
    PosFig4,
    PosBilling,
    Facility,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::OneTimeAik => "one-time-aik",
            ScenarioKind::Clone => "clone",
            ScenarioKind::Prepaid => "prepaid",
            ScenarioKind::PosFig4 => "pos-fig4",
            ScenarioKind::PosBilling => "pos-billing",
            ScenarioKind::Facility => "facility",
        }
    }

    /// Variant keys this kind accepts, with the validator for each.
    fn variant_keys(&self) -> &'static [(&'static str, VariantType)] {
        use VariantType::*;
        const COMMON: [(&str, VariantType); 2] = [("batch-size", Int(2)), ("validity", Int(1))];
        match self {
            ScenarioKind::OneTimeAik | ScenarioKind::Prepaid => &COMMON,
            ScenarioKind::Clone => {
                &[("batch-size", Int(2)), ("validity", Int(1)), ("mode", Choice(&["bound", "unbound"]))]
            }
            ScenarioKind::PosFig4 => &[
                ("batch-size", Int(2)),
                ("validity", Int(1)),
                ("encryption", Choice(&["on", "off"])),
                ("pos-check", Choice(&["none", "mno"])),
                ("notify-vendor", Choice(&["on", "off"])),
                ("notify-payment", Choice(&["on", "off"])),
            ],
            ScenarioKind::PosBilling => &[
                ("batch-size", Int(2)),
                ("validity", Int(1)),
                ("encryption", Choice(&["on", "off"])),
                ("billing", Choice(&["centralised", "decentralised"])),
                ("token-check", Choice(&["owner", "direct"])),
                ("charge-limit", Int(0)),
            ],
            ScenarioKind::Facility => &[
                ("batch-size", Int(2)),
                ("validity", Int(1)),
                ("gate-mode", Choice(&["online", "cache"])),
                ("cache-window", Int(1)),
            ],
        }
    }

    /// Event ops this kind understands.
    fn ops(&self) -> &'static [&'static str] {
        match self {
            ScenarioKind::OneTimeAik => &["authenticate", "advance"],
            ScenarioKind::Clone => &["advance"],
            ScenarioKind::Prepaid => &["request", "voucher", "advance"],
            ScenarioKind::PosFig4 => &["purchase", "rotate-pseudonym", "advance"],
            ScenarioKind::PosBilling => &["purchase", "rotate-pseudonym", "advance"],
            ScenarioKind::Facility => &["enter", "exit", "terminal", "meeting", "advance"],
        }
    }

    /// Scenario-specific attacks this kind can inject.
    fn specific_attacks(&self) -> &'static [&'static str] {
        match self {
            ScenarioKind::PosFig4 => &["strip-ack"],
            ScenarioKind::PosBilling => &["reuse-token", "charge-refused"],
            _ => &[],
        }
    }

    /// Roles the driver needs in the roster.
    fn required_roles(&self) -> &'static [&'static str] {
        match self {
            ScenarioKind::OneTimeAik => &["device", "mno", "pca", "service"],
            ScenarioKind::Clone => &["device", "mno", "pca"],
            ScenarioKind::Prepaid => &["device", "mno", "pca"],
            ScenarioKind::PosFig4 => {
                &["device", "pos", "pos-owner", "mno", "pca", "pos-pca", "vendor", "payment-provider"]
            }
            ScenarioKind::PosBilling => {
                &["device", "pos", "pos-owner", "mno", "pca", "pos-pca", "auth-provider", "charging-provider"]
            }
            ScenarioKind::Facility => {
                &["device", "gate", "company-server", "pca", "mno", "enforcer", "external-provider"]
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum VariantType {
    /// Unsigned integer with a minimum.
    Int(u64),
    Choice(&'static [&'static str]),
}

impl VariantType {
    fn check(&self, key: &str, value: &str) -> Result<(), String> {
        match self {
            VariantType::Int(min) => match value.parse::<u64>() {
                Ok(v) if v >= *min => Ok(()),
                _ => Err(format!("variant {key} must be an integer >= {min}, got {value:?}")),
            },
            VariantType::Choice(options) if options.contains(&value) => Ok(()),
            VariantType::Choice(options) => Err(format!("variant {key} must be one of {options:?}, got {value:?}")),
        }
    }

    fn describe(&self) -> String {
        match self {
            VariantType::Int(min) => format!("integer >= {min}"),
            VariantType::Choice(options) => options.join("|"),
        }
    }
}

pub const GENERIC_ATTACKS: [&str; 5] = ["forge-log", "tamper", "wrong-nonce", "expired-cert", "replay-aik"];

pub const DEFAULT_BATCH_SIZE: u64 = 10;
pub const DEFAULT_VALIDITY: u64 = 1000;

pub const ROLES: &[&str] = &[
    "device",
    "mno",
    "pca",
    "service",
    "pos",
    "pos-owner",
    "pos-pca",
    "vendor",
    "payment-provider",
    "auth-provider",
    "charging-provider",
    "gate",
    "company-server",
    "enforcer",
    "external-provider",
    "terminal",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartyDecl {
    pub id: String,
    pub role: String,
    /// Further roles played by the same party.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub also: Vec<String>,
    /// Boot component replaced with a modified payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tamper: Option<String>,
    /// Enrolled with a PCA outside the scenario's trust domain.
    #[serde(default, skip_serializing_if = "is_false")]
    pub foreign: bool,
    /// Holds a copy of another device's generic credential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clone_of: Option<String>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl PartyDecl {
    pub fn plays(&self, role: &str) -> bool {
        self.role == role || self.also.iter().any(|r| r == role)
    }

    /// Expected to pass attestation in an attack-free run.
    pub fn honest(&self) -> bool {
        self.tamper.is_none() && !self.foreign
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EventSpec {
    Authenticate {
        count: usize,
        service: String,
    },
    Advance {
        ticks: u64,
    },
    Request {
        service: String,
        units: u64,
    },
    Voucher {
        value: u64,
        #[serde(default)]
        replay: bool,
    },
    Purchase {
        goods: Vec<String>,
    },
    RotatePseudonym,
    Enter {
        device: String,
        zone: String,
    },
    Exit {
        device: String,
    },
    Terminal {
        device: String,
        terminal: String,
        request: String,
        room: String,
    },
    Meeting {
        room: String,
        until: String,
        attendees: Vec<String>,
        title: String,
    },
}

impl EventSpec {
    pub fn op(&self) -> &'static str {
        match self {
            EventSpec::Authenticate { .. } => "authenticate",
            EventSpec::Advance { .. } => "advance",
            EventSpec::Request { .. } => "request",
            EventSpec::Voucher { .. } => "voucher",
            EventSpec::Purchase { .. } => "purchase",
            EventSpec::RotatePseudonym => "rotate-pseudonym",
            EventSpec::Enter { .. } => "enter",
            EventSpec::Exit { .. } => "exit",
            EventSpec::Terminal { .. } => "terminal",
            EventSpec::Meeting { .. } => "meeting",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepaidConfig {
    pub pool_size: usize,
    /// Pool IMSIs already in use by other group members.
    #[serde(default)]
    pub busy: Vec<String>,
    pub initial_balance: u64,
    pub tariffs: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosConfig {
    pub prices: BTreeMap<String, u64>,
    pub pos_identity: String,
    pub pos_location: String,
    /// Certificate validity for POS pseudonyms, in ticks.
    pub pseudonym_validity: u64,
    #[serde(default = "default_modality")]
    pub modality: String,
}

fn default_modality() -> String {
    "mno-bill".to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacilityConfig {
    pub gates: Vec<String>,
    pub zones: Vec<String>,
    pub policy: FeaturePolicy,
    /// Field names the enforcer lets through to the external provider.
    pub allowed_outbound: Vec<String>,
    /// Boot component that enforces the feature policy on the device.
    pub enforcer_component: String,
}

/// Checkable outcome counts and knowledge assertions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grants: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deliveries: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replenishments: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entries: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admitted_count: Option<usize>,
    /// Exact admitted device ids, in admission order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admitted: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_balance: Option<u64>,
    /// Denial reason → count.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub denials: BTreeMap<String, usize>,
    /// Required abort events as (step, reason).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aborts: Vec<(String, String)>,
    /// (party, selector) pairs whose knowledge must be empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge_empty: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge_nonempty: Vec<(String, String)>,
}

impl Expect {
    pub fn is_empty(&self) -> bool {
        *self == Expect::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub name: String,
    pub kind: ScenarioKind,
    pub description: String,
    /// Device whose first attestation generic attacks target.
    pub subject: String,
    /// Attacks this script supports.
    #[serde(default)]
    pub attacks: Vec<String>,
    /// Default variant values.
    #[serde(default)]
    pub variants: BTreeMap<String, String>,
    #[serde(rename = "party")]
    pub parties: Vec<PartyDecl>,
    #[serde(default, rename = "event")]
    pub events: Vec<EventSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepaid: Option<PrepaidConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<PosConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facility: Option<FacilityConfig>,
    #[serde(default)]
    pub expect: Expect,
    /// Expectations for runs with one scenario-specific attack.
    #[serde(default, rename = "attack-expect")]
    pub attack_expect: BTreeMap<String, Expect>,
}

/// Parse a `party:selector` knowledge selector. The selector is a label
/// name or `field:<name>`.
pub fn parse_selector(s: &str) -> Result<crate::sim::Selector, String> {
    if let Some(f) = s.strip_prefix("field:") {
        return Ok(crate::sim::Selector::Field(f.to_string()));
    }
    Label::parse(s).map(crate::sim::Selector::Label).ok_or_else(|| format!("unknown label {s:?}"))
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Script, ScenarioError> {
        let script: Script = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn party(&self, id: &str) -> Option<&PartyDecl> {
        self.parties.iter().find(|p| p.id == id)
    }

    /// First party playing `role`.
    pub fn party_for(&self, role: &str) -> Option<&PartyDecl> {
        self.parties.iter().find(|p| p.plays(role))
    }

    pub fn parties_for<'a>(&'a self, role: &'a str) -> impl Iterator<Item = &'a PartyDecl> + 'a {
        self.parties.iter().filter(move |p| p.plays(role))
    }

    /// Defaults merged with overrides, each validated.
    pub fn resolve_variants(
        &self,
        overrides: &BTreeMap<String, String>,
    ) -> Result<BTreeMap<String, String>, ScenarioError> {
        let keys = self.kind.variant_keys();
        let mut out = BTreeMap::new();
        for (k, v) in self.variants.iter().chain(overrides) {
            let (_, ty) = keys
                .iter()
                .find(|(name, _)| name == k)
                .ok_or_else(|| ScenarioError::Config(format!("unknown variant {k} for {}", self.name)))?;
            ty.check(k, v).map_err(ScenarioError::Config)?;
            out.insert(k.clone(), v.clone());
        }
        out.entry("batch-size".into()).or_insert_with(|| DEFAULT_BATCH_SIZE.to_string());
        out.entry("validity".into()).or_insert_with(|| DEFAULT_VALIDITY.to_string());
        Ok(out)
    }

    /// Reject unsupported attacks and combinations.
    pub fn check_attacks(&self, attacks: &[String]) -> Result<(), ScenarioError> {
        if attacks.len() > 1 {
            return Err(ScenarioError::Config("at most one attack per run".into()));
        }
        for a in attacks {
            if !self.attacks.contains(a) {
                return Err(ScenarioError::Config(format!("attack {a} is not supported by {}", self.name)));
            }
        }
        Ok(())
    }

    /// Human-readable variant key descriptions.
    pub fn variant_help(&self) -> BTreeMap<String, String> {
        self.kind.variant_keys().iter().map(|(k, t)| (k.to_string(), t.describe())).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |m: String| Err(ScenarioError::Config(format!("{}: {m}", self.name)));
        let mut ids = BTreeSet::new();
        for p in &self.parties {
            if !ids.insert(p.id.as_str()) {
                return err(format!("duplicate party {}", p.id));
            }
            for r in std::iter::once(&p.role).chain(&p.also) {
                if !ROLES.contains(&r.as_str()) {
                    return err(format!("party {} has unknown role {r}", p.id));
                }
            }
            if let Some(c) = &p.clone_of {
                if !self.parties.iter().any(|q| q.id == *c && q.plays("device")) {
                    return err(format!("party {} clones unknown device {c}", p.id));
                }
            }
        }
        for role in self.kind.required_roles() {
            if self.party_for(role).is_none() {
                return err(format!("roster lacks a {role}"));
            }
        }
        match self.party(&self.subject) {
            Some(p) if p.plays("device") => {}
            _ => return err(format!("subject {} is not a device in the roster", self.subject)),
        }
        let specific = self.kind.specific_attacks();
        for a in &self.attacks {
            if !GENERIC_ATTACKS.contains(&a.as_str()) && !specific.contains(&a.as_str()) {
                return err(format!("unknown attack {a}"));
            }
        }
        for a in self.attack_expect.keys() {
            if !self.attacks.contains(a) {
                return err(format!("attack-expect for unsupported attack {a}"));
            }
        }
        for e in &self.events {
            if !self.kind.ops().contains(&e.op()) {
                return err(format!("event op {} not valid for kind {}", e.op(), self.kind.as_str()));
            }
            self.validate_event(e).or_else(err)?;
        }
        self.resolve_variants(&BTreeMap::new())?;
        for exp in std::iter::once(&self.expect).chain(self.attack_expect.values()) {
            for (party, sel) in exp.knowledge_empty.iter().chain(&exp.knowledge_nonempty) {
                if self.party(party).is_none() {
                    return err(format!("expectation names unknown party {party}"));
                }
                if let Err(m) = parse_selector(sel) {
                    return err(m);
                }
            }
        }
        let needs = |present: bool, what: &str| if present { Ok(()) } else { err(format!("missing [{what}] section")) };
        match self.kind {
            ScenarioKind::Prepaid => {
                needs(self.prepaid.is_some(), "prepaid")?;
                let c = self.prepaid.as_ref().expect("checked");
                if c.pool_size == 0 {
                    return err("pool_size must be positive".into());
                }
            }
            ScenarioKind::PosFig4 | ScenarioKind::PosBilling => needs(self.pos.is_some(), "pos")?,
            ScenarioKind::Facility => {
                needs(self.facility.is_some(), "facility")?;
                let f = self.facility.as_ref().expect("checked");
                for r in &f.policy.location_rules {
                    if !f.zones.contains(&r.location) {
                        return err(format!("location rule for undeclared zone {}", r.location));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn validate_event(&self, e: &EventSpec) -> Result<(), String> {
        let device = |id: &str| match self.party(id) {
            Some(p) if p.plays("device") => Ok(()),
            _ => Err(format!("event names unknown device {id}")),
        };
        match e {
            EventSpec::Authenticate { count, service } => {
                if *count == 0 {
                    return Err("authenticate count must be positive".into());
                }
                match self.party(service) {
                    Some(p) if p.plays("service") => Ok(()),
                    _ => Err(format!("authenticate names unknown service {service}")),
                }
            }
            EventSpec::Request { service, units } => {
                let tariffs = self.prepaid.as_ref().map(|p| &p.tariffs);
                if *units == 0 {
                    return Err("request units must be positive".into());
                }
                if tariffs.is_some_and(|t| !t.contains_key(service)) {
                    return Err(format!("request for service {service} without tariff"));
                }
                Ok(())
            }
            EventSpec::Purchase { goods } => {
                if goods.is_empty() {
                    return Err("purchase needs at least one good".into());
                }
                if self.kind == ScenarioKind::PosFig4 && goods.len() != 1 {
                    return Err("fig4 purchases carry exactly one good".into());
                }
                let prices = self.pos.as_ref().map(|p| &p.prices);
                match goods.iter().find(|g| prices.is_some_and(|p| !p.contains_key(*g))) {
                    Some(g) => Err(format!("purchase of unlisted good {g}")),
                    None => Ok(()),
                }
            }
            EventSpec::Enter { device: d, zone } => {
                device(d)?;
                match &self.facility {
                    Some(f) if !f.zones.contains(zone) => Err(format!("unknown zone {zone}")),
                    _ => Ok(()),
                }
            }
            EventSpec::Exit { device: d } | EventSpec::Terminal { device: d, .. } => device(d),
            EventSpec::Voucher { value, .. } if *value == 0 => Err("voucher value must be positive".into()),
            _ => Ok(()),
        }
    }
}
