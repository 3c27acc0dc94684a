//! Network access with a generic credential, sub-domain admission with a
//! trust credential, clone detection, and location-gated feature policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::AttestationVerdict;
use crate::boot::MeasurementLog;
use crate::crypto::{keygen, sign_body, verify_body, KeyPair, PublicKey, Rng, Signature};

const LOGON_TAG: &str = "network-logon";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RestrictionError {
    #[error("unknown-identity")]
    UnknownIdentity,
    #[error("bad-logon-proof")]
    BadProof,
    #[error("identity {0} already issued")]
    DuplicateIdentity(String),
    #[error("no-session")]
    NoSession,
}

/// Identity-bearing network credential. Cloning it is the SIM clone.
#[derive(Clone, Debug)]
pub struct GenericCredential {
    pub device_identity: String,
    pub issuer: String,
    secret: KeyPair,
}

#[derive(Serialize)]
struct LogonBody<'a> {
    imsi: &'a str,
    challenge: &'a str,
}

impl GenericCredential {
    /// Answer a network challenge.
    pub fn prove(&self, challenge: &str) -> Signature {
        sign_body(&self.secret, LOGON_TAG, &LogonBody { imsi: &self.device_identity, challenge })
    }

    /// Sign an arbitrary body with the subscriber key.
    pub fn sign<T: Serialize + ?Sized>(&self, tag: &str, body: &T) -> Signature {
        sign_body(&self.secret, tag, body)
    }

    pub fn public(&self) -> PublicKey {
        self.secret.public()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub imsi: String,
}

/// The MNO's subscriber database and session table.
#[derive(Clone, Debug)]
pub struct MnoNetwork {
    name: String,
    subscribers: BTreeMap<String, PublicKey>,
    sessions: BTreeMap<String, Session>,
}

impl MnoNetwork {
    pub fn new(name: impl Into<String>) -> Self {
        MnoNetwork { name: name.into(), subscribers: BTreeMap::new(), sessions: BTreeMap::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn issue_credential(&mut self, imsi: &str, rng: &mut Rng) -> Result<GenericCredential, RestrictionError> {
        if self.subscribers.contains_key(imsi) {
            return Err(RestrictionError::DuplicateIdentity(imsi.to_string()));
        }
        let secret = keygen(rng);
        self.subscribers.insert(imsi.to_string(), secret.public());
        Ok(GenericCredential { device_identity: imsi.to_string(), issuer: self.name.clone(), secret })
    }

    pub fn subscriber_key(&self, imsi: &str) -> Option<&PublicKey> {
        self.subscribers.get(imsi)
    }

    pub fn is_subscriber(&self, imsi: &str) -> bool {
        self.subscribers.contains_key(imsi)
    }

    /// Open a session for a subscriber. Several sessions per identity are
    /// allowed at this layer.
    pub fn network_access(
        &mut self,
        imsi: &str,
        challenge: &str,
        proof: &Signature,
        rng: &mut Rng,
    ) -> Result<Session, RestrictionError> {
        let key = self.subscribers.get(imsi).ok_or(RestrictionError::UnknownIdentity)?;
        if !verify_body(key, LOGON_TAG, &LogonBody { imsi, challenge }, proof) {
            return Err(RestrictionError::BadProof);
        }
        let session = Session { id: format!("sess-{}", rng.token(6)), imsi: imsi.to_string() };
        self.sessions.insert(session.id.clone(), session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<&Session, RestrictionError> {
        self.sessions.get(id).ok_or(RestrictionError::NoSession)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegistryMode {
    Bound,
    Unbound,
}

impl RegistryMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bound" => Some(RegistryMode::Bound),
            "unbound" => Some(RegistryMode::Unbound),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenyReason {
    AttestationFailed,
    CloneConflict,
    CredentialInconsistency,
}

impl DenyReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DenyReason::AttestationFailed => "attestation-failed",
            DenyReason::CloneConflict => "clone-conflict",
            DenyReason::CredentialInconsistency => "credential-inconsistency",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Denied(DenyReason),
}

/// Sub-domain admissions, keyed by generic identity.
#[derive(Clone, Debug)]
pub struct SubdomainRegistry {
    pub mode: RegistryMode,
    admitted: BTreeMap<String, String>,
    bindings: BTreeMap<String, String>,
}

impl SubdomainRegistry {
    pub fn new(mode: RegistryMode) -> Self {
        SubdomainRegistry { mode, admitted: BTreeMap::new(), bindings: BTreeMap::new() }
    }

    /// Authority-recorded pair from joint enrollment.
    pub fn bind(&mut self, imsi: &str, trust_fingerprint: &str) {
        self.bindings.insert(imsi.to_string(), trust_fingerprint.to_string());
    }

    pub fn admitted(&self) -> &BTreeMap<String, String> {
        &self.admitted
    }

    /// Decide admission for `imsi` presenting a trust credential with
    /// fingerprint `fp` whose attestation produced `verdict`.
    pub fn request(&mut self, imsi: &str, fp: &str, verdict: &AttestationVerdict) -> Admission {
        if self.mode == RegistryMode::Bound && self.bindings.get(imsi).map(String::as_str) != Some(fp) {
            return Admission::Denied(DenyReason::CredentialInconsistency);
        }
        if let Some(existing) = self.admitted.get(imsi) {
            if existing != fp {
                return Admission::Denied(DenyReason::CloneConflict);
            }
        }
        if !verdict.accepted {
            return Admission::Denied(DenyReason::AttestationFailed);
        }
        self.admitted.insert(imsi.to_string(), fp.to_string());
        Admission::Admitted
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureState {
    Enabled,
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationRule {
    pub location: String,
    pub overrides: BTreeMap<String, FeatureState>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePolicy {
    pub base: BTreeMap<String, FeatureState>,
    #[serde(default)]
    pub location_rules: Vec<LocationRule>,
}

pub type FeatureMap = BTreeMap<String, FeatureState>;

impl FeaturePolicy {
    /// Base map overridden by every rule matching `location`, in order.
    pub fn effective(&self, location: Option<&str>) -> FeatureMap {
        let mut map = self.base.clone();
        if let Some(loc) = location {
            for rule in self.location_rules.iter().filter(|r| r.location == loc) {
                map.extend(rule.overrides.iter().map(|(k, v)| (k.clone(), *v)));
            }
        }
        map
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PolicyOutcome {
    Enforced(FeatureMap),
    Unenforced,
}

/// Effective feature map, provided the enforcement component was measured
/// into the boot chain and the device's attestation was accepted.
pub fn apply_policy(
    policy: &FeaturePolicy,
    location: Option<&str>,
    log: &MeasurementLog,
    enforcer_component: &str,
    verdict: &AttestationVerdict,
) -> PolicyOutcome {
    let measured = log.entries.iter().any(|e| e.component == enforcer_component);
    if !measured || !verdict.accepted {
        return PolicyOutcome::Unenforced;
    }
    PolicyOutcome::Enforced(policy.effective(location))
}
