//! Privacy CA acting as identity provider: certifies AIK batches after EK
//! checks and re-certifies on request signed by a batch's last AIK.
//!
//! Certificates carry no EK-derived or device-serial field. The PCA itself
//! can link batches to EKs; services cannot.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{verify_ek_response, verify_replenishment, AikId, EkCertificate};
use crate::attestation::{AttestationChallenge, AttestationResponse, AttestationVerdict, Tick, UsedAikSet, Verifier};
use crate::crypto::{self, keygen, sign_body, verify_body, KeyPair, PublicKey, Rng, Signature};

const AIK_CERT_TAG: &str = "trustsim/aik-certificate/v1";

/// Default AIK batch size.
pub const DEFAULT_BATCH_SIZE: usize = 10;
/// Default certificate validity in ticks.
pub const DEFAULT_VALIDITY: Tick = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PcaError {
    #[error("untrusted-ek")]
    UntrustedEk,
    #[error("ek-liveness-failed")]
    EkLivenessFailed,
    #[error("empty-request")]
    EmptyRequest,
    #[error("foreign-certificate")]
    ForeignCertificate,
    #[error("certificate-expired")]
    CertificateExpired,
    #[error("bad-replenish-signature")]
    BadReplenishSignature,
    #[error("replenish-replay")]
    ReplenishReplay,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AikCertificate {
    pub aik_public: PublicKey,
    pub domain_id: String,
    pub issuer: String,
    pub valid_from: Tick,
    pub valid_until: Tick,
    pub hash_alg: String,
    pub pca_signature: Signature,
}

#[derive(Serialize)]
struct AikCertBody<'a> {
    aik_public: &'a PublicKey,
    domain_id: &'a str,
    issuer: &'a str,
    valid_from: Tick,
    valid_until: Tick,
    hash_alg: &'a str,
}

impl AikCertificate {
    fn body(&self) -> AikCertBody<'_> {
        AikCertBody {
            aik_public: &self.aik_public,
            domain_id: &self.domain_id,
            issuer: &self.issuer,
            valid_from: self.valid_from,
            valid_until: self.valid_until,
            hash_alg: &self.hash_alg,
        }
    }

    pub fn verify(&self, pca_root: &PublicKey) -> bool {
        verify_body(pca_root, AIK_CERT_TAG, &self.body(), &self.pca_signature)
    }

    pub fn valid_at(&self, now: Tick) -> bool {
        self.valid_from <= now && now <= self.valid_until
    }

    /// Fingerprint of the certified AIK.
    pub fn fingerprint(&self) -> String {
        self.aik_public.fingerprint()
    }
}

#[derive(Clone, Debug)]
pub struct PcaConfig {
    pub name: String,
    pub domain_id: String,
    pub validity: Tick,
}

impl PcaConfig {
    pub fn new(name: impl Into<String>, domain_id: impl Into<String>, validity: Tick) -> Self {
        PcaConfig { name: name.into(), domain_id: domain_id.into(), validity }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentRequest {
    pub ek_certificate: EkCertificate,
    pub aik_publics: Vec<PublicKey>,
    /// EK signature over the PCA's liveness challenge.
    pub liveness: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplenishRequest {
    pub old_certificate: AikCertificate,
    pub new_aik_publics: Vec<PublicKey>,
    /// Signature by the old certificate's AIK over the new public keys.
    pub signature: Signature,
}

#[derive(Debug, Clone)]
pub struct PrivacyCa {
    config: PcaConfig,
    key: KeyPair,
    trusted_manufacturers: Vec<PublicKey>,
    /// AIKs spent on replenishment.
    consumed: BTreeSet<PublicKey>,
    /// Every certified AIK and the EK fingerprint it was issued for.
    issued: BTreeMap<PublicKey, String>,
}

impl PrivacyCa {
    pub fn new(config: PcaConfig, trusted_manufacturers: Vec<PublicKey>, rng: &mut Rng) -> Self {
        PrivacyCa {
            config,
            key: keygen(rng),
            trusted_manufacturers,
            consumed: BTreeSet::new(),
            issued: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn domain_id(&self) -> &str {
        &self.config.domain_id
    }

    pub fn validity(&self) -> Tick {
        self.config.validity
    }

    pub fn root(&self) -> PublicKey {
        self.key.public()
    }

    pub fn liveness_challenge(&self, rng: &mut Rng) -> Vec<u8> {
        rng.bytes::<16>().to_vec()
    }

    fn issue(&mut self, aik_public: PublicKey, ek_fp: String, now: Tick) -> AikCertificate {
        let mut cert = AikCertificate {
            aik_public,
            domain_id: self.config.domain_id.clone(),
            issuer: self.config.name.clone(),
            valid_from: now,
            valid_until: now + self.config.validity,
            hash_alg: crypto::BODY_HASH_ID.to_string(),
            pca_signature: Signature(Vec::new()),
        };
        cert.pca_signature = sign_body(&self.key, AIK_CERT_TAG, &cert.body());
        self.issued.insert(aik_public, ek_fp);
        cert
    }

    /// Certify a batch after checking EK provenance and liveness.
    pub fn enroll(
        &mut self,
        req: &EnrollmentRequest,
        challenge: &[u8],
        now: Tick,
    ) -> Result<Vec<AikCertificate>, PcaError> {
        if !self.trusted_manufacturers.iter().any(|root| req.ek_certificate.verify(root)) {
            return Err(PcaError::UntrustedEk);
        }
        if !verify_ek_response(&req.ek_certificate.ek_public, challenge, &req.liveness) {
            return Err(PcaError::EkLivenessFailed);
        }
        if req.aik_publics.is_empty() {
            return Err(PcaError::EmptyRequest);
        }
        let ek_fp = req.ek_certificate.ek_public.fingerprint();
        Ok(req.aik_publics.iter().map(|aik| self.issue(*aik, ek_fp.clone(), now)).collect())
    }

    /// Certify a new batch authorised by the last AIK of an old one.
    pub fn replenish(&mut self, req: &ReplenishRequest, now: Tick) -> Result<Vec<AikCertificate>, PcaError> {
        let old = &req.old_certificate;
        if !old.verify(&self.root()) || !self.issued.contains_key(&old.aik_public) {
            return Err(PcaError::ForeignCertificate);
        }
        if !old.valid_at(now) {
            return Err(PcaError::CertificateExpired);
        }
        if !verify_replenishment(&old.aik_public, &req.new_aik_publics, &req.signature) {
            return Err(PcaError::BadReplenishSignature);
        }
        if req.new_aik_publics.is_empty() {
            return Err(PcaError::EmptyRequest);
        }
        if !self.consumed.insert(old.aik_public) {
            return Err(PcaError::ReplenishReplay);
        }
        let ek_fp = self.issued[&old.aik_public].clone();
        Ok(req.new_aik_publics.iter().map(|aik| self.issue(*aik, ek_fp.clone(), now)).collect())
    }

    /// The PCA's own linkage from AIK to EK fingerprint.
    pub fn linked_ek(&self, aik: &PublicKey) -> Option<&str> {
        self.issued.get(aik).map(String::as_str)
    }
}

/// A service admitting devices by one-time AIK certificate plus attestation.
pub fn authenticate_for_service(
    service: &Verifier,
    response: &AttestationResponse,
    challenge: &AttestationChallenge,
    now: Tick,
    used_aiks: &mut UsedAikSet,
) -> AttestationVerdict {
    service.verify(response, challenge, now, used_aiks)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WalletError {
    #[error("aik wallet exhausted")]
    Exhausted,
    #[error("last aik is reserved for replenishment")]
    ReservedForReplenishment,
    #[error("replenishment only allowed with exactly one unused aik (have {0})")]
    NotReadyForReplenishment(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalletEntry {
    pub aik: AikId,
    pub certificate: AikCertificate,
    pub used: bool,
}

/// Device-side batch state: certified AIKs and which have been spent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AikWallet {
    entries: Vec<WalletEntry>,
}

impl AikWallet {
    pub fn add_batch(&mut self, pairs: impl IntoIterator<Item = (AikId, AikCertificate)>) {
        self.entries.extend(pairs.into_iter().map(|(aik, certificate)| WalletEntry { aik, certificate, used: false }));
    }

    pub fn count_unused(&self) -> usize {
        self.entries.iter().filter(|e| !e.used).count()
    }

    /// Replenishment is due exactly when one unused AIK remains.
    pub fn needs_replenishment(&self) -> bool {
        self.count_unused() == 1
    }

    fn take_next(&mut self) -> Option<(AikId, AikCertificate)> {
        let e = self.entries.iter_mut().find(|e| !e.used)?;
        e.used = true;
        Some((e.aik, e.certificate.clone()))
    }

    /// Next AIK for a service authentication; the last one stays reserved.
    pub fn take_for_service(&mut self) -> Result<(AikId, AikCertificate), WalletError> {
        match self.count_unused() {
            0 => Err(WalletError::Exhausted),
            1 => Err(WalletError::ReservedForReplenishment),
            _ => Ok(self.take_next().expect("unused entry")),
        }
    }

    /// Peek at the next AIK a service authentication would use.
    pub fn peek_for_service(&self) -> Option<&WalletEntry> {
        if self.count_unused() < 2 {
            return None;
        }
        self.entries.iter().find(|e| !e.used)
    }

    pub fn take_for_replenishment(&mut self) -> Result<(AikId, AikCertificate), WalletError> {
        match self.count_unused() {
            1 => Ok(self.take_next().expect("unused entry")),
            n => Err(WalletError::NotReadyForReplenishment(n)),
        }
    }

    pub fn entries(&self) -> &[WalletEntry] {
        &self.entries
    }
}
