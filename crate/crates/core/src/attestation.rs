//! Remote attestation: challenge, response, and the verifier's checks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::anchor::Quote;
use crate::boot::{MeasurementLog, ReferenceDb};
use crate::crypto::{self, hash160, Digest160, PublicKey, Rng};
use crate::pca::AikCertificate;

/// Simulated time: one tick per delivered event.
pub type Tick = u64;

/// Minimum nonce length in bytes.
pub const NONCE_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationChallenge {
    #[serde(with = "crypto::hex_bytes")]
    pub nonce: Vec<u8>,
    pub pcr_selection: Vec<usize>,
    pub freshness_deadline: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationResponse {
    pub quote: Quote,
    pub log: MeasurementLog,
    pub certificate: AikCertificate,
}

/// Verdict reasons, in the fixed order checks run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    Ok,
    BadCertChain,
    CertExpired,
    AikReused,
    BadQuoteSignature,
    StaleNonce,
    LogPcrMismatch,
    ReferenceMismatch,
}

impl Reason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reason::Ok => "ok",
            Reason::BadCertChain => "bad-cert-chain",
            Reason::CertExpired => "cert-expired",
            Reason::AikReused => "aik-reused",
            Reason::BadQuoteSignature => "bad-quote-signature",
            Reason::StaleNonce => "stale-nonce",
            Reason::LogPcrMismatch => "log-pcr-mismatch",
            Reason::ReferenceMismatch => "reference-mismatch",
        }
    }
}

impl std::fmt::Display for Reason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `accepted` iff `reasons == [Ok]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationVerdict {
    pub accepted: bool,
    pub reasons: Vec<Reason>,
}

impl AttestationVerdict {
    fn from_failures(failures: Vec<Reason>) -> Self {
        if failures.is_empty() {
            AttestationVerdict { accepted: true, reasons: vec![Reason::Ok] }
        } else {
            AttestationVerdict { accepted: false, reasons: failures }
        }
    }

    pub fn has(&self, reason: Reason) -> bool {
        self.reasons.contains(&reason)
    }
}

/// AIK public keys a verifier (or a group of verifiers) has already seen.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsedAikSet(BTreeSet<PublicKey>);

impl UsedAikSet {
    pub fn contains(&self, aik: &PublicKey) -> bool {
        self.0.contains(aik)
    }

    /// Returns false if it was already present.
    pub fn insert(&mut self, aik: PublicKey) -> bool {
        self.0.insert(aik)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn fold(entries: impl Iterator<Item = Digest160>) -> Digest160 {
    entries.fold(Digest160::ZERO, |acc, m| {
        let mut buf = [0u8; 40];
        buf[..20].copy_from_slice(&acc.0);
        buf[20..].copy_from_slice(&m.0);
        hash160(&buf)
    })
}

/// Left fold of every log entry into a zeroed register.
pub fn recompute_pcr(log: &MeasurementLog) -> Digest160 {
    fold(log.entries.iter().map(|e| e.measurement))
}

/// Left fold of the entries that extended register `index`.
pub fn recompute_pcr_for(log: &MeasurementLog, index: usize) -> Digest160 {
    fold(log.entries.iter().filter(|e| e.pcr == index).map(|e| e.measurement))
}

/// Run every check and collect the failures. The response's AIK is added
/// to `used_aiks` whatever the outcome.
pub fn verify_attestation(
    resp: &AttestationResponse,
    challenge: &AttestationChallenge,
    now: Tick,
    pca_roots: &[PublicKey],
    refs: &ReferenceDb,
    used_aiks: &mut UsedAikSet,
) -> AttestationVerdict {
    let mut failures = Vec::new();
    let cert = &resp.certificate;

    if !pca_roots.iter().any(|root| cert.verify(root)) {
        failures.push(Reason::BadCertChain);
    }
    if !cert.valid_at(now) {
        failures.push(Reason::CertExpired);
    }
    if !used_aiks.insert(cert.aik_public) {
        failures.push(Reason::AikReused);
    }
    if !resp.quote.verify(&cert.aik_public) {
        failures.push(Reason::BadQuoteSignature);
    }
    if resp.quote.nonce != challenge.nonce || now > challenge.freshness_deadline {
        failures.push(Reason::StaleNonce);
    }

    let mut registers: BTreeSet<usize> = challenge.pcr_selection.iter().copied().collect();
    registers.extend(resp.log.entries.iter().map(|e| e.pcr));
    let pcr_ok = registers.iter().all(|&i| resp.quote.value_of(i) == Some(recompute_pcr_for(&resp.log, i)));
    if !pcr_ok {
        failures.push(Reason::LogPcrMismatch);
    }

    let refs_ok = resp.log.entries.iter().all(|e| refs.expected(&e.component) == Some(&e.measurement));
    if !refs_ok {
        failures.push(Reason::ReferenceMismatch);
    }

    AttestationVerdict::from_failures(failures)
}

/// Challenger-side state: trust roots, reference values and issued nonces.
#[derive(Clone, Debug)]
pub struct Verifier {
    pub name: String,
    pub pca_roots: Vec<PublicKey>,
    pub refs: ReferenceDb,
    pub pcr_selection: Vec<usize>,
    pub freshness_window: Tick,
    issued: BTreeSet<Vec<u8>>,
}

impl Verifier {
    pub fn new(name: impl Into<String>, pca_roots: Vec<PublicKey>, refs: ReferenceDb, freshness_window: Tick) -> Self {
        Verifier {
            name: name.into(),
            pca_roots,
            refs,
            pcr_selection: vec![0],
            freshness_window,
            issued: BTreeSet::new(),
        }
    }

    /// Fresh challenge; nonces never repeat for this verifier.
    pub fn challenge(&mut self, rng: &mut Rng, now: Tick) -> AttestationChallenge {
        let nonce = loop {
            let n = rng.bytes::<NONCE_LEN>().to_vec();
            if self.issued.insert(n.clone()) {
                break n;
            }
        };
        AttestationChallenge {
            nonce,
            pcr_selection: self.pcr_selection.clone(),
            freshness_deadline: now + self.freshness_window,
        }
    }

    pub fn verify(
        &self,
        resp: &AttestationResponse,
        challenge: &AttestationChallenge,
        now: Tick,
        used_aiks: &mut UsedAikSet,
    ) -> AttestationVerdict {
        verify_attestation(resp, challenge, now, &self.pca_roots, &self.refs, used_aiks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::{Manufacturer, TrustAnchor};
    use crate::boot::{boot, forge_log, tamper, BootChain};
    use crate::pca::{PcaConfig, PrivacyCa};

    struct Fixture {
        rng: Rng,
        anchor: TrustAnchor,
        pca: PrivacyCa,
        certs: Vec<(crate::anchor::AikId, AikCertificate)>,
        chain: BootChain,
        verifier: Verifier,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = Rng::from_seed(seed);
        let m = Manufacturer::new("acme", &mut rng);
        let mut anchor = m.manufacture("phone", &mut rng);
        let chain = BootChain::standard(&["app"], "1");
        let mut pca = PrivacyCa::new(PcaConfig::new("pca", "svc", 1000), vec![m.root()], &mut rng);
        let aiks = anchor.create_aik_batch(4, &mut rng).unwrap();
        let challenge = pca.liveness_challenge(&mut rng);
        let req = crate::pca::EnrollmentRequest {
            ek_certificate: anchor.ek_certificate().clone(),
            aik_publics: aiks.iter().map(|a| a.public).collect(),
            liveness: anchor.ek_challenge_response(&challenge),
        };
        let issued = pca.enroll(&req, &challenge, 0).unwrap();
        let certs = aiks.iter().map(|a| a.id).zip(issued).collect();
        let verifier = Verifier::new("svc", vec![pca.root()], ReferenceDb::from_chain(&chain), 8);
        Fixture { rng, anchor, pca, certs, chain, verifier }
    }

    fn respond(f: &mut Fixture, idx: usize, log: &MeasurementLog, c: &AttestationChallenge) -> AttestationResponse {
        let (id, cert) = f.certs[idx].clone();
        AttestationResponse {
            quote: f.anchor.quote(id, &c.pcr_selection, &c.nonce).unwrap(),
            log: log.clone(),
            certificate: cert,
        }
    }

    #[test]
    fn empty_log_recomputes_to_zero() {
        assert_eq!(recompute_pcr(&MeasurementLog::default()), Digest160::ZERO);
    }

    #[test]
    fn honest_attestation_accepts_and_replay_is_caught() {
        let mut f = fixture(1);
        let log = boot(&mut f.anchor, &f.chain).unwrap();
        let c = f.verifier.challenge(&mut f.rng, 0);
        let resp = respond(&mut f, 0, &log, &c);
        let mut used = UsedAikSet::default();
        let v = f.verifier.verify(&resp, &c, 1, &mut used);
        assert!(v.accepted, "{v:?}");
        assert_eq!(v.reasons, vec![Reason::Ok]);
        let replay = f.verifier.verify(&resp, &c, 2, &mut used);
        assert_eq!(replay.reasons, vec![Reason::AikReused]);
    }

    #[test]
    fn forged_log_is_caught() {
        let mut f = fixture(2);
        let log = boot(&mut f.anchor, &f.chain).unwrap();
        let c = f.verifier.challenge(&mut f.rng, 0);
        let forged = forge_log(&log, 0, hash160(b"fake")).unwrap();
        let resp = respond(&mut f, 0, &forged, &c);
        let v = f.verifier.verify(&resp, &c, 1, &mut UsedAikSet::default());
        assert_eq!(v.reasons, vec![Reason::LogPcrMismatch, Reason::ReferenceMismatch]);
    }

    #[test]
    fn forge_with_true_digest_still_accepts() {
        let mut f = fixture(3);
        let log = boot(&mut f.anchor, &f.chain).unwrap();
        let c = f.verifier.challenge(&mut f.rng, 0);
        let same = forge_log(&log, 2, log.entries[2].measurement).unwrap();
        let resp = respond(&mut f, 0, &same, &c);
        assert!(f.verifier.verify(&resp, &c, 1, &mut UsedAikSet::default()).accepted);
    }

    #[test]
    fn forge_position_independent() {
        let mut f = fixture(4);
        let log = boot(&mut f.anchor, &f.chain).unwrap();
        let mut outcomes = Vec::new();
        for (i, idx) in [0usize, 3].into_iter().enumerate() {
            let c = f.verifier.challenge(&mut f.rng, 0);
            let reference = *f.verifier.refs.expected(&log.entries[idx].component).unwrap();
            let mut fake = reference.0;
            fake[0] ^= 1;
            let forged = forge_log(&log, idx, Digest160(fake)).unwrap();
            let resp = respond(&mut f, i, &forged, &c);
            outcomes.push(f.verifier.verify(&resp, &c, 1, &mut UsedAikSet::default()).reasons);
        }
        assert_eq!(outcomes[0], outcomes[1]);
    }

    #[test]
    fn tampered_component_hits_reference_check() {
        let mut f = fixture(5);
        let bad = tamper(&f.chain, "app", b"evil").unwrap();
        let log = boot(&mut f.anchor, &bad).unwrap();
        let c = f.verifier.challenge(&mut f.rng, 0);
        let resp = respond(&mut f, 0, &log, &c);
        let v = f.verifier.verify(&resp, &c, 1, &mut UsedAikSet::default());
        assert_eq!(v.reasons, vec![Reason::ReferenceMismatch]);
    }

    #[test]
    fn wrong_nonce_and_late_response_are_stale() {
        let mut f = fixture(6);
        let log = boot(&mut f.anchor, &f.chain).unwrap();
        let c = f.verifier.challenge(&mut f.rng, 0);
        let mut other = c.clone();
        other.nonce = vec![9; NONCE_LEN];
        let resp = respond(&mut f, 0, &log, &other);
        assert_eq!(f.verifier.verify(&resp, &c, 1, &mut UsedAikSet::default()).reasons, vec![Reason::StaleNonce]);
        let resp = respond(&mut f, 1, &log, &c);
        assert_eq!(
            f.verifier.verify(&resp, &c, c.freshness_deadline + 1, &mut UsedAikSet::default()).reasons,
            vec![Reason::StaleNonce]
        );
    }

    #[test]
    fn expired_and_foreign_certificates() {
        let mut f = fixture(7);
        let log = boot(&mut f.anchor, &f.chain).unwrap();
        let mut c = f.verifier.challenge(&mut f.rng, 0);
        c.freshness_deadline = 5000;
        let resp = respond(&mut f, 0, &log, &c);
        assert_eq!(f.verifier.verify(&resp, &c, 1001, &mut UsedAikSet::default()).reasons, vec![Reason::CertExpired]);
        let mut rng = Rng::from_seed(99);
        let stranger = Verifier::new("x", vec![crate::crypto::keygen(&mut rng).public()], f.verifier.refs.clone(), 8);
        assert_eq!(stranger.verify(&resp, &c, 1, &mut UsedAikSet::default()).reasons, vec![Reason::BadCertChain]);
        let _ = &f.pca;
    }

    #[test]
    fn quote_by_other_aik_fails_signature() {
        let mut f = fixture(8);
        let log = boot(&mut f.anchor, &f.chain).unwrap();
        let c = f.verifier.challenge(&mut f.rng, 0);
        let mut resp = respond(&mut f, 0, &log, &c);
        resp.certificate = f.certs[1].1.clone();
        assert_eq!(
            f.verifier.verify(&resp, &c, 1, &mut UsedAikSet::default()).reasons,
            vec![Reason::BadQuoteSignature]
        );
    }

    #[test]
    fn verdict_is_deterministic_and_collects_all_reasons() {
        let mut f = fixture(9);
        let bad = tamper(&f.chain, "os", b"evil").unwrap();
        let log = boot(&mut f.anchor, &bad).unwrap();
        let c = f.verifier.challenge(&mut f.rng, 0);
        let mut other = c.clone();
        other.nonce = vec![1; NONCE_LEN];
        let resp = respond(&mut f, 0, &forge_log(&log, 0, Digest160::ZERO).unwrap(), &other);
        let a = f.verifier.verify(&resp, &c, 2000, &mut UsedAikSet::default());
        let b = f.verifier.verify(&resp, &c, 2000, &mut UsedAikSet::default());
        assert_eq!(a, b);
        assert_eq!(
            a.reasons,
            vec![Reason::CertExpired, Reason::StaleNonce, Reason::LogPcrMismatch, Reason::ReferenceMismatch]
        );
    }

    #[test]
    fn nonces_unique_per_verifier() {
        let mut f = fixture(10);
        let mut seen = BTreeSet::new();
        for t in 0..200 {
            assert!(seen.insert(f.verifier.challenge(&mut f.rng, t).nonce));
        }
    }
}
