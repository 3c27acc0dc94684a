//! Shared driver state: parties, devices, PCAs, verifiers, transport keys,
//! and the attestation/enrollment exchanges run over the simulator. Attack
//! injection for the generic attacks lives here too.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::script::Script;
use super::ScenarioError;
use crate::anchor::{Manufacturer, TrustAnchor};
use crate::attestation::{
    verify_attestation, AttestationChallenge, AttestationResponse, AttestationVerdict, Tick, UsedAikSet, Verifier,
};
use crate::boot::{boot, forge_log, tamper, BootChain, MeasurementLog, ReferenceDb};
use crate::crypto::{PublicKey, Rng};
use crate::pca::{AikCertificate, AikWallet, EnrollmentRequest, PcaConfig, PrivacyCa, ReplenishRequest};
use crate::sim::{Channel, Envelope, Header, Hook, HookAction, KeyId, Sim, Transcript};

/// Party id used for the cloned anchor in the AIK replay attack.
pub const REPLAYER: &str = "replayer";
/// Issuer outside every trusted domain; never a party in the transcript.
pub const FOREIGN_PCA: &str = "foreign-pca";
pub const FRESHNESS_WINDOW: Tick = 8;
pub const SOFTWARE_VERSION: &str = "1.0";

#[derive(Clone, Debug)]
pub struct Device {
    pub id: String,
    pub anchor: TrustAnchor,
    pub reference: BootChain,
    pub log: MeasurementLog,
    pub wallet: AikWallet,
    pub pca: String,
}

/// How a message travels: channel plus optional transport key.
#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub channel: Channel,
    pub key: Option<KeyId>,
}

impl Link {
    pub fn new(channel: Channel, key: Option<KeyId>) -> Self {
        Link { channel, key }
    }
}

#[derive(Debug)]
pub struct VerifierState {
    pub verifier: Verifier,
    pub used: UsedAikSet,
}

#[derive(Clone, Debug)]
pub struct VerdictRef {
    pub id: u64,
    pub verdict: AttestationVerdict,
    pub certificate: AikCertificate,
}

impl VerdictRef {
    pub fn accepted(&self) -> bool {
        self.verdict.accepted
    }
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct EkChallengeMsg {
    challenge: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct AikCertificatesMsg {
    certificates: Vec<AikCertificate>,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PcaRejectMsg {
    reason: String,
}

pub struct World {
    pub script: Script,
    pub variants: BTreeMap<String, String>,
    pub attack: Option<String>,
    pub sim: Sim,
    pub rng: Rng,
    pub manufacturer: Manufacturer,
    pub pcas: BTreeMap<String, PrivacyCa>,
    pub verifiers: BTreeMap<String, VerifierState>,
    pub devices: BTreeMap<String, Device>,
    pub refs: ReferenceDb,
    pub batch_size: usize,
    pub validity: Tick,
    verdict_seq: u64,
    subject_started: bool,
    target_pending: bool,
    replay_clone: Option<Device>,
    keys: BTreeSet<KeyId>,
}

impl World {
    pub fn new(
        script: &Script,
        seed: u64,
        attack: Option<String>,
        variants: BTreeMap<String, String>,
    ) -> Result<World, ScenarioError> {
        let header = Header::new(&script.name, seed, attack.iter().cloned().collect(), variants.clone());
        let mut sim = Sim::new(header);
        for p in &script.parties {
            let roles: Vec<&str> = std::iter::once(p.role.as_str()).chain(p.also.iter().map(String::as_str)).collect();
            sim.register(&p.id, &roles.join("+"))?;
        }
        let mut rng = Rng::from_seed(seed);
        let manufacturer = Manufacturer::new("acme-silicon", &mut rng);
        let parse = |k: &str| variants[k].parse::<u64>().map_err(|e| ScenarioError::Config(format!("{k}: {e}")));
        let batch_size = parse("batch-size")? as usize;
        let validity = parse("validity")?;
        let mut pcas = BTreeMap::new();
        for p in &script.parties {
            if p.plays("pca") {
                let cfg = PcaConfig::new(p.id.clone(), format!("{}-domain", p.id), validity);
                pcas.insert(p.id.clone(), PrivacyCa::new(cfg, vec![manufacturer.root()], &mut rng));
            }
            if p.plays("pos-pca") {
                let v = script.pos.as_ref().map_or(validity, |c| c.pseudonym_validity);
                let cfg = PcaConfig::new(p.id.clone(), format!("{}-domain", p.id), v);
                pcas.insert(p.id.clone(), PrivacyCa::new(cfg, vec![manufacturer.root()], &mut rng));
            }
        }
        Ok(World {
            script: script.clone(),
            variants,
            attack,
            sim,
            rng,
            manufacturer,
            pcas,
            verifiers: BTreeMap::new(),
            devices: BTreeMap::new(),
            refs: ReferenceDb::default(),
            batch_size,
            validity,
            verdict_seq: 0,
            subject_started: false,
            target_pending: false,
            replay_clone: None,
            keys: BTreeSet::new(),
        })
    }

    pub fn finish(self) -> Transcript {
        self.sim.finish()
    }

    pub fn variant(&self, key: &str) -> &str {
        self.variants.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn flag(&self, key: &str, default: bool) -> bool {
        match self.variants.get(key).map(String::as_str) {
            Some("on") => true,
            Some("off") => false,
            _ => default,
        }
    }

    pub fn variant_u64(&self, key: &str, default: u64) -> u64 {
        self.variants.get(key).and_then(|v| v.parse().ok()).unwrap_or(default)
    }

    pub fn attack_is(&self, name: &str) -> bool {
        self.attack.as_deref() == Some(name)
    }

    /// Id of the first party playing `role`.
    pub fn id_for(&self, role: &str) -> Result<String, ScenarioError> {
        self.script
            .party_for(role)
            .map(|p| p.id.clone())
            .ok_or_else(|| ScenarioError::Config(format!("roster lacks a {role}")))
    }

    pub fn pca_root(&self, pca: &str) -> Result<PublicKey, ScenarioError> {
        self.pcas.get(pca).map(PrivacyCa::root).ok_or_else(|| ScenarioError::Config(format!("{pca} is not a PCA")))
    }

    /// Session key shared by `a` and `b`, granted on first use.
    pub fn net_key(&mut self, a: &str, b: &str) -> Result<KeyId, ScenarioError> {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        let key = format!("tls:{x}|{y}");
        if self.keys.insert(key.clone()) {
            self.sim.grant_key(a, &key)?;
            self.sim.grant_key(b, &key)?;
        }
        Ok(key)
    }

    /// A key held by `holder` only, for sealing fields end to end.
    pub fn seal_key(&mut self, holder: &str) -> Result<KeyId, ScenarioError> {
        let key = format!("seal:{holder}");
        if self.keys.insert(key.clone()) {
            self.sim.grant_key(holder, &key)?;
        }
        Ok(key)
    }

    pub fn mobile(&mut self, a: &str, b: &str, encrypted: bool) -> Result<Link, ScenarioError> {
        let carrier = self.id_for("mno")?;
        let key = if encrypted { Some(self.net_key(a, b)?) } else { None };
        Ok(Link::new(Channel::mobile(&carrier), key))
    }

    pub fn direct(&mut self, a: &str, b: &str, encrypted: bool) -> Result<Link, ScenarioError> {
        let key = if encrypted { Some(self.net_key(a, b)?) } else { None };
        Ok(Link::new(Channel::direct(), key))
    }

    /// Send `body` and return what the receiver decoded. `None` when the
    /// message was dropped or arrived malformed. Hops between two roles of
    /// one party are internal and produce no message.
    pub fn send<T: Serialize + DeserializeOwned + Clone>(
        &mut self,
        kind: &str,
        from: &str,
        to: &str,
        link: &Link,
        seal: &[(&str, &KeyId)],
        body: &T,
    ) -> Result<Option<T>, ScenarioError> {
        if from == to {
            return Ok(Some(body.clone()));
        }
        let mut env = Envelope::new(kind, from, to, link.channel.clone()).encrypted(link.key.as_ref());
        for (field, key) in seal {
            env = env.seal_field(field, key);
        }
        let Some(msg) = self.sim.send(env, body)?.into_message() else {
            return Ok(None);
        };
        match msg.decode::<T>() {
            Ok(t) => Ok(Some(t)),
            Err(e) => {
                self.sim.event("malformed", json!({ "message": msg.id, "kind": kind, "detail": e.to_string() }));
                Ok(None)
            }
        }
    }

    pub fn event(&mut self, name: &str, data: Value) {
        self.sim.event(name, data);
    }

    pub fn grant(&mut self, kind: &str, by: &str, prover: &str, verdicts: &[&VerdictRef], extra: Value) {
        let mut data = json!({
            "kind": kind,
            "by": by,
            "prover": prover,
            "verdicts": verdicts.iter().map(|v| v.id).collect::<Vec<_>>(),
        });
        if let (Some(obj), Value::Object(more)) = (data.as_object_mut(), extra) {
            obj.extend(more);
        }
        self.sim.event("grant", data);
    }

    pub fn abort(&mut self, flow: &str, step: &str, reason: &str, extra: Value) {
        let mut data = json!({ "flow": flow, "step": step, "reason": reason });
        if let (Some(obj), Value::Object(more)) = (data.as_object_mut(), extra) {
            obj.extend(more);
        }
        self.sim.event("abort", data);
    }

    /// Manufacture and boot a device with the standard chain plus `apps`,
    /// applying roster tampering and subject attacks.
    pub fn new_device(&mut self, id: &str, pca: &str, apps: &[&str]) -> Result<(), ScenarioError> {
        let anchor = self.manufacturer.manufacture("handset", &mut self.rng);
        self.boot_device(id, pca, apps, anchor)
    }

    fn boot_device(
        &mut self,
        id: &str,
        pca: &str,
        apps: &[&str],
        mut anchor: TrustAnchor,
    ) -> Result<(), ScenarioError> {
        let reference = BootChain::standard(apps, SOFTWARE_VERSION);
        self.refs.merge(&ReferenceDb::from_chain(&reference));
        let mut actual = reference.clone();
        if let Some(component) = self.script.party(id).and_then(|p| p.tamper.clone()) {
            actual = tamper(&actual, &component, format!("{component}:modified").as_bytes())?;
        }
        let is_subject = id == self.script.subject;
        let forge = is_subject && self.attack_is("forge-log");
        if is_subject && (self.attack_is("tamper") || forge) {
            let last = actual.components().last().map(|c| c.name.clone()).unwrap_or_default();
            actual = tamper(&actual, &last, format!("{last}:implant").as_bytes())?;
            self.event("attack", json!({ "name": self.attack, "device": id, "component": last }));
        }
        let mut log = boot(&mut anchor, &actual)?;
        if forge {
            for i in 0..log.entries.len() {
                let e = &log.entries[i];
                let want = reference.get(&e.component).map(|c| c.measurement());
                if let Some(want) = want.filter(|w| *w != e.measurement) {
                    log = forge_log(&log, i, want)?;
                }
            }
        }
        let device =
            Device { id: id.to_string(), anchor, reference, log, wallet: AikWallet::default(), pca: pca.to_string() };
        self.devices.insert(id.to_string(), device);
        Ok(())
    }

    pub fn device(&mut self, id: &str) -> Result<&mut Device, ScenarioError> {
        self.devices.get_mut(id).ok_or_else(|| ScenarioError::Protocol(format!("no device {id}")))
    }

    pub fn add_verifier(&mut self, id: &str, roots: Vec<PublicKey>) {
        let verifier = Verifier::new(id, roots, ReferenceDb::default(), FRESHNESS_WINDOW);
        self.verifiers.insert(id.to_string(), VerifierState { verifier, used: UsedAikSet::default() });
    }

    fn certify_batch(&mut self, device: &str, pca: &str, link: Option<&Link>) -> Result<bool, ScenarioError> {
        let now = self.sim.now();
        let batch = self.batch_size;
        let issued_challenge = self
            .pcas
            .get(pca)
            .ok_or_else(|| ScenarioError::Config(format!("{pca} is not a PCA")))?
            .liveness_challenge(&mut self.rng);
        let mut challenge = issued_challenge.clone();
        if let Some(link) = link {
            let msg = EkChallengeMsg { challenge: hex::encode(&challenge) };
            let Some(got) = self.send("ek-challenge", pca, device, link, &[], &msg)? else { return Ok(false) };
            challenge = hex::decode(got.challenge).unwrap_or_default();
        }
        let rng = &mut self.rng;
        let dev = self.devices.get_mut(device).ok_or_else(|| ScenarioError::Protocol(format!("no device {device}")))?;
        let publics = dev.anchor.create_aik_batch(batch, rng)?;
        let mut req = EnrollmentRequest {
            ek_certificate: dev.anchor.ek_certificate().clone(),
            aik_publics: publics.iter().map(|a| a.public).collect(),
            liveness: dev.anchor.ek_challenge_response(&challenge),
        };
        if let Some(link) = link {
            let Some(got) = self.send("enroll-request", device, pca, link, &[], &req)? else { return Ok(false) };
            req = got;
        }
        let result = self.pcas.get_mut(pca).expect("checked above").enroll(&req, &issued_challenge, now);
        let certs = match result {
            Ok(c) => c,
            Err(e) => {
                if let Some(link) = link {
                    self.send("pca-reject", pca, device, link, &[], &PcaRejectMsg { reason: e.to_string() })?;
                }
                self.event("enrolled", json!({ "device": device, "pca": pca, "ok": false, "reason": e.to_string() }));
                return Ok(false);
            }
        };
        let certs = match link {
            Some(link) => match self.send(
                "aik-certificates",
                pca,
                device,
                link,
                &[],
                &AikCertificatesMsg { certificates: certs },
            )? {
                Some(m) => m.certificates,
                None => return Ok(false),
            },
            None => certs,
        };
        self.add_to_wallet(device, &publics.iter().map(|a| (a.id, a.public)).collect::<Vec<_>>(), certs)?;
        self.event(
            "enrolled",
            json!({ "device": device, "pca": pca, "ok": true, "count": batch, "online": link.is_some() }),
        );
        Ok(true)
    }

    fn add_to_wallet(
        &mut self,
        device: &str,
        publics: &[(crate::anchor::AikId, PublicKey)],
        certs: Vec<AikCertificate>,
    ) -> Result<(), ScenarioError> {
        let dev = self.device(device)?;
        let pairs: Vec<_> = certs
            .into_iter()
            .filter_map(|c| publics.iter().find(|(_, p)| *p == c.aik_public).map(|(id, _)| (*id, c)))
            .collect();
        dev.wallet.add_batch(pairs);
        Ok(())
    }

    /// Enrollment over the network: EK challenge, request, certificates.
    pub fn enroll(&mut self, device: &str, link: &Link) -> Result<bool, ScenarioError> {
        let pca = self.device(device)?.pca.clone();
        self.certify_batch(device, &pca, Some(link))
    }

    /// Enrollment done at provisioning time, outside the transcript.
    pub fn enroll_offline(&mut self, device: &str) -> Result<bool, ScenarioError> {
        let pca = self.device(device)?.pca.clone();
        self.certify_batch(device, &pca, None)
    }

    /// Certificates from an issuer outside every trusted domain.
    pub fn enroll_foreign(&mut self, device: &str) -> Result<bool, ScenarioError> {
        if !self.pcas.contains_key(FOREIGN_PCA) {
            let cfg = PcaConfig::new(FOREIGN_PCA, "foreign-domain", self.validity);
            let pca = PrivacyCa::new(cfg, vec![self.manufacturer.root()], &mut self.rng);
            self.pcas.insert(FOREIGN_PCA.to_string(), pca);
        }
        self.device(device)?.pca = FOREIGN_PCA.to_string();
        self.certify_batch(device, FOREIGN_PCA, None)
    }

    /// New batch authorised by the last AIK of the current one.
    pub fn replenish(&mut self, device: &str, link: &Link) -> Result<bool, ScenarioError> {
        let batch = self.batch_size;
        let now = self.sim.now();
        let rng = &mut self.rng;
        let dev = self.devices.get_mut(device).ok_or_else(|| ScenarioError::Protocol(format!("no device {device}")))?;
        let pca = dev.pca.clone();
        let Ok((aik, old)) = dev.wallet.take_for_replenishment() else {
            return Ok(false);
        };
        let publics = dev.anchor.create_aik_batch(batch, rng)?;
        let new_publics: Vec<PublicKey> = publics.iter().map(|a| a.public).collect();
        let signature = dev.anchor.sign_replenishment(aik, &new_publics)?;
        let req = ReplenishRequest { old_certificate: old, new_aik_publics: new_publics, signature };
        let Some(got) = self.send("replenish-request", device, &pca, link, &[], &req)? else { return Ok(false) };
        let result = self
            .pcas
            .get_mut(&pca)
            .ok_or_else(|| ScenarioError::Config(format!("{pca} is not a PCA")))?
            .replenish(&got, now);
        match result {
            Ok(certs) => {
                let Some(m) = self.send(
                    "aik-certificates",
                    &pca,
                    device,
                    link,
                    &[],
                    &AikCertificatesMsg { certificates: certs },
                )?
                else {
                    return Ok(false);
                };
                self.add_to_wallet(
                    device,
                    &publics.iter().map(|a| (a.id, a.public)).collect::<Vec<_>>(),
                    m.certificates,
                )?;
                self.event("replenish", json!({ "device": device, "pca": pca, "ok": true, "count": batch }));
                Ok(true)
            }
            Err(e) => {
                self.send("pca-reject", &pca, device, link, &[], &PcaRejectMsg { reason: e.to_string() })?;
                self.event("replenish", json!({ "device": device, "pca": pca, "ok": false, "reason": e.to_string() }));
                Ok(false)
            }
        }
    }

    /// Replenish as soon as only the reserved AIK is left.
    pub fn maybe_replenish(&mut self, device: &str, link: &Link) -> Result<(), ScenarioError> {
        if self.device(device)?.wallet.needs_replenishment() {
            self.replenish(device, link)?;
        }
        Ok(())
    }

    fn is_target(&self, prover: &str) -> bool {
        prover == self.script.subject && !self.subject_started
    }

    /// Verifier issues a challenge. Returns (issued, as received).
    pub fn challenge(
        &mut self,
        verifier: &str,
        prover: &str,
        link: &Link,
    ) -> Result<Option<(AttestationChallenge, AttestationChallenge)>, ScenarioError> {
        let target = self.is_target(prover);
        if target && self.attack_is("expired-cert") {
            let until = self.device(prover)?.wallet.peek_for_service().map(|e| e.certificate.valid_until);
            if let Some(until) = until {
                let now = self.sim.now();
                if until >= now {
                    self.sim.advance(until + 1 - now);
                }
                self.event("attack", json!({ "name": "expired-cert", "device": prover }));
            }
        }
        let now = self.sim.now();
        let rng = &mut self.rng;
        let issued = self
            .verifiers
            .get_mut(verifier)
            .ok_or_else(|| ScenarioError::Protocol(format!("{verifier} is not a verifier")))?
            .verifier
            .challenge(rng, now);
        if target && self.attack_is("wrong-nonce") {
            let mut wrong = issued.nonce.clone();
            wrong[0] ^= 0xff;
            let occurrence = self.sim.occurrences("attest-challenge");
            self.sim.add_hook(Hook {
                kind: "attest-challenge".into(),
                occurrence,
                sender: None,
                action: HookAction::Modify { field: "nonce".into(), value: json!(hex::encode(wrong)) },
            });
            self.event("attack", json!({ "name": "wrong-nonce", "device": prover }));
        }
        let received = self.send("attest-challenge", verifier, prover, link, &[], &issued)?;
        Ok(received.map(|r| (issued, r)))
    }

    /// Prover quotes with its next one-time AIK. `None` if the wallet has
    /// nothing to spend.
    pub fn prove(
        &mut self,
        prover: &str,
        received: &AttestationChallenge,
    ) -> Result<Option<AttestationResponse>, ScenarioError> {
        if self.is_target(prover) {
            self.subject_started = true;
            if self.attack_is("replay-aik") {
                self.replay_clone = Some(self.device(prover)?.clone());
            } else {
                self.target_pending = true;
            }
        }
        let dev = self.device(prover)?;
        let (aik, certificate) = match dev.wallet.take_for_service() {
            Ok(x) => x,
            Err(e) => {
                self.event("wallet", json!({ "device": prover, "error": e.to_string() }));
                return Ok(None);
            }
        };
        let quote = dev.anchor.quote(aik, &received.pcr_selection, &received.nonce)?;
        Ok(Some(AttestationResponse { quote, log: dev.log.clone(), certificate }))
    }

    /// Verifier decides and the verdict is recorded.
    pub fn judge(
        &mut self,
        verifier: &str,
        prover: &str,
        response: &AttestationResponse,
        issued: &AttestationChallenge,
        purpose: &str,
        link: &Link,
    ) -> Result<VerdictRef, ScenarioError> {
        let now = self.sim.now();
        let vs = self
            .verifiers
            .get_mut(verifier)
            .ok_or_else(|| ScenarioError::Protocol(format!("{verifier} is not a verifier")))?;
        let verdict = verify_attestation(response, issued, now, &vs.verifier.pca_roots, &self.refs, &mut vs.used);
        let id = self.verdict_seq;
        self.verdict_seq += 1;
        let mut target = prover == REPLAYER;
        if self.target_pending && prover == self.script.subject {
            self.target_pending = false;
            target = true;
        }
        self.event(
            "verdict",
            json!({
                "id": id,
                "verifier": verifier,
                "prover": prover,
                "aik": response.certificate.fingerprint(),
                "accepted": verdict.accepted,
                "reasons": verdict.reasons.iter().map(|r| r.as_str()).collect::<Vec<_>>(),
                "purpose": purpose,
                "target": target,
            }),
        );
        let r = VerdictRef { id, verdict, certificate: response.certificate.clone() };
        if prover == self.script.subject {
            if let Some(clone) = self.replay_clone.take() {
                self.replay(clone, verifier, purpose, link)?;
            }
        }
        Ok(r)
    }

    /// The cloned anchor quotes again with the AIK the subject just spent.
    fn replay(&mut self, mut clone: Device, verifier: &str, purpose: &str, link: &Link) -> Result<(), ScenarioError> {
        if !self.sim.is_registered(REPLAYER) {
            self.sim.register(REPLAYER, "attacker")?;
        }
        clone.id = REPLAYER.to_string();
        self.devices.insert(REPLAYER.to_string(), clone);
        self.event("attack", json!({ "name": "replay-aik", "device": self.script.subject, "verifier": verifier }));
        let key = match &link.key {
            Some(_) => Some(self.net_key(REPLAYER, verifier)?),
            None => None,
        };
        let rlink = Link::new(link.channel.clone(), key);
        self.attest(REPLAYER, verifier, &rlink, purpose)?;
        Ok(())
    }

    /// Full challenge/response over `link`.
    pub fn attest(
        &mut self,
        prover: &str,
        verifier: &str,
        link: &Link,
        purpose: &str,
    ) -> Result<Option<VerdictRef>, ScenarioError> {
        let Some((issued, received)) = self.challenge(verifier, prover, link)? else { return Ok(None) };
        let Some(resp) = self.prove(prover, &received)? else { return Ok(None) };
        let Some(got) = self.send("attest-response", prover, verifier, link, &[], &resp)? else { return Ok(None) };
        self.judge(verifier, prover, &got, &issued, purpose, link).map(Some)
    }
}
