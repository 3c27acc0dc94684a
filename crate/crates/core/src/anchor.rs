//! Software-emulated TPM: PCR bank, endorsement key, one-time AIKs, quotes
//! and PCR-gated shielded storage.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, hash160, keygen, sign_body, verify_body, Digest160, KeyPair, PublicKey, Rng, Signature};

/// Number of PCRs in the bank.
pub const PCR_COUNT: usize = 24;
/// Registers 0..8 are reserved for the boot chain.
pub const BOOT_CHAIN_PCRS: std::ops::Range<usize> = 0..8;

const QUOTE_TAG: &str = "trustsim/quote/v1";
const REPLENISH_TAG: &str = "trustsim/replenish/v1";
const EK_LIVENESS_TAG: &str = "trustsim/ek-liveness/v1";
const EK_CERT_TAG: &str = "trustsim/ek-certificate/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnchorError {
    #[error("pcr index {0} out of range 0..{PCR_COUNT}")]
    PcrIndexOutOfRange(usize),
    #[error("aik batch of {0} is too small, need at least 2")]
    BatchTooSmall(usize),
    #[error("unknown aik {0}")]
    UnknownAik(AikId),
    #[error("aik-already-used")]
    AikAlreadyUsed(AikId),
    #[error("unknown slot {0}")]
    UnknownSlot(String),
    #[error("slot {0} already exists")]
    SlotExists(String),
    #[error("slot {0} holds a different kind of value")]
    WrongSlotKind(String),
    #[error("sealed-against-state")]
    SealedAgainstState,
    #[error("insufficient-balance")]
    InsufficientBalance { balance: u64, requested: u64 },
    #[error("counter overflow")]
    Overflow,
}

/// The PCR bank. Registers only ever change through [`PcrBank::extend`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcrBank {
    registers: Vec<Digest160>,
}

impl Default for PcrBank {
    fn default() -> Self {
        PcrBank { registers: vec![Digest160::ZERO; PCR_COUNT] }
    }
}

impl PcrBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&self, index: usize) -> Result<Digest160, AnchorError> {
        self.registers.get(index).copied().ok_or(AnchorError::PcrIndexOutOfRange(index))
    }

    /// `registers[index] := SHA-1(registers[index] || measurement)`.
    pub fn extend(&mut self, index: usize, measurement: &Digest160) -> Result<Digest160, AnchorError> {
        let reg = self.registers.get_mut(index).ok_or(AnchorError::PcrIndexOutOfRange(index))?;
        let mut buf = [0u8; 40];
        buf[..20].copy_from_slice(&reg.0);
        buf[20..].copy_from_slice(&measurement.0);
        *reg = hash160(&buf);
        Ok(*reg)
    }

    pub fn registers(&self) -> &[Digest160] {
        &self.registers
    }

    pub fn is_reset(&self) -> bool {
        self.registers.iter().all(|r| *r == Digest160::ZERO)
    }
}

/// Manufacturer-signed statement binding an EK to a device model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EkCertificate {
    pub ek_public: PublicKey,
    pub device_model: String,
    pub manufacturer: String,
    pub hash_alg: String,
    pub signature: Signature,
}

#[derive(Serialize)]
struct EkCertBody<'a> {
    ek_public: &'a PublicKey,
    device_model: &'a str,
    manufacturer: &'a str,
    hash_alg: &'a str,
}

impl EkCertificate {
    fn body(&self) -> EkCertBody<'_> {
        EkCertBody {
            ek_public: &self.ek_public,
            device_model: &self.device_model,
            manufacturer: &self.manufacturer,
            hash_alg: &self.hash_alg,
        }
    }

    pub fn verify(&self, manufacturer_root: &PublicKey) -> bool {
        verify_body(manufacturer_root, EK_CERT_TAG, &self.body(), &self.signature)
    }
}

/// A TPM vendor: holds the root key that signs EK certificates.
#[derive(Debug, Clone)]
pub struct Manufacturer {
    name: String,
    key: KeyPair,
}

impl Manufacturer {
    pub fn new(name: impl Into<String>, rng: &mut Rng) -> Self {
        Manufacturer { name: name.into(), key: keygen(rng) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn root(&self) -> PublicKey {
        self.key.public()
    }

    pub fn certify(&self, ek_public: PublicKey, device_model: &str) -> EkCertificate {
        let mut cert = EkCertificate {
            ek_public,
            device_model: device_model.to_string(),
            manufacturer: self.name.clone(),
            hash_alg: crypto::BODY_HASH_ID.to_string(),
            signature: Signature(Vec::new()),
        };
        cert.signature = sign_body(&self.key, EK_CERT_TAG, &cert.body());
        cert
    }

    /// Build a TPM with a fresh EK certified by this manufacturer.
    pub fn manufacture(&self, device_model: &str, rng: &mut Rng) -> TrustAnchor {
        let ek = keygen(rng);
        let ek_certificate = self.certify(ek.public(), device_model);
        TrustAnchor {
            pcrs: PcrBank::new(),
            ek,
            ek_certificate,
            aiks: BTreeMap::new(),
            next_aik: 0,
            slots: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AikId(pub u32);

impl fmt::Display for AikId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "aik#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BatchId(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AikUsage {
    Unused,
    Used,
}

/// An AIK held inside the anchor. The private key never leaves.
#[derive(Clone, Debug)]
pub struct AikRecord {
    pub id: AikId,
    key: KeyPair,
    pub usage: AikUsage,
    pub batch_id: BatchId,
}

impl AikRecord {
    pub fn public(&self) -> PublicKey {
        self.key.public()
    }
}

/// Exported half of an AIK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AikPublic {
    pub id: AikId,
    pub public: PublicKey,
    pub batch_id: BatchId,
}

/// A signed report of selected PCR values bound to a nonce.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub pcr_selection: Vec<usize>,
    pub pcr_values: Vec<Digest160>,
    #[serde(with = "crypto::hex_bytes")]
    pub nonce: Vec<u8>,
    pub signature: Signature,
}

#[derive(Serialize)]
struct QuoteBody<'a> {
    pcr_selection: &'a [usize],
    pcr_values: &'a [Digest160],
    #[serde(with = "crypto::hex_bytes")]
    nonce: &'a [u8],
}

impl Quote {
    fn body(&self) -> QuoteBody<'_> {
        QuoteBody { pcr_selection: &self.pcr_selection, pcr_values: &self.pcr_values, nonce: &self.nonce }
    }

    /// Signature check under the given AIK public key.
    pub fn verify(&self, aik: &PublicKey) -> bool {
        self.pcr_selection.len() == self.pcr_values.len() && verify_body(aik, QUOTE_TAG, &self.body(), &self.signature)
    }

    /// Value reported for register `index`, if selected.
    pub fn value_of(&self, index: usize) -> Option<Digest160> {
        self.pcr_selection.iter().position(|&i| i == index).map(|pos| self.pcr_values[pos])
    }
}

/// Body an AIK signs to authorise certification of a new batch.
#[derive(Serialize)]
struct ReplenishBody<'a> {
    new_aik_publics: &'a [PublicKey],
}

/// Verify a replenishment authorisation made by [`TrustAnchor::sign_replenishment`].
pub fn verify_replenishment(aik: &PublicKey, new_aik_publics: &[PublicKey], sig: &Signature) -> bool {
    verify_body(aik, REPLENISH_TAG, &ReplenishBody { new_aik_publics }, sig)
}

#[derive(Serialize)]
struct LivenessBody<'a> {
    #[serde(with = "crypto::hex_bytes")]
    challenge: &'a [u8],
}

/// Check an EK challenge response against the EK public key.
pub fn verify_ek_response(ek_public: &PublicKey, challenge: &[u8], sig: &Signature) -> bool {
    verify_body(ek_public, EK_LIVENESS_TAG, &LivenessBody { challenge }, sig)
}

/// Required PCR values for a slot. Empty means ungated.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcrPolicy {
    pub registers: BTreeMap<usize, Digest160>,
}

impl PcrPolicy {
    pub fn new(registers: impl IntoIterator<Item = (usize, Digest160)>) -> Self {
        PcrPolicy { registers: registers.into_iter().collect() }
    }

    pub fn satisfied_by(&self, bank: &PcrBank) -> bool {
        self.registers.iter().all(|(&i, expected)| bank.read(i).map(|v| v == *expected).unwrap_or(false))
    }
}

#[derive(Clone, Debug)]
pub enum SlotContent {
    Counter(u64),
    Bytes(Vec<u8>),
    /// A signing key usable only through [`TrustAnchor::slot_sign`].
    SigningKey(Box<KeyPair>),
}

#[derive(Clone, Debug)]
pub struct ShieldedSlot {
    pub slot_id: String,
    content: SlotContent,
    pub access_policy: PcrPolicy,
}

/// Proof that a counter credit was authorised (a verified voucher). Only
/// constructible inside the crate.
#[derive(Debug)]
pub struct CreditAuthorization {
    pub(crate) amount: u64,
}

/// Value read from a slot. Signing keys are never returned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SlotValue {
    Counter(u64),
    Bytes(Vec<u8>),
    SealedKey(PublicKey),
}

/// The emulated TPM. One per simulated device.
///
/// `Clone` duplicates all key material: it is the physical cloning attack,
/// and the simulator only uses it to inject that attack.
#[derive(Clone, Debug)]
pub struct TrustAnchor {
    pcrs: PcrBank,
    ek: KeyPair,
    ek_certificate: EkCertificate,
    aiks: BTreeMap<AikId, AikRecord>,
    next_aik: u32,
    slots: BTreeMap<String, ShieldedSlot>,
}

impl TrustAnchor {
    pub fn pcrs(&self) -> &PcrBank {
        &self.pcrs
    }

    pub fn extend(&mut self, index: usize, measurement: &Digest160) -> Result<Digest160, AnchorError> {
        self.pcrs.extend(index, measurement)
    }

    /// Platform reset: PCRs return to zero, keys and slots persist.
    pub fn reset(&mut self) {
        self.pcrs = PcrBank::new();
    }

    pub fn ek_certificate(&self) -> &EkCertificate {
        &self.ek_certificate
    }

    pub fn ek_public(&self) -> PublicKey {
        self.ek.public()
    }

    pub fn ek_challenge_response(&self, challenge: &[u8]) -> Signature {
        sign_body(&self.ek, EK_LIVENESS_TAG, &LivenessBody { challenge })
    }

    pub fn create_aik_batch(&mut self, count: usize, rng: &mut Rng) -> Result<Vec<AikPublic>, AnchorError> {
        if count < 2 {
            return Err(AnchorError::BatchTooSmall(count));
        }
        let batch_id = BatchId(rng.token(8));
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let id = AikId(self.next_aik);
            self.next_aik += 1;
            let record = AikRecord { id, key: keygen(rng), usage: AikUsage::Unused, batch_id: batch_id.clone() };
            out.push(AikPublic { id, public: record.public(), batch_id: batch_id.clone() });
            self.aiks.insert(id, record);
        }
        Ok(out)
    }

    pub fn aik(&self, id: AikId) -> Option<&AikRecord> {
        self.aiks.get(&id)
    }

    pub fn aiks(&self) -> impl Iterator<Item = &AikRecord> {
        self.aiks.values()
    }

    fn claim_aik(&mut self, id: AikId) -> Result<&KeyPair, AnchorError> {
        let rec = self.aiks.get_mut(&id).ok_or(AnchorError::UnknownAik(id))?;
        if rec.usage == AikUsage::Used {
            return Err(AnchorError::AikAlreadyUsed(id));
        }
        rec.usage = AikUsage::Used;
        Ok(&rec.key)
    }

    /// Sign the current values of `pcr_selection` and `nonce` with a fresh
    /// AIK, consuming it.
    pub fn quote(&mut self, aik: AikId, pcr_selection: &[usize], nonce: &[u8]) -> Result<Quote, AnchorError> {
        let pcr_values = pcr_selection.iter().map(|&i| self.pcrs.read(i)).collect::<Result<Vec<_>, _>>()?;
        let key = self.claim_aik(aik)?;
        let mut quote = Quote {
            pcr_selection: pcr_selection.to_vec(),
            pcr_values,
            nonce: nonce.to_vec(),
            signature: Signature(Vec::new()),
        };
        quote.signature = sign_body(key, QUOTE_TAG, &quote.body());
        Ok(quote)
    }

    /// Use the given AIK to authorise certification of a new batch,
    /// consuming it.
    pub fn sign_replenishment(&mut self, aik: AikId, new_aik_publics: &[PublicKey]) -> Result<Signature, AnchorError> {
        let key = self.claim_aik(aik)?;
        Ok(sign_body(key, REPLENISH_TAG, &ReplenishBody { new_aik_publics }))
    }

    /// Provision a shielded slot.
    pub fn seal_slot(
        &mut self,
        slot_id: &str,
        content: SlotContent,
        access_policy: PcrPolicy,
    ) -> Result<(), AnchorError> {
        if self.slots.contains_key(slot_id) {
            return Err(AnchorError::SlotExists(slot_id.to_string()));
        }
        self.slots.insert(slot_id.to_string(), ShieldedSlot { slot_id: slot_id.to_string(), content, access_policy });
        Ok(())
    }

    fn open_slot(&mut self, slot_id: &str) -> Result<&mut ShieldedSlot, AnchorError> {
        let slot = self.slots.get_mut(slot_id).ok_or_else(|| AnchorError::UnknownSlot(slot_id.to_string()))?;
        if !slot.access_policy.satisfied_by(&self.pcrs) {
            return Err(AnchorError::SealedAgainstState);
        }
        Ok(slot)
    }

    pub fn slot_read(&mut self, slot_id: &str) -> Result<SlotValue, AnchorError> {
        let slot = self.open_slot(slot_id)?;
        Ok(match &slot.content {
            SlotContent::Counter(v) => SlotValue::Counter(*v),
            SlotContent::Bytes(b) => SlotValue::Bytes(b.clone()),
            SlotContent::SigningKey(k) => SlotValue::SealedKey(k.public()),
        })
    }

    fn counter_mut(&mut self, slot_id: &str) -> Result<&mut u64, AnchorError> {
        let slot = self.open_slot(slot_id)?;
        match &mut slot.content {
            SlotContent::Counter(v) => Ok(v),
            _ => Err(AnchorError::WrongSlotKind(slot_id.to_string())),
        }
    }

    pub fn slot_counter(&mut self, slot_id: &str) -> Result<u64, AnchorError> {
        self.counter_mut(slot_id).map(|v| *v)
    }

    /// Atomically subtract `amount`. Never goes below zero.
    pub fn slot_decrement(&mut self, slot_id: &str, amount: u64) -> Result<u64, AnchorError> {
        let v = self.counter_mut(slot_id)?;
        if amount > *v {
            return Err(AnchorError::InsufficientBalance { balance: *v, requested: amount });
        }
        *v -= amount;
        Ok(*v)
    }

    /// Add an authorised amount to a counter slot.
    pub fn slot_credit(&mut self, slot_id: &str, auth: CreditAuthorization) -> Result<u64, AnchorError> {
        let v = self.counter_mut(slot_id)?;
        *v = v.checked_add(auth.amount).ok_or(AnchorError::Overflow)?;
        Ok(*v)
    }

    /// Counter value regardless of slot policy. For simulator accounting
    /// only; no protocol path calls this.
    pub fn inspect_counter(&self, slot_id: &str) -> Option<u64> {
        match self.slots.get(slot_id).map(|s| &s.content) {
            Some(SlotContent::Counter(v)) => Some(*v),
            _ => None,
        }
    }

    /// Sign with a key sealed in `slot_id`; fails when the platform state
    /// does not match the slot policy.
    pub fn slot_sign<T: Serialize + ?Sized>(
        &mut self,
        slot_id: &str,
        tag: &str,
        body: &T,
    ) -> Result<Signature, AnchorError> {
        let slot = self.open_slot(slot_id)?;
        match &slot.content {
            SlotContent::SigningKey(k) => Ok(sign_body(k, tag, body)),
            _ => Err(AnchorError::WrongSlotKind(slot_id.to_string())),
        }
    }
}
