//! Anonymous prepaid service: group logon from a reserved IMSI pool, a
//! balance counter in shielded storage, signed balance statements and
//! voucher top-up.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{AnchorError, CreditAuthorization, PcrPolicy, SlotContent, TrustAnchor};
use crate::attestation::AttestationVerdict;
use crate::crypto::{self, keygen, sign_body, verify_body, KeyPair, PublicKey, Rng, Signature};

pub const BALANCE_SLOT: &str = "ppc-balance";
pub const PPC_KEY_SLOT: &str = "ppc-key";
const STATEMENT_TAG: &str = "ppc-balance-statement";
const VOUCHER_TAG: &str = "prepaid-voucher";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrepaidError {
    #[error("empty-pool")]
    EmptyPool,
    #[error("pool overlaps individual identity {0}")]
    PoolOverlap(String),
    #[error("bad-voucher-signature")]
    BadVoucherSignature,
    #[error("voucher-replay")]
    VoucherReplay,
    #[error("cost overflow")]
    CostOverflow,
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

/// Reserved IMSIs shared by every prepaid device.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpImsiPool {
    pub owner: String,
    imsis: Vec<String>,
}

impl PpImsiPool {
    pub fn new(owner: &str, imsis: impl IntoIterator<Item = String>) -> Result<Self, PrepaidError> {
        let set: BTreeSet<String> = imsis.into_iter().collect();
        if set.is_empty() {
            return Err(PrepaidError::EmptyPool);
        }
        Ok(PpImsiPool { owner: owner.to_string(), imsis: set.into_iter().collect() })
    }

    /// Fails if any individually issued identity is also in the pool.
    pub fn check_disjoint<'a>(&self, individual: impl IntoIterator<Item = &'a str>) -> Result<(), PrepaidError> {
        match individual.into_iter().find(|i| self.contains(i)) {
            Some(i) => Err(PrepaidError::PoolOverlap(i.to_string())),
            None => Ok(()),
        }
    }

    pub fn contains(&self, imsi: &str) -> bool {
        self.imsis.binary_search_by(|i| i.as_str().cmp(imsi)).is_ok()
    }

    pub fn imsis(&self) -> &[String] {
        &self.imsis
    }

    pub fn len(&self) -> usize {
        self.imsis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imsis.is_empty()
    }
}

/// Device-side VSIM logon state: random choice without repetition.
#[derive(Clone, Debug, Default)]
pub struct VsimClient {
    tried: BTreeSet<String>,
}

impl VsimClient {
    /// Uniform pick among IMSIs not yet tried; `None` once the pool is spent.
    pub fn next_candidate(&mut self, pool: &PpImsiPool, rng: &mut Rng) -> Option<String> {
        let untried: Vec<&String> = pool.imsis().iter().filter(|i| !self.tried.contains(*i)).collect();
        if untried.is_empty() {
            return None;
        }
        let pick = untried[rng.below(untried.len())].clone();
        self.tried.insert(pick.clone());
        Some(pick)
    }

    pub fn attempts(&self) -> usize {
        self.tried.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceStatement {
    #[serde(with = "crypto::hex_bytes")]
    pub nonce: Vec<u8>,
    pub service: String,
    pub units: u64,
    pub cost: u64,
    pub sufficient: bool,
    pub signature: Signature,
}

#[derive(Serialize)]
struct StatementBody<'a> {
    nonce: &'a [u8],
    service: &'a str,
    units: u64,
    cost: u64,
    sufficient: bool,
}

impl BalanceStatement {
    fn body(&self) -> StatementBody<'_> {
        StatementBody {
            nonce: &self.nonce,
            service: &self.service,
            units: self.units,
            cost: self.cost,
            sufficient: self.sufficient,
        }
    }

    pub fn verify(&self, ppc_key: &PublicKey) -> bool {
        verify_body(ppc_key, STATEMENT_TAG, &self.body(), &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Voucher {
    pub voucher_id: String,
    pub value: u64,
    pub signature: Signature,
}

#[derive(Serialize)]
struct VoucherBody<'a> {
    voucher_id: &'a str,
    value: u64,
}

impl Voucher {
    pub fn verify(&self, issuer: &PublicKey) -> bool {
        verify_body(
            issuer,
            VOUCHER_TAG,
            &VoucherBody { voucher_id: &self.voucher_id, value: self.value },
            &self.signature,
        )
    }
}

/// Install the balance counter and the group statement key, both sealed
/// to the reference boot state.
pub fn provision(
    anchor: &mut TrustAnchor,
    initial_balance: u64,
    ppc_key: &KeyPair,
    policy: PcrPolicy,
) -> Result<(), PrepaidError> {
    anchor.seal_slot(BALANCE_SLOT, SlotContent::Counter(initial_balance), policy.clone())?;
    anchor.seal_slot(PPC_KEY_SLOT, SlotContent::SigningKey(Box::new(ppc_key.clone())), policy)?;
    Ok(())
}

pub fn balance(anchor: &mut TrustAnchor) -> Result<u64, PrepaidError> {
    Ok(anchor.slot_counter(BALANCE_SLOT)?)
}

/// The ppC's signed claim about whether the balance covers `cost`. Fails
/// when the platform is not in the sealed state.
pub fn balance_statement(
    anchor: &mut TrustAnchor,
    nonce: &[u8],
    service: &str,
    units: u64,
    cost: u64,
) -> Result<BalanceStatement, PrepaidError> {
    let sufficient = anchor.slot_counter(BALANCE_SLOT)? >= cost;
    let body = StatementBody { nonce, service, units, cost, sufficient };
    let signature = anchor.slot_sign(PPC_KEY_SLOT, STATEMENT_TAG, &body)?;
    Ok(BalanceStatement { nonce: nonce.to_vec(), service: service.to_string(), units, cost, sufficient, signature })
}

/// Local decrement after a grant.
pub fn charge(anchor: &mut TrustAnchor, cost: u64) -> Result<u64, PrepaidError> {
    Ok(anchor.slot_decrement(BALANCE_SLOT, cost)?)
}

/// Redeem a voucher into the balance slot.
pub fn top_up(
    anchor: &mut TrustAnchor,
    voucher: &Voucher,
    issuer: &PublicKey,
    redeemed: &mut BTreeSet<String>,
) -> Result<u64, PrepaidError> {
    if !voucher.verify(issuer) {
        return Err(PrepaidError::BadVoucherSignature);
    }
    if redeemed.contains(&voucher.voucher_id) {
        return Err(PrepaidError::VoucherReplay);
    }
    let balance = anchor.slot_credit(BALANCE_SLOT, CreditAuthorization { amount: voucher.value })?;
    redeemed.insert(voucher.voucher_id.clone());
    Ok(balance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrepaidDeny {
    UnknownImsi,
    ImsiBusy,
    NoSession,
    UnknownService,
    InvalidUnits,
    AttestationRejected,
    BadStatement,
    InsufficientBalance,
}

impl PrepaidDeny {
    pub fn as_str(&self) -> &'static str {
        match self {
            PrepaidDeny::UnknownImsi => "unknown-imsi",
            PrepaidDeny::ImsiBusy => "imsi-busy",
            PrepaidDeny::NoSession => "no-session",
            PrepaidDeny::UnknownService => "unknown-service",
            PrepaidDeny::InvalidUnits => "invalid-units",
            PrepaidDeny::AttestationRejected => "attestation-rejected",
            PrepaidDeny::BadStatement => "bad-statement",
            PrepaidDeny::InsufficientBalance => "insufficient-balance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PrepaidDecision {
    Grant { cost: u64 },
    Deny(PrepaidDeny),
}

/// MNO side. Keeps no per-device ledger; only pool occupancy.
#[derive(Clone, Debug)]
pub struct PrepaidMno {
    pub pool: PpImsiPool,
    pub tariffs: BTreeMap<String, u64>,
    pub ppc_key: PublicKey,
    active: BTreeMap<String, String>,
    voucher_key: KeyPair,
}

impl PrepaidMno {
    pub fn new(pool: PpImsiPool, tariffs: BTreeMap<String, u64>, ppc_key: PublicKey, rng: &mut Rng) -> Self {
        PrepaidMno { pool, tariffs, ppc_key, active: BTreeMap::new(), voucher_key: keygen(rng) }
    }

    pub fn voucher_issuer(&self) -> PublicKey {
        self.voucher_key.public()
    }

    pub fn issue_voucher(&self, voucher_id: &str, value: u64) -> Voucher {
        let signature = sign_body(&self.voucher_key, VOUCHER_TAG, &VoucherBody { voucher_id, value });
        Voucher { voucher_id: voucher_id.to_string(), value, signature }
    }

    /// Accept a logon on `imsi` unless it is foreign or already active.
    pub fn vsim_logon(&mut self, imsi: &str, rng: &mut Rng) -> Result<String, PrepaidDeny> {
        if !self.pool.contains(imsi) {
            return Err(PrepaidDeny::UnknownImsi);
        }
        if self.active.values().any(|i| i == imsi) {
            return Err(PrepaidDeny::ImsiBusy);
        }
        let session = format!("pp-{}", rng.token(6));
        self.active.insert(session.clone(), imsi.to_string());
        Ok(session)
    }

    pub fn logoff(&mut self, session: &str) {
        self.active.remove(session);
    }

    pub fn is_active(&self, imsi: &str) -> bool {
        self.active.values().any(|i| i == imsi)
    }

    pub fn cost_of(&self, service: &str, units: u64) -> Result<u64, PrepaidDeny> {
        if units == 0 {
            return Err(PrepaidDeny::InvalidUnits);
        }
        let tariff = self.tariffs.get(service).ok_or(PrepaidDeny::UnknownService)?;
        tariff.checked_mul(units).ok_or(PrepaidDeny::InvalidUnits)
    }

    pub fn decide(
        &self,
        session: &str,
        verdict: &AttestationVerdict,
        statement: Option<&BalanceStatement>,
        nonce: &[u8],
        service: &str,
        units: u64,
    ) -> PrepaidDecision {
        if !self.active.contains_key(session) {
            return PrepaidDecision::Deny(PrepaidDeny::NoSession);
        }
        let cost = match self.cost_of(service, units) {
            Ok(c) => c,
            Err(d) => return PrepaidDecision::Deny(d),
        };
        if !verdict.accepted {
            return PrepaidDecision::Deny(PrepaidDeny::AttestationRejected);
        }
        let Some(st) = statement else {
            return PrepaidDecision::Deny(PrepaidDeny::BadStatement);
        };
        let matches = st.nonce == nonce && st.service == service && st.units == units && st.cost == cost;
        if !matches || !st.verify(&self.ppc_key) {
            return PrepaidDecision::Deny(PrepaidDeny::BadStatement);
        }
        if !st.sufficient {
            return PrepaidDecision::Deny(PrepaidDeny::InsufficientBalance);
        }
        PrepaidDecision::Grant { cost }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::Manufacturer;
    use crate::attestation::Reason;
    use crate::boot::{boot, tamper, BootChain};

    struct Fx {
        rng: Rng,
        anchor: TrustAnchor,
        mno: PrepaidMno,
        chain: BootChain,
        policy: PcrPolicy,
    }

    fn fx(balance: u64) -> Fx {
        let mut rng = Rng::from_seed(5);
        let m = Manufacturer::new("acme", &mut rng);
        let chain = BootChain::standard(&["vsim", "ppc"], "1");
        let mut reference = m.manufacture("ref", &mut rng);
        boot(&mut reference, &chain).unwrap();
        let policy = PcrPolicy::new([(0, reference.pcrs().read(0).unwrap())]);
        let mut anchor = m.manufacture("phone", &mut rng);
        let ppc = keygen(&mut rng);
        provision(&mut anchor, balance, &ppc, policy.clone()).unwrap();
        let pool = PpImsiPool::new("mno", (0..5).map(|i| format!("pp-{i}"))).unwrap();
        let mno = PrepaidMno::new(pool, [("voice".to_string(), 10)].into(), ppc.public(), &mut rng);
        Fx { rng, anchor, mno, chain, policy }
    }

    fn ok() -> AttestationVerdict {
        AttestationVerdict { accepted: true, reasons: vec![Reason::Ok] }
    }

    #[test]
    fn grant_then_decrement() {
        let mut f = fx(500);
        boot(&mut f.anchor, &f.chain).unwrap();
        let s = f.mno.vsim_logon("pp-1", &mut f.rng).unwrap();
        let st = balance_statement(&mut f.anchor, b"n", "voice", 5, 50).unwrap();
        assert_eq!(f.mno.decide(&s, &ok(), Some(&st), b"n", "voice", 5), PrepaidDecision::Grant { cost: 50 });
        assert_eq!(charge(&mut f.anchor, 50).unwrap(), 450);
    }

    #[test]
    fn zero_balance_denied() {
        let mut f = fx(0);
        boot(&mut f.anchor, &f.chain).unwrap();
        let s = f.mno.vsim_logon("pp-1", &mut f.rng).unwrap();
        let st = balance_statement(&mut f.anchor, b"n", "voice", 1, 10).unwrap();
        assert!(!st.sufficient);
        assert_eq!(
            f.mno.decide(&s, &ok(), Some(&st), b"n", "voice", 1),
            PrepaidDecision::Deny(PrepaidDeny::InsufficientBalance)
        );
        assert_eq!(balance(&mut f.anchor).unwrap(), 0);
    }

    #[test]
    fn tampered_ppc_cannot_sign_or_spend() {
        let mut f = fx(500);
        let bad = tamper(&f.chain, "ppc", b"evil").unwrap();
        boot(&mut f.anchor, &bad).unwrap();
        assert!(!f.policy.satisfied_by(f.anchor.pcrs()));
        assert!(matches!(
            balance_statement(&mut f.anchor, b"n", "voice", 1, 10),
            Err(PrepaidError::Anchor(AnchorError::SealedAgainstState))
        ));
        assert!(charge(&mut f.anchor, 10).is_err());
    }

    #[test]
    fn statement_must_match_request() {
        let mut f = fx(500);
        boot(&mut f.anchor, &f.chain).unwrap();
        let s = f.mno.vsim_logon("pp-1", &mut f.rng).unwrap();
        let st = balance_statement(&mut f.anchor, b"n", "voice", 1, 10).unwrap();
        let deny = PrepaidDecision::Deny(PrepaidDeny::BadStatement);
        assert_eq!(f.mno.decide(&s, &ok(), Some(&st), b"other", "voice", 1), deny);
        assert_eq!(f.mno.decide(&s, &ok(), None, b"n", "voice", 1), deny);
        let mut forged = st.clone();
        forged.sufficient = !forged.sufficient;
        assert_eq!(f.mno.decide(&s, &ok(), Some(&forged), b"n", "voice", 1), deny);
        let rejected = AttestationVerdict { accepted: false, reasons: vec![Reason::ReferenceMismatch] };
        assert_eq!(
            f.mno.decide(&s, &rejected, Some(&st), b"n", "voice", 1),
            PrepaidDecision::Deny(PrepaidDeny::AttestationRejected)
        );
        assert_eq!(
            f.mno.decide(&s, &ok(), Some(&st), b"n", "video", 1),
            PrepaidDecision::Deny(PrepaidDeny::UnknownService)
        );
        assert_eq!(
            f.mno.decide("nope", &ok(), Some(&st), b"n", "voice", 1),
            PrepaidDecision::Deny(PrepaidDeny::NoSession)
        );
    }

    #[test]
    fn vouchers() {
        let mut f = fx(0);
        boot(&mut f.anchor, &f.chain).unwrap();
        let mut redeemed = BTreeSet::new();
        let v = f.mno.issue_voucher("v1", 100);
        assert_eq!(top_up(&mut f.anchor, &v, &f.mno.voucher_issuer(), &mut redeemed).unwrap(), 100);
        assert_eq!(top_up(&mut f.anchor, &v, &f.mno.voucher_issuer(), &mut redeemed), Err(PrepaidError::VoucherReplay));
        let mut forged = f.mno.issue_voucher("v2", 1);
        forged.value = 1000;
        assert_eq!(
            top_up(&mut f.anchor, &forged, &f.mno.voucher_issuer(), &mut redeemed),
            Err(PrepaidError::BadVoucherSignature)
        );
        assert_eq!(balance(&mut f.anchor).unwrap(), 100);
    }

    #[test]
    fn vsim_pool_logon_and_exhaustion() {
        let mut f = fx(0);
        let pool = f.mno.pool.clone();
        let mut c1 = VsimClient::default();
        let first = c1.next_candidate(&pool, &mut f.rng).unwrap();
        f.mno.vsim_logon(&first, &mut f.rng).unwrap();
        assert_eq!(f.mno.vsim_logon(&first, &mut f.rng), Err(PrepaidDeny::ImsiBusy));
        assert_eq!(f.mno.vsim_logon("001", &mut f.rng), Err(PrepaidDeny::UnknownImsi));
        let mut c2 = VsimClient::default();
        let mut seen = BTreeSet::new();
        while let Some(c) = c2.next_candidate(&pool, &mut f.rng) {
            seen.insert(c);
        }
        assert_eq!(seen.len(), 5);
        assert_eq!(c2.attempts(), 5);

        let single = PpImsiPool::new("mno", ["pp-0".to_string()]).unwrap();
        let mut m = PrepaidMno::new(single.clone(), BTreeMap::new(), f.mno.ppc_key, &mut f.rng);
        m.vsim_logon("pp-0", &mut f.rng).unwrap();
        let mut c3 = VsimClient::default();
        let cand = c3.next_candidate(&single, &mut f.rng).unwrap();
        assert_eq!(m.vsim_logon(&cand, &mut f.rng), Err(PrepaidDeny::ImsiBusy));
        assert_eq!(c3.next_candidate(&single, &mut f.rng), None);
    }

    #[test]
    fn pool_validation() {
        assert_eq!(PpImsiPool::new("m", Vec::<String>::new()), Err(PrepaidError::EmptyPool));
        let p = PpImsiPool::new("m", ["a".to_string(), "b".to_string()]).unwrap();
        assert!(p.check_disjoint(["c"]).is_ok());
        assert_eq!(p.check_disjoint(["b"]), Err(PrepaidError::PoolOverlap("b".into())));
    }
}
