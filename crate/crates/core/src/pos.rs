//! Point-of-sale purchase messages and the providers behind them: the
//! MNO-mediated order flow and the separation-of-duties billing flow.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::Tick;
use crate::crypto::{sign_body, verify_body, KeyPair, PublicKey, Signature};
use crate::pca::AikCertificate;
use crate::restriction::GenericCredential;

const PRICE_LIST_TAG: &str = "pos-price-list";
const ORDER_TAG: &str = "pos-purchase-order";
const ACK_TAG: &str = "pos-purchase-ack";
const BILLING_TAG: &str = "pos-billing-package";
const CONFIRM_TAG: &str = "pos-charge-confirmation";
const OWNER_ACK_TAG: &str = "pos-owner-ack";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PosError {
    #[error("price list has {goods} goods but {prices} prices")]
    Ragged { goods: usize, prices: usize },
    #[error("grand total overflows")]
    TotalOverflow,
    #[error("empty basket")]
    EmptyBasket,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceList {
    pub pos: String,
    pub goods: Vec<String>,
    pub prices: Vec<u64>,
    pub signature: Signature,
}

#[derive(Serialize)]
struct PriceListBody<'a> {
    pos: &'a str,
    goods: &'a [String],
    prices: &'a [u64],
}

impl PriceList {
    /// Owner-signed list for the POS known by pseudonym `pos`.
    pub fn new(owner: &KeyPair, pos: &str, entries: &[(String, u64)]) -> Self {
        let goods: Vec<String> = entries.iter().map(|(g, _)| g.clone()).collect();
        let prices: Vec<u64> = entries.iter().map(|(_, p)| *p).collect();
        let signature = sign_body(owner, PRICE_LIST_TAG, &PriceListBody { pos, goods: &goods, prices: &prices });
        PriceList { pos: pos.to_string(), goods, prices, signature }
    }

    pub fn verify(&self, owner: &PublicKey) -> Result<bool, PosError> {
        if self.goods.len() != self.prices.len() {
            return Err(PosError::Ragged { goods: self.goods.len(), prices: self.prices.len() });
        }
        let body = PriceListBody { pos: &self.pos, goods: &self.goods, prices: &self.prices };
        Ok(verify_body(owner, PRICE_LIST_TAG, &body, &self.signature))
    }

    pub fn price_of(&self, good: &str) -> Option<u64> {
        self.goods.iter().position(|g| g == good).and_then(|i| self.prices.get(i).copied())
    }
}

/// Device to MNO. The signature covers price and payment data; the good
/// id may travel sealed for the vendor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurchaseOrder {
    pub order_id: String,
    pub good_id: String,
    pub price: u64,
    pub modality: String,
    pub imsi: String,
    pub pos_pseudonym: String,
    pub signature: Signature,
}

#[derive(Serialize)]
struct OrderBody<'a> {
    order_id: &'a str,
    price: u64,
    modality: &'a str,
    imsi: &'a str,
    pos_pseudonym: &'a str,
}

impl PurchaseOrder {
    pub fn new(
        credential: &GenericCredential,
        order_id: &str,
        good_id: &str,
        price: u64,
        modality: &str,
        pos_pseudonym: &str,
    ) -> Self {
        let imsi = credential.device_identity.clone();
        let body = OrderBody { order_id, price, modality, imsi: &imsi, pos_pseudonym };
        let signature = credential.sign(ORDER_TAG, &body);
        PurchaseOrder {
            order_id: order_id.to_string(),
            good_id: good_id.to_string(),
            price,
            modality: modality.to_string(),
            imsi,
            pos_pseudonym: pos_pseudonym.to_string(),
            signature,
        }
    }

    fn body(&self) -> OrderBody<'_> {
        OrderBody {
            order_id: &self.order_id,
            price: self.price,
            modality: &self.modality,
            imsi: &self.imsi,
            pos_pseudonym: &self.pos_pseudonym,
        }
    }

    pub fn verify(&self, subscriber: &PublicKey) -> bool {
        verify_body(subscriber, ORDER_TAG, &self.body(), &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VendorNotice {
    pub order_id: String,
    pub good_id: String,
    pub price: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaymentNotice {
    pub order_id: String,
    pub price: u64,
    pub modality: String,
}

/// MNO-signed acceptance or rejection, relayed by the device to the POS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurchaseAck {
    pub order_id: String,
    pub price: u64,
    pub pos_pseudonym: String,
    pub accepted: bool,
    pub signature: Signature,
}

#[derive(Serialize)]
struct AckBody<'a> {
    order_id: &'a str,
    price: u64,
    pos_pseudonym: &'a str,
    accepted: bool,
}

impl PurchaseAck {
    pub fn new(mno: &KeyPair, order_id: &str, price: u64, pos_pseudonym: &str, accepted: bool) -> Self {
        let signature = sign_body(mno, ACK_TAG, &AckBody { order_id, price, pos_pseudonym, accepted });
        PurchaseAck {
            order_id: order_id.to_string(),
            price,
            pos_pseudonym: pos_pseudonym.to_string(),
            accepted,
            signature,
        }
    }

    pub fn verify(&self, mno: &PublicKey) -> bool {
        let body = AckBody {
            order_id: &self.order_id,
            price: self.price,
            pos_pseudonym: &self.pos_pseudonym,
            accepted: self.accepted,
        };
        verify_body(mno, ACK_TAG, &body, &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Delivery {
    pub order_id: String,
    pub good_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurchaseSelection {
    pub order_id: String,
    pub goods: Vec<String>,
    pub auth_token: AikCertificate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenCheck {
    pub order_id: String,
    pub auth_token: AikCertificate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenResult {
    pub order_id: String,
    pub valid: bool,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BillingData {
    pub order_id: String,
    pub auth_token: AikCertificate,
    pub goods: Vec<String>,
    pub prices: Vec<u64>,
    pub pos_location: String,
}

/// Exactly the token, the grand total and the signer's signature.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BillingPackage {
    pub auth_token: AikCertificate,
    pub grand_total: u64,
    pub signature: Signature,
}

#[derive(Serialize)]
struct BillingBody<'a> {
    auth_token: &'a AikCertificate,
    grand_total: u64,
}

pub fn grand_total(prices: &[u64]) -> Result<u64, PosError> {
    if prices.is_empty() {
        return Err(PosError::EmptyBasket);
    }
    prices.iter().try_fold(0u64, |acc, p| acc.checked_add(*p)).ok_or(PosError::TotalOverflow)
}

impl BillingPackage {
    pub fn new(signer: &KeyPair, auth_token: &AikCertificate, prices: &[u64]) -> Result<Self, PosError> {
        let grand_total = grand_total(prices)?;
        let signature = sign_body(signer, BILLING_TAG, &BillingBody { auth_token, grand_total });
        Ok(BillingPackage { auth_token: auth_token.clone(), grand_total, signature })
    }

    pub fn verify(&self, signer: &PublicKey) -> bool {
        let body = BillingBody { auth_token: &self.auth_token, grand_total: self.grand_total };
        verify_body(signer, BILLING_TAG, &body, &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargeConfirmation {
    pub auth_token: AikCertificate,
    pub grand_total: u64,
    pub approved: bool,
    pub signature: Signature,
}

#[derive(Serialize)]
struct ConfirmBody<'a> {
    auth_token: &'a AikCertificate,
    grand_total: u64,
    approved: bool,
}

impl ChargeConfirmation {
    pub fn verify(&self, provider: &PublicKey) -> bool {
        let body = ConfirmBody { auth_token: &self.auth_token, grand_total: self.grand_total, approved: self.approved };
        verify_body(provider, CONFIRM_TAG, &body, &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnerAck {
    pub order_id: String,
    pub approved: bool,
    pub signature: Signature,
}

#[derive(Serialize)]
struct OwnerAckBody<'a> {
    order_id: &'a str,
    approved: bool,
}

impl OwnerAck {
    pub fn new(owner: &KeyPair, order_id: &str, approved: bool) -> Self {
        let signature = sign_body(owner, OWNER_ACK_TAG, &OwnerAckBody { order_id, approved });
        OwnerAck { order_id: order_id.to_string(), approved, signature }
    }

    pub fn verify(&self, owner: &PublicKey) -> bool {
        verify_body(
            owner,
            OWNER_ACK_TAG,
            &OwnerAckBody { order_id: &self.order_id, approved: self.approved },
            &self.signature,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurchaseAbort {
    pub order_id: String,
    pub step: String,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum TokenReject {
    #[error("bad-cert-chain")]
    BadChain,
    #[error("cert-expired")]
    Expired,
    #[error("token-reused")]
    Reused,
}

/// Validates one-time auth tokens against the PCA roots it trusts.
#[derive(Clone, Debug)]
pub struct AuthProvider {
    roots: Vec<PublicKey>,
    used: BTreeSet<PublicKey>,
}

impl AuthProvider {
    pub fn new(roots: Vec<PublicKey>) -> Self {
        AuthProvider { roots, used: BTreeSet::new() }
    }

    pub fn validate(&mut self, token: &AikCertificate, now: Tick) -> Result<(), TokenReject> {
        if !self.roots.iter().any(|r| token.verify(r)) {
            return Err(TokenReject::BadChain);
        }
        if !token.valid_at(now) {
            return Err(TokenReject::Expired);
        }
        if !self.used.insert(token.aik_public) {
            return Err(TokenReject::Reused);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum ChargeReject {
    #[error("bad-billing-signature")]
    BadSignature,
    #[error("charge-refused")]
    Refused,
}

/// Charges a grand total against an auth token. Approves up to `limit`.
#[derive(Clone, Debug)]
pub struct ChargingProvider {
    key: KeyPair,
    pub limit: u64,
}

impl ChargingProvider {
    pub fn new(key: KeyPair, limit: u64) -> Self {
        ChargingProvider { key, limit }
    }

    pub fn public(&self) -> PublicKey {
        self.key.public()
    }

    /// A signed confirmation; `approved` is false when refused.
    pub fn charge(&self, package: &BillingPackage, signer: &PublicKey) -> Result<ChargeConfirmation, ChargeReject> {
        if !package.verify(signer) {
            return Err(ChargeReject::BadSignature);
        }
        let approved = package.grand_total <= self.limit;
        let body = ConfirmBody { auth_token: &package.auth_token, grand_total: package.grand_total, approved };
        let signature = sign_body(&self.key, CONFIRM_TAG, &body);
        Ok(ChargeConfirmation {
            auth_token: package.auth_token.clone(),
            grand_total: package.grand_total,
            approved,
            signature,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::Manufacturer;
    use crate::crypto::{keygen, Rng};
    use crate::pca::{EnrollmentRequest, PcaConfig, PrivacyCa};
    use crate::restriction::MnoNetwork;

    fn token(rng: &mut Rng) -> (AikCertificate, PublicKey) {
        let m = Manufacturer::new("acme", rng);
        let mut a = m.manufacture("phone", rng);
        let mut pca = PrivacyCa::new(PcaConfig::new("pca", "mno", 100), vec![m.root()], rng);
        let aiks = a.create_aik_batch(2, rng).unwrap();
        let ch = pca.liveness_challenge(rng);
        let req = EnrollmentRequest {
            ek_certificate: a.ek_certificate().clone(),
            aik_publics: aiks.iter().map(|x| x.public).collect(),
            liveness: a.ek_challenge_response(&ch),
        };
        (pca.enroll(&req, &ch, 0).unwrap().remove(0), pca.root())
    }

    #[test]
    fn price_list_sign_verify() {
        let mut rng = Rng::from_seed(3);
        let owner = keygen(&mut rng);
        let pl = PriceList::new(&owner, "pos-1", &[("cola".into(), 120), ("tea".into(), 90)]);
        assert!(pl.verify(&owner.public()).unwrap());
        assert_eq!(pl.price_of("tea"), Some(90));
        assert_eq!(pl.price_of("beer"), None);
        let mut bad = pl.clone();
        bad.prices[0] = 1;
        assert!(!bad.verify(&owner.public()).unwrap());
        bad.prices.pop();
        assert!(bad.verify(&owner.public()).is_err());
    }

    #[test]
    fn order_and_ack_signatures() {
        let mut rng = Rng::from_seed(4);
        let mut mno = MnoNetwork::new("mno");
        let cred = mno.issue_credential("001", &mut rng).unwrap();
        let o = PurchaseOrder::new(&cred, "o1", "cola", 120, "mno-bill", "p1");
        assert!(o.verify(mno.subscriber_key("001").unwrap()));
        let mut o2 = o.clone();
        o2.good_id = "other".into();
        assert!(o2.verify(&cred.public()));
        o2.price = 1;
        assert!(!o2.verify(&cred.public()));

        let mk = keygen(&mut rng);
        let ack = PurchaseAck::new(&mk, "o1", 120, "p1", true);
        assert!(ack.verify(&mk.public()));
        let mut stripped = ack.clone();
        stripped.signature = Signature(vec![]);
        assert!(!stripped.verify(&mk.public()));
    }

    #[test]
    fn billing_package_exact_fields() {
        let mut rng = Rng::from_seed(5);
        let (t, _) = token(&mut rng);
        let owner = keygen(&mut rng);
        let p = BillingPackage::new(&owner, &t, &[120, 80]).unwrap();
        assert_eq!(p.grand_total, 200);
        let v = serde_json::to_value(&p).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["auth_token", "grand_total", "signature"]);
        let mut extra = v.clone();
        extra.as_object_mut().unwrap().insert("good_id".into(), serde_json::json!("cola"));
        assert!(serde_json::from_value::<BillingPackage>(extra).is_err());
        assert_eq!(grand_total(&[]), Err(PosError::EmptyBasket));
        assert_eq!(grand_total(&[u64::MAX, 1]), Err(PosError::TotalOverflow));
    }

    #[test]
    fn auth_provider_one_time() {
        let mut rng = Rng::from_seed(6);
        let (t, root) = token(&mut rng);
        let mut ap = AuthProvider::new(vec![root]);
        assert_eq!(ap.validate(&t, 200), Err(TokenReject::Expired));
        assert_eq!(ap.validate(&t, 1), Ok(()));
        assert_eq!(ap.validate(&t, 2), Err(TokenReject::Reused));
        let mut other = AuthProvider::new(vec![keygen(&mut rng).public()]);
        assert_eq!(other.validate(&t, 1), Err(TokenReject::BadChain));
    }

    #[test]
    fn charging_and_owner_ack() {
        let mut rng = Rng::from_seed(7);
        let (t, _) = token(&mut rng);
        let owner = keygen(&mut rng);
        let cp = ChargingProvider::new(keygen(&mut rng), 150);
        let ok = BillingPackage::new(&owner, &t, &[100]).unwrap();
        let c = cp.charge(&ok, &owner.public()).unwrap();
        assert!(c.approved && c.verify(&cp.public()));
        let big = BillingPackage::new(&owner, &t, &[200]).unwrap();
        assert!(!cp.charge(&big, &owner.public()).unwrap().approved);
        assert_eq!(cp.charge(&ok, &cp.public()), Err(ChargeReject::BadSignature));
        let mut forged = c.clone();
        forged.grand_total = 1;
        assert!(!forged.verify(&cp.public()));
        let a = OwnerAck::new(&owner, "o1", true);
        assert!(a.verify(&owner.public()));
        assert!(!OwnerAck { approved: false, ..a }.verify(&owner.public()));
    }
}
