//! Point-of-sale purchases: the MNO-mediated order flow and the
//! separation-of-duties billing flow.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::clone::imsi_for;
use super::script::{EventSpec, PosConfig};
use super::world::{Link, VerdictRef, World};
use super::ScenarioError;
use crate::crypto::{keygen, KeyPair, PublicKey};
use crate::pca::{AikCertificate, AikWallet};
use crate::pos::{
    AuthProvider, BillingData, BillingPackage, ChargeConfirmation, ChargingProvider, Delivery, OwnerAck, PaymentNotice,
    PriceList, PurchaseAbort, PurchaseAck, PurchaseOrder, PurchaseSelection, TokenCheck, TokenResult, VendorNotice,
};
use crate::restriction::{GenericCredential, MnoNetwork};
use crate::sim::Channel;

pub(super) const DEVICE_APPS: &[&str] = &["wallet-app"];
pub(super) const POS_APPS: &[&str] = &["pos-firmware"];
/// Party ids the reuse-token attack adds.
pub const CLONED_DEVICE: &str = "cloned-handset";
pub const SECOND_POS: &str = "pos-2";

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PosIdentityQuery {
    pos_certificate: AikCertificate,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PosIdentityAnswer {
    pos_identity: String,
    valid: bool,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PosIdentityResult {
    valid: bool,
}

/// Keys and ids common to both flows.
struct Shop {
    cfg: PosConfig,
    device: String,
    pos: String,
    owner: String,
    owner_key: KeyPair,
    pos_pca: String,
    encrypted: bool,
    orders: usize,
}

impl Shop {
    fn setup(w: &mut World) -> Result<Shop, ScenarioError> {
        let cfg = w.script.pos.clone().ok_or_else(|| ScenarioError::Config("missing [pos]".into()))?;
        let device = w.script.subject.clone();
        let pos = w.id_for("pos")?;
        let owner = w.id_for("pos-owner")?;
        let pca = w.id_for("pca")?;
        let pos_pca = w.id_for("pos-pca")?;
        let encrypted = w.flag("encryption", true);
        let owner_key = keygen(&mut w.rng);

        for d in w.script.parties_for("device").cloned().collect::<Vec<_>>() {
            w.new_device(&d.id, &pca, DEVICE_APPS)?;
            if d.foreign {
                w.enroll_foreign(&d.id)?;
            } else {
                let link = w.mobile(&d.id, &pca, true)?;
                w.enroll(&d.id, &link)?;
            }
        }
        add_pos(w, &pos, &pos_pca)?;
        let device_root = w.pca_root(&pca)?;
        let pos_root = w.pca_root(&pos_pca)?;
        w.add_verifier(&pos, vec![device_root]);
        w.add_verifier(&device, vec![pos_root]);
        Ok(Shop { cfg, device, pos, owner, owner_key, pos_pca, encrypted, orders: 0 })
    }

    fn next_order(&mut self) -> String {
        self.orders += 1;
        format!("order-{}", self.orders)
    }

    fn short_range(&self, w: &mut World, device: &str, pos: &str) -> Result<Link, ScenarioError> {
        let key = if self.encrypted { Some(w.net_key(device, pos)?) } else { None };
        Ok(Link::new(Channel::short_range(), key))
    }

    fn price_entries(&self, goods: &[String]) -> Vec<(String, u64)> {
        goods.iter().map(|g| (g.clone(), self.cfg.prices.get(g).copied().unwrap_or(0))).collect()
    }
}

fn add_pos(w: &mut World, pos: &str, pos_pca: &str) -> Result<(), ScenarioError> {
    w.new_device(pos, pos_pca, POS_APPS)?;
    let link = w.direct(pos, pos_pca, true)?;
    w.enroll(pos, &link)?;
    Ok(())
}

/// Fresh pseudonym batch for the POS; unused AIKs of the old batch are
/// discarded.
fn rotate(w: &mut World, shop: &Shop) -> Result<(), ScenarioError> {
    w.device(&shop.pos)?.wallet = AikWallet::default();
    let link = w.direct(&shop.pos, &shop.pos_pca, true)?;
    let ok = w.enroll(&shop.pos, &link)?;
    w.event("pseudonym-rotated", json!({ "pos": shop.pos, "ok": ok }));
    Ok(())
}

/// POS and device attest to each other. Returns the device's verdict and
/// the POS pseudonym certificate when both pass.
fn mutual(
    w: &mut World,
    device: &str,
    pos: &str,
    link: &Link,
    flow: &str,
    order_id: &str,
) -> Result<Option<(VerdictRef, AikCertificate)>, ScenarioError> {
    let pos_verdict = w.attest(pos, device, link, "pos-session")?;
    let pos_cert = match pos_verdict {
        Some(v) if v.accepted() => v.certificate,
        _ => {
            let reason = "pos-attestation-failed";
            abort_msg(w, device, pos, link, flow, order_id, "0", reason)?;
            return Ok(None);
        }
    };
    let dev_verdict = w.attest(device, pos, link, "purchase")?;
    match dev_verdict {
        Some(v) if v.accepted() => Ok(Some((v, pos_cert))),
        _ => {
            abort_msg(w, pos, device, link, flow, order_id, "0", "device-attestation-failed")?;
            Ok(None)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn abort_msg(
    w: &mut World,
    from: &str,
    to: &str,
    link: &Link,
    flow: &str,
    order_id: &str,
    step: &str,
    reason: &str,
) -> Result<(), ScenarioError> {
    let msg = PurchaseAbort { order_id: order_id.to_string(), step: step.to_string(), reason: reason.to_string() };
    w.send("purchase-abort", from, to, link, &[], &msg)?;
    w.abort(flow, step, reason, json!({ "order_id": order_id, "by": from }));
    Ok(())
}

fn step(w: &mut World, name: &str, order_id: &str, step: &str) {
    w.event(name, json!({ "order_id": order_id, "step": step }));
}

/// POS confirms the order and hands over the goods.
fn deliver(
    w: &mut World,
    pos: &str,
    device: &str,
    link: &Link,
    order_id: &str,
    goods: &[String],
    verdict: &VerdictRef,
) -> Result<(), ScenarioError> {
    w.event("confirmation", json!({ "order_id": order_id, "pos": pos }));
    for g in goods {
        w.send("delivery", pos, device, link, &[], &Delivery { order_id: order_id.to_string(), good_id: g.clone() })?;
    }
    w.grant("delivery", pos, device, &[verdict], json!({ "order_id": order_id }));
    Ok(())
}

pub(super) fn run_fig4(w: &mut World) -> Result<(), ScenarioError> {
    let mut shop = Shop::setup(w)?;
    let mno = w.id_for("mno")?;
    let vendor = w.id_for("vendor")?;
    let payment = w.id_for("payment-provider")?;
    let mno_key = keygen(&mut w.rng);
    let mut network = MnoNetwork::new(mno.clone());
    let credential =
        network.issue_credential(&imsi_for(0), &mut w.rng).map_err(|e| ScenarioError::Protocol(e.to_string()))?;
    if w.attack_is("strip-ack") {
        w.event("attack", json!({ "name": "strip-ack", "device": shop.device }));
    }
    for ev in w.script.events.clone() {
        match ev {
            EventSpec::Purchase { goods } => {
                let order_id = shop.next_order();
                fig4_order(w, &shop, &order_id, &goods[0], &credential, &network, &mno, &mno_key, &vendor, &payment)?;
            }
            EventSpec::RotatePseudonym => rotate(w, &shop)?,
            EventSpec::Advance { ticks } => w.sim.advance(ticks),
            other => return Err(ScenarioError::Config(format!("op {} not handled", other.op()))),
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fig4_order(
    w: &mut World,
    shop: &Shop,
    order_id: &str,
    good: &str,
    credential: &GenericCredential,
    network: &MnoNetwork,
    mno: &str,
    mno_key: &KeyPair,
    vendor: &str,
    payment: &str,
) -> Result<(), ScenarioError> {
    const FLOW: &str = "fig4";
    let (device, pos) = (shop.device.as_str(), shop.pos.as_str());
    let link = shop.short_range(w, device, pos)?;
    let Some((verdict, pos_cert)) = mutual(w, device, pos, &link, FLOW, order_id)? else { return Ok(()) };
    let pseudonym = pos_cert.fingerprint();

    step(w, "fig4-step", order_id, "1");
    let list = PriceList::new(&shop.owner_key, &pseudonym, &shop.price_entries(&[good.to_string()]));
    let Some(list) = w.send("price-list", pos, device, &link, &[], &list)? else { return Ok(()) };
    let price = match (list.verify(&shop.owner_key.public()), list.price_of(good)) {
        (Ok(true), Some(p)) => p,
        _ => return abort_msg(w, device, pos, &link, FLOW, order_id, "1", "bad-price-list"),
    };

    step(w, "fig4-step", order_id, "2");
    let mobile = Link::new(Channel::mobile(mno), None);
    if w.variant("pos-check") == "mno" && !pos_identity_check(w, device, mno, &shop.pos_pca, &pos_cert, &shop.cfg)? {
        return abort_msg(w, device, pos, &link, FLOW, order_id, "2", "pos-identity-invalid");
    }
    let order = PurchaseOrder::new(credential, order_id, good, price, &shop.cfg.modality, &pseudonym);
    let vendor_seal = if shop.encrypted { Some(w.seal_key(vendor)?) } else { None };
    let seal: Vec<(&str, &String)> = vendor_seal.iter().map(|k| ("good_id", k)).collect();
    let Some(order) = w.send("purchase-order", device, mno, &mobile, &seal, &order)? else { return Ok(()) };
    let accepted = network.subscriber_key(&order.imsi).is_some_and(|k| order.verify(k));

    if w.flag("notify-vendor", true) && accepted {
        step(w, "fig4-step", order_id, "3");
        let link = w.direct(mno, vendor, true)?;
        let notice =
            VendorNotice { order_id: order_id.to_string(), good_id: order.good_id.clone(), price: order.price };
        w.send("vendor-notice", mno, vendor, &link, &seal, &notice)?;
    }
    if w.flag("notify-payment", true) && accepted {
        step(w, "fig4-step", order_id, "4");
        let link = w.direct(mno, payment, true)?;
        let notice =
            PaymentNotice { order_id: order_id.to_string(), price: order.price, modality: order.modality.clone() };
        w.send("payment-notice", mno, payment, &link, &[], &notice)?;
    }

    step(w, "fig4-step", order_id, "5");
    let ack = PurchaseAck::new(mno_key, order_id, order.price, &order.pos_pseudonym, accepted);
    let Some(ack) = w.send("purchase-ack", mno, device, &mobile, &[], &ack)? else { return Ok(()) };

    step(w, "fig4-step", order_id, "6");
    if w.attack_is("strip-ack") {
        let occurrence = w.sim.occurrences("purchase-ack");
        w.sim.add_hook(crate::sim::Hook {
            kind: "purchase-ack".into(),
            occurrence,
            sender: None,
            action: crate::sim::HookAction::Modify { field: "signature".into(), value: json!("") },
        });
    }
    let relayed = w.send("purchase-ack", device, pos, &link, &[], &ack)?;

    step(w, "fig4-step", order_id, "7");
    let valid = relayed.is_some_and(|a| {
        a.verify(&mno_key.public())
            && a.accepted
            && a.order_id == order_id
            && a.price == price
            && a.pos_pseudonym == pseudonym
    });
    if !valid {
        return abort_msg(w, pos, device, &link, FLOW, order_id, "7", "bad-ack");
    }
    deliver(w, pos, device, &link, order_id, &[good.to_string()], &verdict)
}

/// Device asks the MNO to resolve the POS pseudonym through the POS PCA.
fn pos_identity_check(
    w: &mut World,
    device: &str,
    mno: &str,
    pos_pca: &str,
    cert: &AikCertificate,
    cfg: &PosConfig,
) -> Result<bool, ScenarioError> {
    let mobile = Link::new(Channel::mobile(mno), None);
    let query = PosIdentityQuery { pos_certificate: cert.clone() };
    let Some(query) = w.send("pos-identity-query", device, mno, &mobile, &[], &query)? else { return Ok(false) };
    let link = w.direct(mno, pos_pca, true)?;
    let Some(query) = w.send("pos-identity-query", mno, pos_pca, &link, &[], &query)? else { return Ok(false) };
    let pca = &w.pcas[pos_pca];
    let known = query.pos_certificate.verify(&pca.root()) && pca.linked_ek(&query.pos_certificate.aik_public).is_some();
    let answer =
        PosIdentityAnswer { pos_identity: if known { cfg.pos_identity.clone() } else { String::new() }, valid: known };
    let Some(answer) = w.send("pos-identity-answer", pos_pca, mno, &link, &[], &answer)? else { return Ok(false) };
    let result = PosIdentityResult { valid: answer.valid };
    let got = w.send("pos-identity-result", mno, device, &mobile, &[], &result)?;
    Ok(got.is_some_and(|r| r.valid))
}

struct Billing {
    auth_id: String,
    auth: AuthProvider,
    charging_id: String,
    charging: ChargingProvider,
    pos_key: KeyPair,
}

pub(super) fn run_billing(w: &mut World) -> Result<(), ScenarioError> {
    let mut shop = Shop::setup(w)?;
    let pca = w.id_for("pca")?;
    let limit = if w.attack_is("charge-refused") { 0 } else { w.variant_u64("charge-limit", u64::MAX) };
    let mut billing = Billing {
        auth_id: w.id_for("auth-provider")?,
        auth: AuthProvider::new(vec![w.pca_root(&pca)?]),
        charging_id: w.id_for("charging-provider")?,
        charging: ChargingProvider::new(keygen(&mut w.rng), limit),
        pos_key: keygen(&mut w.rng),
    };
    if w.attack_is("charge-refused") {
        w.event("attack", json!({ "name": "charge-refused", "limit": 0 }));
    }
    // The clone copies the handset before it spends any AIK.
    let clone = w.attack_is("reuse-token").then(|| w.devices[&shop.device].clone());
    let mut first_basket: Option<Vec<String>> = None;
    for ev in w.script.events.clone() {
        match ev {
            EventSpec::Purchase { goods } => {
                let order_id = shop.next_order();
                let device = shop.device.clone();
                let pos = shop.pos.clone();
                billing_order(w, &shop, &mut billing, &order_id, &device, &pos, &goods)?;
                first_basket.get_or_insert(goods);
            }
            EventSpec::RotatePseudonym => rotate(w, &shop)?,
            EventSpec::Advance { ticks } => w.sim.advance(ticks),
            other => return Err(ScenarioError::Config(format!("op {} not handled", other.op()))),
        }
    }
    if let (Some(mut dev), Some(goods)) = (clone, first_basket) {
        w.sim.register(CLONED_DEVICE, "attacker")?;
        w.sim.register(SECOND_POS, "pos")?;
        dev.id = CLONED_DEVICE.to_string();
        w.devices.insert(CLONED_DEVICE.to_string(), dev);
        add_pos(w, SECOND_POS, &shop.pos_pca)?;
        let device_root = w.pca_root(&pca)?;
        let pos_root = w.pca_root(&shop.pos_pca)?;
        w.add_verifier(SECOND_POS, vec![device_root]);
        w.add_verifier(CLONED_DEVICE, vec![pos_root]);
        w.event("attack", json!({ "name": "reuse-token", "device": CLONED_DEVICE, "pos": SECOND_POS }));
        let order_id = shop.next_order();
        billing_order(w, &shop, &mut billing, &order_id, CLONED_DEVICE, SECOND_POS, &goods)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn billing_order(
    w: &mut World,
    shop: &Shop,
    b: &mut Billing,
    order_id: &str,
    device: &str,
    pos: &str,
    goods: &[String],
) -> Result<(), ScenarioError> {
    const FLOW: &str = "billing";
    let owner = shop.owner.as_str();
    let link = shop.short_range(w, device, pos)?;
    let Some((verdict, _)) = mutual(w, device, pos, &link, FLOW, order_id)? else { return Ok(()) };

    step(w, "billing-step", order_id, "i");
    let selection = PurchaseSelection {
        order_id: order_id.to_string(),
        goods: goods.to_vec(),
        auth_token: verdict.certificate.clone(),
    };
    let Some(selection) = w.send("purchase-selection", device, pos, &link, &[], &selection)? else { return Ok(()) };
    let token = selection.auth_token.clone();

    step(w, "billing-step", order_id, "ii");
    let check = TokenCheck { order_id: order_id.to_string(), auth_token: token.clone() };
    let via_owner = w.variant("token-check") != "direct";
    let auth_id = b.auth_id.clone();
    let (first_hop, first_link) = if via_owner {
        (owner.to_string(), w.direct(pos, owner, true)?)
    } else {
        (auth_id.clone(), w.direct(pos, &auth_id, true)?)
    };
    let Some(mut check) = w.send("token-check", pos, &first_hop, &first_link, &[], &check)? else { return Ok(()) };
    let auth_link = w.direct(&first_hop, &auth_id, true)?;
    if via_owner {
        let Some(c) = w.send("token-check", owner, &auth_id, &auth_link, &[], &check)? else { return Ok(()) };
        check = c;
    }
    let now = w.sim.now();
    let outcome = b.auth.validate(&check.auth_token, now);
    let result = TokenResult {
        order_id: order_id.to_string(),
        valid: outcome.is_ok(),
        reason: outcome.err().map_or_else(|| "ok".to_string(), |e| e.to_string()),
    };
    let mut result = w.send("token-result", &auth_id, &first_hop, &auth_link, &[], &result)?;
    if via_owner {
        if let Some(r) = result {
            result = w.send("token-result", owner, pos, &first_link, &[], &r)?;
        }
    }
    let Some(result) = result else { return Ok(()) };
    if !result.valid {
        return abort_msg(w, pos, device, &link, FLOW, order_id, "ii", &result.reason);
    }

    step(w, "billing-step", order_id, "iii");
    let prices: Vec<u64> = shop.price_entries(goods).into_iter().map(|(_, p)| p).collect();
    let charging = b.charging_id.clone();
    let centralised = w.variant("billing") != "decentralised";
    let (signer_id, signer_key): (String, &KeyPair) =
        if centralised { (owner.to_string(), &shop.owner_key) } else { (pos.to_string(), &b.pos_key) };
    let signer_pub: PublicKey = signer_key.public();
    if centralised {
        let data = BillingData {
            order_id: order_id.to_string(),
            auth_token: token.clone(),
            goods: goods.to_vec(),
            prices: prices.clone(),
            pos_location: shop.cfg.pos_location.clone(),
        };
        let owner_link = w.direct(pos, owner, true)?;
        if w.send("billing-data", pos, owner, &owner_link, &[], &data)?.is_none() {
            return Ok(());
        }
    }
    let package =
        BillingPackage::new(signer_key, &token, &prices).map_err(|e| ScenarioError::Protocol(e.to_string()))?;
    let charge_link = w.direct(&signer_id, &charging, true)?;
    let Some(package) = w.send("billing-package", &signer_id, &charging, &charge_link, &[], &package)? else {
        return Ok(());
    };

    step(w, "billing-step", order_id, "iv");
    let confirmation = match b.charging.charge(&package, &signer_pub) {
        Ok(c) => c,
        Err(e) => return abort_msg(w, pos, device, &link, FLOW, order_id, "iv", &e.to_string()),
    };
    let Some(confirmation) = w.send("charge-confirmation", &charging, &signer_id, &charge_link, &[], &confirmation)?
    else {
        return Ok(());
    };
    let approved = confirm_ok(&confirmation, &b.charging.public(), &token);
    let approved = if centralised {
        let ack = OwnerAck::new(&shop.owner_key, order_id, approved);
        let owner_link = w.direct(owner, pos, true)?;
        let Some(ack) = w.send("owner-ack", owner, pos, &owner_link, &[], &ack)? else { return Ok(()) };
        ack.verify(&shop.owner_key.public()) && ack.approved && ack.order_id == order_id
    } else {
        approved
    };
    if !approved {
        return abort_msg(w, pos, device, &link, FLOW, order_id, "iv", "charge-refused");
    }
    deliver(w, pos, device, &link, order_id, goods, &verdict)
}

fn confirm_ok(c: &ChargeConfirmation, provider: &PublicKey, token: &AikCertificate) -> bool {
    c.verify(provider) && c.approved && c.auth_token == *token
}
