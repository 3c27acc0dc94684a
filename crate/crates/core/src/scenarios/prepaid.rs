//! Anonymous prepaid use through a shared IMSI pool and a trusted balance
//! counter on the device.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::script::EventSpec;
use super::world::{Link, World, SOFTWARE_VERSION};
use super::ScenarioError;
use crate::anchor::PcrPolicy;
use crate::attestation::AttestationResponse;
use crate::boot::{boot, BootChain};
use crate::crypto::keygen;
use crate::prepaid::{
    self, BalanceStatement, PpImsiPool, PrepaidDecision, PrepaidMno, Voucher, VsimClient, BALANCE_SLOT,
};
use crate::sim::Channel;

pub(super) const APPS: &[&str] = &["vsim", "ppc"];

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct VsimLogon {
    imsi: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct VsimLogonResult {
    imsi: String,
    accepted: bool,
    session: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PrepaidRequest {
    session: String,
    service: String,
    units: u64,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PrepaidAttestResponse {
    quote: crate::anchor::Quote,
    log: crate::boot::MeasurementLog,
    certificate: crate::pca::AikCertificate,
    statement: Option<BalanceStatement>,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PrepaidGrant {
    session: String,
    service: String,
    units: u64,
    cost: u64,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PrepaidDenyMsg {
    session: String,
    service: String,
    reason: String,
}

pub fn pool_imsi(index: usize) -> String {
    format!("00102{index:010}")
}

pub(super) fn run(w: &mut World) -> Result<(), ScenarioError> {
    let cfg = w.script.prepaid.clone().ok_or_else(|| ScenarioError::Config("missing [prepaid]".into()))?;
    let mno_id = w.id_for("mno")?;
    let pca = w.id_for("pca")?;
    let device = w.script.subject.clone();

    let mut reference = w.manufacturer.manufacture("reference", &mut w.rng);
    boot(&mut reference, &BootChain::standard(APPS, SOFTWARE_VERSION))?;
    let policy = PcrPolicy::new([(0, reference.pcrs().read(0)?)]);
    let ppc_key = keygen(&mut w.rng);

    w.new_device(&device, &pca, APPS)?;
    prepaid::provision(&mut w.device(&device)?.anchor, cfg.initial_balance, &ppc_key, policy)
        .map_err(|e| ScenarioError::Protocol(e.to_string()))?;
    w.enroll_offline(&device)?;
    w.event("provision", json!({ "device": device, "balance": cfg.initial_balance }));

    let pool = PpImsiPool::new(&mno_id, (0..cfg.pool_size).map(pool_imsi))
        .map_err(|e| ScenarioError::Config(e.to_string()))?;
    let mut mno = PrepaidMno::new(pool, cfg.tariffs.clone(), ppc_key.public(), &mut w.rng);
    for imsi in &cfg.busy {
        mno.vsim_logon(imsi, &mut w.rng)
            .map_err(|e| ScenarioError::Config(format!("busy IMSI {imsi}: {}", e.as_str())))?;
    }
    let root = w.pca_root(&pca)?;
    w.add_verifier(&mno_id, vec![root]);
    let link = Link::new(Channel::mobile(&mno_id), None);

    let session = logon(w, &mut mno, &device, &mno_id, &link)?;
    let issuer = mno.voucher_issuer();
    let mut redeemed = BTreeSet::new();
    let mut last_voucher: Option<Voucher> = None;
    let mut vouchers = 0;
    for ev in w.script.events.clone() {
        match ev {
            EventSpec::Request { service, units } => match &session {
                Some(s) => request(w, &mno, &device, &mno_id, &pca, &link, s, &service, units)?,
                None => w.event("denial", json!({ "device": device, "service": service, "reason": "no-session" })),
            },
            EventSpec::Voucher { value, replay } => {
                let voucher = match (&last_voucher, replay) {
                    (Some(v), true) => v.clone(),
                    _ => {
                        vouchers += 1;
                        mno.issue_voucher(&format!("v-{vouchers}"), value)
                    }
                };
                last_voucher = Some(voucher.clone());
                let Some(got) = w.send("voucher", &mno_id, &device, &link, &[], &voucher)? else { continue };
                match prepaid::top_up(&mut w.device(&device)?.anchor, &got, &issuer, &mut redeemed) {
                    Ok(balance) => w.event(
                        "balance",
                        json!({ "device": device, "delta": got.value as i64, "balance": balance, "cause": "voucher" }),
                    ),
                    Err(e) => w.event(
                        "voucher-rejected",
                        json!({ "device": device, "voucher": got.voucher_id, "reason": e.to_string() }),
                    ),
                }
            }
            EventSpec::Advance { ticks } => w.sim.advance(ticks),
            other => return Err(ScenarioError::Config(format!("op {} not handled", other.op()))),
        }
    }
    let final_balance = w.device(&device)?.anchor.inspect_counter(BALANCE_SLOT);
    w.event("final-balance", json!({ "device": device, "balance": final_balance }));
    Ok(())
}

fn logon(
    w: &mut World,
    mno: &mut PrepaidMno,
    device: &str,
    mno_id: &str,
    link: &Link,
) -> Result<Option<String>, ScenarioError> {
    let mut client = VsimClient::default();
    while let Some(imsi) = client.next_candidate(&mno.pool, &mut w.rng) {
        let Some(got) = w.send("vsim-logon", device, mno_id, link, &[], &VsimLogon { imsi })? else { continue };
        let result = mno.vsim_logon(&got.imsi, &mut w.rng);
        let reply =
            VsimLogonResult { imsi: got.imsi, accepted: result.is_ok(), session: result.clone().unwrap_or_default() };
        w.send("vsim-logon-result", mno_id, device, link, &[], &reply)?;
        if let Ok(s) = result {
            w.event("vsim-session", json!({ "device": device, "attempts": client.attempts() }));
            return Ok(Some(s));
        }
    }
    w.event("vsim-exhausted", json!({ "device": device, "attempts": client.attempts() }));
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn request(
    w: &mut World,
    mno: &PrepaidMno,
    device: &str,
    mno_id: &str,
    pca: &str,
    link: &Link,
    session: &str,
    service: &str,
    units: u64,
) -> Result<(), ScenarioError> {
    let req = PrepaidRequest { session: session.to_string(), service: service.to_string(), units };
    let Some(req) = w.send("prepaid-request", device, mno_id, link, &[], &req)? else { return Ok(()) };
    let Some((issued, received)) = w.challenge(mno_id, device, link)? else { return Ok(()) };
    let Some(resp) = w.prove(device, &received)? else { return Ok(()) };
    // The device prices the request from the published tariff table.
    let cost = mno.cost_of(service, units).unwrap_or(0);
    let statement =
        prepaid::balance_statement(&mut w.device(device)?.anchor, &received.nonce, service, units, cost).ok();
    let out = PrepaidAttestResponse { quote: resp.quote, log: resp.log, certificate: resp.certificate, statement };
    let Some(got) = w.send("prepaid-attest-response", device, mno_id, link, &[], &out)? else { return Ok(()) };
    let resp = AttestationResponse { quote: got.quote, log: got.log, certificate: got.certificate };
    let verdict = w.judge(mno_id, device, &resp, &issued, "prepaid", link)?;
    match mno.decide(&req.session, &verdict.verdict, got.statement.as_ref(), &issued.nonce, &req.service, req.units) {
        PrepaidDecision::Grant { cost } => {
            let grant =
                PrepaidGrant { session: req.session.clone(), service: req.service.clone(), units: req.units, cost };
            w.grant("prepaid", mno_id, device, &[&verdict], json!({ "service": req.service, "cost": cost }));
            if let Some(g) = w.send("prepaid-grant", mno_id, device, link, &[], &grant)? {
                match prepaid::charge(&mut w.device(device)?.anchor, g.cost) {
                    Ok(balance) => w.event(
                        "balance",
                        json!({ "device": device, "delta": -(g.cost as i64), "balance": balance, "cause": "charge" }),
                    ),
                    Err(e) => w.event("charge-failed", json!({ "device": device, "reason": e.to_string() })),
                }
            }
        }
        PrepaidDecision::Deny(reason) => {
            w.event("denial", json!({ "device": device, "service": req.service, "reason": reason.as_str() }));
            let deny = PrepaidDenyMsg {
                session: req.session.clone(),
                service: req.service.clone(),
                reason: reason.as_str().to_string(),
            };
            w.send("prepaid-deny", mno_id, device, link, &[], &deny)?;
        }
    }
    let pca_link = w.mobile(device, pca, true)?;
    w.maybe_replenish(device, &pca_link)
}
