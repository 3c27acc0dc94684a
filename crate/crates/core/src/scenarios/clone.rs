//! SIM clones asking for admission to an MNO subdomain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::script::EventSpec;
use super::world::{Link, World};
use super::ScenarioError;
use crate::restriction::{Admission, GenericCredential, MnoNetwork, RegistryMode, SubdomainRegistry};
use crate::sim::Channel;

pub(super) const APPS: &[&str] = &["restrict-agent"];

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct NetworkChallenge {
    challenge: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct NetworkLogon {
    imsi: String,
    proof: crate::crypto::Signature,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct NetworkSession {
    imsi: String,
    accepted: bool,
    session: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct SubdomainRequest {
    session: String,
    domain: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct SubdomainResult {
    domain: String,
    admitted: bool,
    reason: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct FeaturePolicyMsg {
    location: String,
    features: BTreeMap<String, String>,
}

pub(super) fn imsi_for(index: usize) -> String {
    format!("00101{index:010}")
}

pub(super) fn run(w: &mut World) -> Result<(), ScenarioError> {
    let mno = w.id_for("mno")?;
    let pca = w.id_for("pca")?;
    let domain = format!("{mno}-restricted");
    let mode = RegistryMode::parse(w.variant("mode")).unwrap_or(RegistryMode::Bound);
    let mut network = MnoNetwork::new(mno.clone());
    let mut registry = SubdomainRegistry::new(mode);
    let devices: Vec<_> = w.script.parties_for("device").cloned().collect();

    let mut credentials: BTreeMap<String, GenericCredential> = BTreeMap::new();
    for (i, d) in devices.iter().filter(|d| d.clone_of.is_none()).enumerate() {
        let cred =
            network.issue_credential(&imsi_for(i), &mut w.rng).map_err(|e| ScenarioError::Protocol(e.to_string()))?;
        credentials.insert(d.id.clone(), cred);
    }
    for d in &devices {
        if let Some(orig) = &d.clone_of {
            let copy = credentials[orig].clone();
            w.event("credential-copied", json!({ "device": d.id, "from": orig }));
            credentials.insert(d.id.clone(), copy);
        }
    }
    for d in &devices {
        w.new_device(&d.id, &pca, APPS)?;
        if d.foreign {
            w.enroll_foreign(&d.id)?;
        } else {
            let link = w.mobile(&d.id, &pca, true)?;
            w.enroll(&d.id, &link)?;
        }
        if d.clone_of.is_none() {
            let fp = w.device(&d.id)?.wallet.entries().first().map(|e| e.certificate.fingerprint());
            if let Some(fp) = fp {
                let imsi = &credentials[&d.id].device_identity;
                registry.bind(imsi, &fp);
                w.event("binding", json!({ "device": d.id, "aik": fp }));
            }
        }
    }
    let root = w.pca_root(&pca)?;
    w.add_verifier(&mno, vec![root]);

    let mut order: Vec<_> = devices.iter().map(|d| d.id.clone()).collect();
    for i in (1..order.len()).rev() {
        let j = w.rng.below(i + 1);
        order.swap(i, j);
    }
    w.event("arrival-order", json!({ "order": order }));
    for id in &order {
        admit(w, id, &credentials[id], &mut network, &mut registry, &mno, &domain)?;
    }
    for ev in w.script.events.clone() {
        match ev {
            EventSpec::Advance { ticks } => w.sim.advance(ticks),
            other => return Err(ScenarioError::Config(format!("op {} not handled", other.op()))),
        }
    }
    Ok(())
}

fn admit(
    w: &mut World,
    device: &str,
    cred: &GenericCredential,
    network: &mut MnoNetwork,
    registry: &mut SubdomainRegistry,
    mno: &str,
    domain: &str,
) -> Result<(), ScenarioError> {
    let link = Link::new(Channel::mobile(mno), None);
    let challenge = w.rng.token(8);
    let Some(got) =
        w.send("network-challenge", mno, device, &link, &[], &NetworkChallenge { challenge: challenge.clone() })?
    else {
        return Ok(());
    };
    let logon = NetworkLogon { imsi: cred.device_identity.clone(), proof: cred.prove(&got.challenge) };
    let Some(logon) = w.send("network-logon", device, mno, &link, &[], &logon)? else { return Ok(()) };
    let session = network.network_access(&logon.imsi, &challenge, &logon.proof, &mut w.rng);
    let reply = NetworkSession {
        imsi: logon.imsi.clone(),
        accepted: session.is_ok(),
        session: session.as_ref().map(|s| s.id.clone()).unwrap_or_default(),
    };
    w.send("network-session", mno, device, &link, &[], &reply)?;
    let Ok(session) = session else {
        w.event("admission", json!({ "device": device, "admitted": false, "reason": "network-rejected" }));
        return Ok(());
    };
    let req = SubdomainRequest { session: session.id.clone(), domain: domain.to_string() };
    let Some(req) = w.send("subdomain-request", device, mno, &link, &[], &req)? else { return Ok(()) };
    let Ok(session) = network.session(&req.session).cloned() else {
        w.send(
            "subdomain-result",
            mno,
            device,
            &link,
            &[],
            &SubdomainResult { domain: req.domain, admitted: false, reason: "no-session".into() },
        )?;
        return Ok(());
    };
    let Some(verdict) = w.attest(device, mno, &link, "subdomain")? else { return Ok(()) };
    let fp = verdict.certificate.fingerprint();
    let admission = registry.request(&session.imsi, &fp, &verdict.verdict);
    let (admitted, reason) = match &admission {
        Admission::Admitted => (true, "admitted".to_string()),
        Admission::Denied(r) => (false, r.as_str().to_string()),
    };
    w.event("admission", json!({ "device": device, "admitted": admitted, "reason": reason, "verdict": verdict.id }));
    w.send(
        "subdomain-result",
        mno,
        device,
        &link,
        &[],
        &SubdomainResult { domain: domain.to_string(), admitted, reason },
    )?;
    if admitted {
        let features = BTreeMap::from([("subdomain-services".to_string(), "enabled".to_string())]);
        w.send(
            "feature-policy",
            mno,
            device,
            &link,
            &[],
            &FeaturePolicyMsg { location: domain.to_string(), features },
        )?;
        w.grant("subdomain", mno, device, &[&verdict], json!({ "domain": domain }));
    }
    Ok(())
}
