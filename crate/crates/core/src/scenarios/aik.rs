//! Repeated service authentication with one-time AIKs.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::script::EventSpec;
use super::world::World;
use super::ScenarioError;

pub(super) const APPS: &[&str] = &["svc-client"];

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct ServiceRequest {
    service: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct ServiceResult {
    service: String,
    granted: bool,
    reasons: Vec<String>,
}

pub(super) fn run(w: &mut World) -> Result<(), ScenarioError> {
    let pca = w.id_for("pca")?;
    let devices: Vec<_> = w.script.parties_for("device").cloned().collect();
    for d in &devices {
        w.new_device(&d.id, &pca, APPS)?;
        if d.foreign {
            w.enroll_foreign(&d.id)?;
        } else {
            let link = w.mobile(&d.id, &pca, true)?;
            w.enroll(&d.id, &link)?;
        }
    }
    let root = w.pca_root(&pca)?;
    let services: Vec<_> = w.script.parties_for("service").map(|p| p.id.clone()).collect();
    for s in &services {
        w.add_verifier(s, vec![root]);
    }
    for ev in w.script.events.clone() {
        match ev {
            EventSpec::Authenticate { count, service } => {
                for _ in 0..count {
                    for d in &devices {
                        authenticate(w, &d.id, &service, &pca)?;
                    }
                }
            }
            EventSpec::Advance { ticks } => w.sim.advance(ticks),
            other => return Err(ScenarioError::Config(format!("op {} not handled", other.op()))),
        }
    }
    Ok(())
}

fn authenticate(w: &mut World, device: &str, service: &str, pca: &str) -> Result<(), ScenarioError> {
    let link = w.mobile(device, service, true)?;
    let req = ServiceRequest { service: service.to_string() };
    if w.send("service-request", device, service, &link, &[], &req)?.is_none() {
        return Ok(());
    }
    let verdict = w.attest(device, service, &link, "service")?;
    let (granted, reasons) = match &verdict {
        Some(v) => (v.accepted(), v.verdict.reasons.iter().map(|r| r.as_str().to_string()).collect()),
        None => (false, vec!["no-response".to_string()]),
    };
    let result = ServiceResult { service: service.to_string(), granted, reasons };
    w.send("service-result", service, device, &link, &[], &result)?;
    if let Some(v) = verdict.filter(|v| v.accepted()) {
        w.grant("service", service, device, &[&v], json!({}));
    }
    let pca_link = w.mobile(device, pca, true)?;
    w.maybe_replenish(device, &pca_link)
}
