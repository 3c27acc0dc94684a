//! Company facility: attested entry at gates, zone feature policies,
//! terminal requests and filtered outbound bookings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::script::{EventSpec, FacilityConfig};
use super::world::{Link, World};
use super::ScenarioError;
use crate::attestation::Tick;
use crate::crypto::PublicKey;
use crate::pca::AikCertificate;
use crate::restriction::{apply_policy, FeatureMap, PolicyOutcome};
use crate::sim::Channel;

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct AccessCheck {
    auth_token: AikCertificate,
    zone: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct AccessRights {
    allowed: bool,
    zone: String,
    reason: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct PolicyCache {
    domain: String,
    pca_roots: Vec<PublicKey>,
    zones: Vec<String>,
    issued_at: Tick,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct EntryResult {
    zone: String,
    granted: bool,
    reason: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct FeaturePolicyMsg {
    location: String,
    features: FeatureMap,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct TerminalRequest {
    terminal: String,
    request: String,
    room: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct TerminalRelay {
    terminal: String,
    request: String,
    room: String,
    employee: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct TerminalResult {
    terminal: String,
    ok: bool,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct OutboundRequest {
    room: String,
    action: String,
    until: String,
    attendees: Vec<String>,
    meeting_title: String,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct FacilityRequest {
    room: String,
    action: String,
    until: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attendees: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meeting_title: Option<String>,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct FacilityAck {
    room: String,
    ok: bool,
}

/// Location name used for the base policy after exit.
pub const OUTSIDE: &str = "outside";

struct Site {
    cfg: FacilityConfig,
    server: String,
    domain: String,
    roots: Vec<PublicKey>,
    caches: BTreeMap<String, PolicyCache>,
    inside: BTreeMap<String, String>,
}

pub(super) fn run(w: &mut World) -> Result<(), ScenarioError> {
    let cfg = w.script.facility.clone().ok_or_else(|| ScenarioError::Config("missing [facility]".into()))?;
    let pca = w.id_for("pca")?;
    let server = w.id_for("company-server")?;
    let apps = ["company-agent", cfg.enforcer_component.as_str()];
    for d in w.script.parties_for("device").cloned().collect::<Vec<_>>() {
        w.new_device(&d.id, &pca, &apps)?;
        if d.foreign {
            w.enroll_foreign(&d.id)?;
        } else {
            let link = w.mobile(&d.id, &pca, true)?;
            w.enroll(&d.id, &link)?;
        }
    }
    let roots = vec![w.pca_root(&pca)?];
    for g in &cfg.gates {
        if !w.script.party(g).is_some_and(|p| p.plays("gate")) {
            return Err(ScenarioError::Config(format!("gate {g} is not a gate party")));
        }
        w.add_verifier(g, roots.clone());
    }
    let domain = w.pcas[&pca].domain_id().to_string();
    let mut site = Site { cfg, server, domain, roots, caches: BTreeMap::new(), inside: BTreeMap::new() };
    if w.variant("gate-mode") == "cache" {
        for g in site.cfg.gates.clone() {
            refresh_cache(w, &mut site, &g)?;
        }
    }
    for ev in w.script.events.clone() {
        match ev {
            EventSpec::Enter { device, zone } => enter(w, &mut site, &device, &zone)?,
            EventSpec::Exit { device } => exit(w, &mut site, &device)?,
            EventSpec::Terminal { device, terminal, request, room } => {
                terminal_request(w, &site, &device, &terminal, &request, &room)?
            }
            EventSpec::Meeting { room, until, attendees, title } => {
                meeting(w, &site, &room, &until, &attendees, &title)?
            }
            EventSpec::Advance { ticks } => w.sim.advance(ticks),
            other => return Err(ScenarioError::Config(format!("op {} not handled", other.op()))),
        }
    }
    Ok(())
}

fn gate_for(site: &Site, zone: &str) -> String {
    let i = site.cfg.zones.iter().position(|z| z == zone).unwrap_or(0);
    site.cfg.gates[i % site.cfg.gates.len()].clone()
}

fn refresh_cache(w: &mut World, site: &mut Site, gate: &str) -> Result<(), ScenarioError> {
    let link = w.direct(&site.server.clone(), gate, true)?;
    let cache = PolicyCache {
        domain: site.domain.clone(),
        pca_roots: site.roots.clone(),
        zones: site.cfg.zones.clone(),
        issued_at: w.sim.now(),
    };
    if let Some(c) = w.send("policy-cache", &site.server.clone(), gate, &link, &[], &cache)? {
        site.caches.insert(gate.to_string(), c);
    }
    Ok(())
}

/// Access decision from the server, asked over the mobile network, or
/// from the gate's cached copy of the server's policy.
fn access(
    w: &mut World,
    site: &mut Site,
    gate: &str,
    cert: &AikCertificate,
    zone: &str,
) -> Result<AccessRights, ScenarioError> {
    let decide = |roots: &[PublicKey], zones: &[String]| {
        let chain = roots.iter().any(|r| cert.verify(r));
        let known = zones.iter().any(|z| z == zone);
        let reason = if !chain {
            "untrusted-token"
        } else if !known {
            "unknown-zone"
        } else {
            "ok"
        };
        AccessRights { allowed: chain && known, zone: zone.to_string(), reason: reason.to_string() }
    };
    if w.variant("gate-mode") == "cache" {
        let window = w.variant_u64("cache-window", 1);
        let stale = site.caches.get(gate).is_none_or(|c| w.sim.now() > c.issued_at + window);
        if stale {
            refresh_cache(w, site, gate)?;
        }
        return Ok(match site.caches.get(gate) {
            Some(c) => decide(&c.pca_roots, &c.zones),
            None => AccessRights { allowed: false, zone: zone.to_string(), reason: "no-cache".into() },
        });
    }
    let server = site.server.clone();
    let link = w.mobile(gate, &server, true)?;
    let check = AccessCheck { auth_token: cert.clone(), zone: zone.to_string() };
    let Some(check) = w.send("access-check", gate, &server, &link, &[], &check)? else {
        return Ok(AccessRights { allowed: false, zone: zone.to_string(), reason: "server-unreachable".into() });
    };
    let rights = decide(&site.roots, &site.cfg.zones);
    let rights = AccessRights { zone: check.zone, ..rights };
    Ok(w.send("access-rights", &server, gate, &link, &[], &rights)?.unwrap_or(AccessRights {
        allowed: false,
        zone: zone.to_string(),
        reason: "server-unreachable".into(),
    }))
}

fn enter(w: &mut World, site: &mut Site, device: &str, zone: &str) -> Result<(), ScenarioError> {
    let gate = gate_for(site, zone);
    let link = Link::new(Channel::short_range(), None);
    let verdict = w.attest(device, &gate, &link, "entry")?;
    let (granted, reason, features) = match &verdict {
        None => (false, "no-attestation".to_string(), None),
        Some(v) if !v.accepted() => {
            let reasons: Vec<&str> = v.verdict.reasons.iter().map(|r| r.as_str()).collect();
            (false, reasons.join(","), None)
        }
        Some(v) => {
            let rights = access(w, site, &gate, &v.certificate, zone)?;
            if !rights.allowed {
                (false, rights.reason, None)
            } else {
                let log = w.device(device)?.log.clone();
                match apply_policy(&site.cfg.policy, Some(zone), &log, &site.cfg.enforcer_component, &v.verdict) {
                    PolicyOutcome::Enforced(map) => (true, "ok".to_string(), Some(map)),
                    PolicyOutcome::Unenforced => (false, "policy-unenforced".to_string(), None),
                }
            }
        }
    };
    let result = EntryResult { zone: zone.to_string(), granted, reason: reason.clone() };
    w.send("entry-result", &gate, device, &link, &[], &result)?;
    let (Some(features), Some(v)) = (features, verdict) else {
        w.event("entry-denied", json!({ "device": device, "zone": zone, "gate": gate, "reason": reason }));
        return Ok(());
    };
    let msg = FeaturePolicyMsg { location: zone.to_string(), features };
    if let Some(m) = w.send("feature-policy", &gate, device, &link, &[], &msg)? {
        w.event("policy-applied", json!({ "device": device, "zone": zone, "features": m.features }));
    }
    site.inside.insert(device.to_string(), zone.to_string());
    w.grant("entry", &gate, device, &[&v], json!({ "zone": zone }));
    Ok(())
}

fn exit(w: &mut World, site: &mut Site, device: &str) -> Result<(), ScenarioError> {
    let Some(zone) = site.inside.remove(device) else {
        w.event("exit-ignored", json!({ "device": device }));
        return Ok(());
    };
    let gate = gate_for(site, &zone);
    let link = Link::new(Channel::short_range(), None);
    let msg = FeaturePolicyMsg { location: OUTSIDE.to_string(), features: site.cfg.policy.effective(None) };
    if let Some(m) = w.send("feature-policy", &gate, device, &link, &[], &msg)? {
        w.event("policy-applied", json!({ "device": device, "zone": null, "features": m.features }));
    }
    Ok(())
}

fn terminal_request(
    w: &mut World,
    site: &Site,
    device: &str,
    terminal: &str,
    request: &str,
    room: &str,
) -> Result<(), ScenarioError> {
    if !w.script.party(terminal).is_some_and(|p| p.plays("terminal")) {
        return Err(ScenarioError::Config(format!("{terminal} is not a terminal party")));
    }
    let short = Link::new(Channel::short_range(), None);
    let req = TerminalRequest { terminal: terminal.to_string(), request: request.to_string(), room: room.to_string() };
    let Some(req) = w.send("terminal-request", device, terminal, &short, &[], &req)? else { return Ok(()) };
    let server = site.server.clone();
    let link = w.direct(terminal, &server, true)?;
    let relay = TerminalRelay {
        terminal: req.terminal,
        request: req.request,
        room: req.room,
        employee: format!("employee:{device}"),
    };
    let Some(relay) = w.send("terminal-relay", terminal, &server, &link, &[], &relay)? else { return Ok(()) };
    let ok = site.inside.contains_key(device);
    w.send("terminal-result", &server, terminal, &link, &[], &TerminalResult { terminal: relay.terminal, ok })?;
    Ok(())
}

fn meeting(
    w: &mut World,
    site: &Site,
    room: &str,
    until: &str,
    attendees: &[String],
    title: &str,
) -> Result<(), ScenarioError> {
    let enforcer = w.id_for("enforcer")?;
    let external = w.id_for("external-provider")?;
    let server = site.server.clone();
    let inner = w.direct(&server, &enforcer, true)?;
    let req = OutboundRequest {
        room: room.to_string(),
        action: "book".to_string(),
        until: until.to_string(),
        attendees: attendees.to_vec(),
        meeting_title: title.to_string(),
    };
    let Some(req) = w.send("outbound-request", &server, &enforcer, &inner, &[], &req)? else { return Ok(()) };
    let allowed = |f: &str| site.cfg.allowed_outbound.iter().any(|a| a == f);
    let out = FacilityRequest {
        room: req.room.clone(),
        action: req.action.clone(),
        until: req.until.clone(),
        attendees: allowed("attendees").then(|| req.attendees.clone()),
        meeting_title: allowed("meeting_title").then(|| req.meeting_title.clone()),
    };
    let dropped: Vec<&str> = ["attendees", "meeting_title"].into_iter().filter(|f| !allowed(f)).collect();
    w.event("enforcer-filter", json!({ "room": room, "dropped": dropped }));
    let outer = w.direct(&enforcer, &external, true)?;
    let Some(out) = w.send("facility-request", &enforcer, &external, &outer, &[], &out)? else { return Ok(()) };
    let ack = FacilityAck { room: out.room, ok: true };
    let Some(ack) = w.send("facility-ack", &external, &enforcer, &outer, &[], &ack)? else { return Ok(()) };
    w.send("facility-ack", &enforcer, &server, &inner, &[], &ack)?;
    Ok(())
}
