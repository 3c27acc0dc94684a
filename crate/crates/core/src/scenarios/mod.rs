//! Scripted scenarios: catalog, drivers, property checks and the
//! run/verify entry points.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::anchor::AnchorError;
use crate::boot::BootError;
use crate::sim::{SimError, Transcript};

mod aik;
pub mod checks;
mod clone;
mod facility;
mod pos;
mod prepaid;
pub mod script;
pub mod world;

pub use checks::{Check, Report};
pub use script::{ScenarioKind, Script, GENERIC_ATTACKS};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Config(String),
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("trust anchor: {0}")]
    Anchor(#[from] AnchorError),
    #[error("boot: {0}")]
    Boot(#[from] BootError),
    #[error("protocol: {0}")]
    Protocol(String),
}

/// Built-in scripts, by name.
pub const CATALOG: &[(&str, &str)] = &[
    ("one-time-aik-auth", include_str!("../../scenarios/one-time-aik-auth.toml")),
    ("clone-attack-bound", include_str!("../../scenarios/clone-attack-bound.toml")),
    ("clone-attack-unbound", include_str!("../../scenarios/clone-attack-unbound.toml")),
    ("prepaid-happy", include_str!("../../scenarios/prepaid-happy.toml")),
    ("prepaid-tamper", include_str!("../../scenarios/prepaid-tamper.toml")),
    ("prepaid-zero", include_str!("../../scenarios/prepaid-zero.toml")),
    ("pos-fig4", include_str!("../../scenarios/pos-fig4.toml")),
    ("pos-sep-duties", include_str!("../../scenarios/pos-sep-duties.toml")),
    ("pos-decentralised", include_str!("../../scenarios/pos-decentralised.toml")),
    ("pos-mno-merged", include_str!("../../scenarios/pos-mno-merged.toml")),
    ("facility-entry", include_str!("../../scenarios/facility-entry.toml")),
    ("facility-midnight", include_str!("../../scenarios/facility-midnight.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    CATALOG.iter().map(|(n, _)| *n)
}

pub fn load(name: &str) -> Result<Script, ScenarioError> {
    let (_, text) =
        CATALOG.iter().find(|(n, _)| *n == name).ok_or_else(|| ScenarioError::UnknownScenario(name.to_string()))?;
    let script = Script::from_toml(text)?;
    if script.name != name {
        return Err(ScenarioError::Config(format!("catalog entry {name} declares name {}", script.name)));
    }
    Ok(script)
}

/// Drive one run and return its transcript. Variants must be resolved.
pub fn execute(
    script: &Script,
    seed: u64,
    attack: Option<&str>,
    variants: &BTreeMap<String, String>,
) -> Result<Transcript, ScenarioError> {
    let mut w = world::World::new(script, seed, attack.map(str::to_string), variants.clone())?;
    match script.kind {
        ScenarioKind::OneTimeAik => aik::run(&mut w)?,
        ScenarioKind::Clone => clone::run(&mut w)?,
        ScenarioKind::Prepaid => prepaid::run(&mut w)?,
        ScenarioKind::PosFig4 => pos::run_fig4(&mut w)?,
        ScenarioKind::PosBilling => pos::run_billing(&mut w)?,
        ScenarioKind::Facility => facility::run(&mut w)?,
    }
    Ok(w.finish())
}

#[derive(Debug)]
pub struct RunOutput {
    pub transcript: Transcript,
    pub report: Report,
}

/// Run a script and evaluate it. Generic attacks are judged against an
/// attack-free run with the same seed and variants.
pub fn run_script(
    script: &Script,
    seed: u64,
    attacks: &[String],
    overrides: &BTreeMap<String, String>,
) -> Result<RunOutput, ScenarioError> {
    script.check_attacks(attacks)?;
    let variants = script.resolve_variants(overrides)?;
    let attack = attacks.first().map(String::as_str);
    let baseline = match attack {
        Some(a) if GENERIC_ATTACKS.contains(&a) => Some(execute(script, seed, None, &variants)?),
        _ => None,
    };
    let transcript = execute(script, seed, attack, &variants)?;
    let report = checks::evaluate(script, &transcript, baseline.as_ref());
    Ok(RunOutput { transcript, report })
}

pub fn run_scenario(
    name: &str,
    seed: u64,
    attacks: &[String],
    overrides: &BTreeMap<String, String>,
) -> Result<RunOutput, ScenarioError> {
    run_script(&load(name)?, seed, attacks, overrides)
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("transcript: {0}")]
    Parse(#[from] crate::sim::transcript::TranscriptError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Check a transcript: audit, replay for byte equality, then evaluate the
/// scenario properties. The report lists every check.
pub fn verify_transcript(text: &str) -> Result<Report, VerifyError> {
    let transcript = Transcript::parse(text)?;
    let h = &transcript.header;
    let script = load(&h.scenario)?;
    script.check_attacks(&h.attacks)?;
    let variants = script.resolve_variants(&h.variants)?;
    let attack = h.attacks.first().map(String::as_str);
    let replay = execute(&script, h.seed, attack, &variants)?;
    let baseline = match attack {
        Some(a) if GENERIC_ATTACKS.contains(&a) => Some(execute(&script, h.seed, None, &variants)?),
        _ => None,
    };
    let mut report = checks::evaluate(&script, &transcript, baseline.as_ref());
    let same = replay.to_jsonl() == text;
    report.push(Check::new(
        "replay-identical",
        same,
        if same { String::new() } else { first_difference(&replay.to_jsonl(), text) },
    ));
    Ok(report)
}

fn first_difference(a: &str, b: &str) -> String {
    let n = a.lines().zip(b.lines()).take_while(|(x, y)| x == y).count();
    format!("first differing line {}", n + 1)
}
