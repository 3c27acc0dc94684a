//! Measured boot: each stage is hashed, extended into a PCR and logged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{AnchorError, TrustAnchor};
use crate::crypto::{self, hash160, Digest160};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BootError {
    #[error("boot chain is empty")]
    EmptyChain,
    #[error("stage {got} of {name} does not follow stage {prev}")]
    StageOrder { name: String, prev: u32, got: u32 },
    #[error("first component must be stage 0")]
    FirstStageNotZero,
    #[error("duplicate component {0}")]
    DuplicateComponent(String),
    #[error("unknown component {0}")]
    UnknownComponent(String),
    #[error("log index {index} out of range for {len} entries")]
    LogIndexOutOfRange { index: usize, len: usize },
    #[error("trust anchor is not at reset")]
    AnchorNotReset,
    #[error("pcr assignment does not cover stage {0}")]
    MissingAssignment(usize),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootComponent {
    pub name: String,
    #[serde(with = "crypto::hex_bytes")]
    pub payload: Vec<u8>,
    pub stage: u32,
}

impl BootComponent {
    pub fn new(name: impl Into<String>, payload: impl Into<Vec<u8>>, stage: u32) -> Self {
        BootComponent { name: name.into(), payload: payload.into(), stage }
    }

    pub fn measurement(&self) -> Digest160 {
        hash160(&self.payload)
    }
}

/// Ordered boot chain. Construction validates stage ordering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BootComponent>", into = "Vec<BootComponent>")]
pub struct BootChain(Vec<BootComponent>);

impl TryFrom<Vec<BootComponent>> for BootChain {
    type Error = BootError;

    fn try_from(components: Vec<BootComponent>) -> Result<Self, BootError> {
        let first = components.first().ok_or(BootError::EmptyChain)?;
        if first.stage != 0 {
            return Err(BootError::FirstStageNotZero);
        }
        for pair in components.windows(2) {
            if pair[1].stage <= pair[0].stage {
                return Err(BootError::StageOrder {
                    name: pair[1].name.clone(),
                    prev: pair[0].stage,
                    got: pair[1].stage,
                });
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &components {
            if !seen.insert(c.name.as_str()) {
                return Err(BootError::DuplicateComponent(c.name.clone()));
            }
        }
        Ok(BootChain(components))
    }
}

impl From<BootChain> for Vec<BootComponent> {
    fn from(chain: BootChain) -> Self {
        chain.0
    }
}

impl BootChain {
    pub fn new(components: Vec<BootComponent>) -> Result<Self, BootError> {
        components.try_into()
    }

    /// `crtm, bios, os` followed by the given application stages. Payloads
    /// are stand-ins derived from the component name and `version`.
    pub fn standard(apps: &[&str], version: &str) -> Self {
        let names = ["crtm", "bios", "os"].into_iter().chain(apps.iter().copied());
        let components = names
            .enumerate()
            .map(|(i, n)| BootComponent::new(n, format!("{n}:{version}").into_bytes(), i as u32))
            .collect();
        BootChain(components)
    }

    pub fn components(&self) -> &[BootComponent] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&BootComponent> {
        self.0.iter().find(|c| c.name == name)
    }
}

/// Which PCR each stage extends.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcrAssignment {
    /// Every stage extends the same register.
    Single(usize),
    /// Stage `i` extends `registers[i]`.
    PerStage(Vec<usize>),
}

impl Default for PcrAssignment {
    fn default() -> Self {
        PcrAssignment::Single(0)
    }
}

impl PcrAssignment {
    fn register_for(&self, position: usize) -> Result<usize, BootError> {
        match self {
            PcrAssignment::Single(i) => Ok(*i),
            PcrAssignment::PerStage(v) => v.get(position).copied().ok_or(BootError::MissingAssignment(position)),
        }
    }

    /// Distinct registers used, ascending.
    pub fn registers(&self, chain_len: usize) -> Vec<usize> {
        let mut regs: Vec<usize> = (0..chain_len).filter_map(|p| self.register_for(p).ok()).collect();
        regs.sort_unstable();
        regs.dedup();
        regs
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub component: String,
    pub measurement: Digest160,
    pub pcr: usize,
}

/// Append-only record of measurements, in boot order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementLog {
    pub entries: Vec<LogEntry>,
}

impl MeasurementLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Verifier-side expected measurement per component name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDb(pub BTreeMap<String, Digest160>);

impl ReferenceDb {
    pub fn from_chain(chain: &BootChain) -> Self {
        ReferenceDb(chain.components().iter().map(|c| (c.name.clone(), c.measurement())).collect())
    }

    pub fn merge(&mut self, other: &ReferenceDb) {
        self.0.extend(other.0.iter().map(|(k, v)| (k.clone(), *v)));
    }

    pub fn expected(&self, component: &str) -> Option<&Digest160> {
        self.0.get(component)
    }
}

/// Measure every component in order into PCR 0.
pub fn boot(anchor: &mut TrustAnchor, chain: &BootChain) -> Result<MeasurementLog, BootError> {
    boot_with(anchor, chain, &PcrAssignment::default())
}

pub fn boot_with(
    anchor: &mut TrustAnchor,
    chain: &BootChain,
    assignment: &PcrAssignment,
) -> Result<MeasurementLog, BootError> {
    if chain.is_empty() {
        return Err(BootError::EmptyChain);
    }
    if !anchor.pcrs().is_reset() {
        return Err(BootError::AnchorNotReset);
    }
    let mut log = MeasurementLog::default();
    for (pos, component) in chain.components().iter().enumerate() {
        let pcr = assignment.register_for(pos)?;
        let measurement = component.measurement();
        anchor.extend(pcr, &measurement)?;
        log.entries.push(LogEntry { component: component.name.clone(), measurement, pcr });
    }
    Ok(log)
}

/// Replace a component's payload.
pub fn tamper(chain: &BootChain, component_name: &str, new_payload: &[u8]) -> Result<BootChain, BootError> {
    let mut components = chain.0.clone();
    let c = components
        .iter_mut()
        .find(|c| c.name == component_name)
        .ok_or_else(|| BootError::UnknownComponent(component_name.to_string()))?;
    c.payload = new_payload.to_vec();
    Ok(BootChain(components))
}

/// Overwrite one log entry's digest; the PCR is unaffected.
pub fn forge_log(
    log: &MeasurementLog,
    entry_index: usize,
    fake_digest: Digest160,
) -> Result<MeasurementLog, BootError> {
    let mut forged = log.clone();
    let len = forged.entries.len();
    let entry = forged.entries.get_mut(entry_index).ok_or(BootError::LogIndexOutOfRange { index: entry_index, len })?;
    entry.measurement = fake_digest;
    Ok(forged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::Manufacturer;
    use crate::crypto::Rng;

    fn fresh_anchor() -> TrustAnchor {
        let mut rng = Rng::from_seed(11);
        Manufacturer::new("acme", &mut rng).manufacture("phone", &mut rng)
    }

    #[test]
    fn chain_validation() {
        assert_eq!(BootChain::new(vec![]), Err(BootError::EmptyChain));
        assert_eq!(BootChain::new(vec![BootComponent::new("a", *b"x", 1)]), Err(BootError::FirstStageNotZero));
        assert!(matches!(
            BootChain::new(vec![BootComponent::new("a", *b"x", 0), BootComponent::new("b", *b"y", 0)]),
            Err(BootError::StageOrder { .. })
        ));
        assert!(matches!(
            BootChain::new(vec![BootComponent::new("a", *b"x", 0), BootComponent::new("a", *b"y", 1)]),
            Err(BootError::DuplicateComponent(_))
        ));
    }

    #[test]
    fn log_matches_chain() {
        let chain = BootChain::standard(&["vsim", "ppc"], "1");
        let mut a = fresh_anchor();
        let log = boot(&mut a, &chain).unwrap();
        assert_eq!(log.len(), chain.len());
        for (e, c) in log.entries.iter().zip(chain.components()) {
            assert_eq!(e.component, c.name);
            assert_eq!(e.measurement, c.measurement());
            assert_eq!(e.pcr, 0);
        }
    }

    #[test]
    fn boot_requires_reset_anchor() {
        let chain = BootChain::standard(&[], "1");
        let mut a = fresh_anchor();
        boot(&mut a, &chain).unwrap();
        assert_eq!(boot(&mut a, &chain), Err(BootError::AnchorNotReset));
    }

    #[test]
    fn per_stage_assignment() {
        let chain = BootChain::standard(&["app"], "1");
        let mut a = fresh_anchor();
        let assignment = PcrAssignment::PerStage(vec![0, 1, 2, 8]);
        let log = boot_with(&mut a, &chain, &assignment).unwrap();
        assert_eq!(log.entries.iter().map(|e| e.pcr).collect::<Vec<_>>(), vec![0, 1, 2, 8]);
        assert_eq!(assignment.registers(4), vec![0, 1, 2, 8]);
        let mut b = fresh_anchor();
        assert_eq!(boot_with(&mut b, &chain, &PcrAssignment::PerStage(vec![0])), Err(BootError::MissingAssignment(1)));
    }

    #[test]
    fn tamper_changes_measurement() {
        let chain = BootChain::standard(&["ppc"], "1");
        let t = tamper(&chain, "ppc", b"evil").unwrap();
        assert_ne!(t.get("ppc").unwrap().measurement(), chain.get("ppc").unwrap().measurement());
        let same = tamper(&chain, "ppc", &chain.get("ppc").unwrap().payload).unwrap();
        assert_eq!(same, chain);
        assert!(matches!(tamper(&chain, "nope", b""), Err(BootError::UnknownComponent(_))));
    }

    #[test]
    fn forge_log_bounds() {
        let chain = BootChain::standard(&[], "1");
        let mut a = fresh_anchor();
        let log = boot(&mut a, &chain).unwrap();
        assert!(matches!(forge_log(&log, 3, Digest160::ZERO), Err(BootError::LogIndexOutOfRange { index: 3, len: 3 })));
        let f = forge_log(&log, 1, Digest160::ZERO).unwrap();
        assert_eq!(f.entries[1].measurement, Digest160::ZERO);
        assert_eq!(f.entries[0], log.entries[0]);
    }
}
