//! Command-line front end. `run` drives a catalog scenario and writes the
//! transcript plus a JSON report, `verify` re-checks a transcript file and
//! `list` prints the catalog.
//!
//! Exit codes: 0 when every check holds, 1 on a check failure, 2 on a
//! configuration or parse error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::scenarios::{self, checks, Report, ScenarioError, Script};
use crate::sim::Transcript;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "trustsim", version, about = "Trusted-mobile protocol simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a catalog scenario; writes <out> and <out stem>.report.json.
    Run(RunConfig),
    /// Audit, replay and re-check a transcript file.
    Verify {
        path: PathBuf,
        /// TOML file of expectations to check in addition.
        #[arg(long)]
        expect: Option<PathBuf>,
    },
    /// List catalog scenarios with their variants and attacks.
    List {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunConfig {
    pub scenario: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Transcript path. Defaults to <name>-<seed>[-<attack>].jsonl in
    /// $TRUSTSIM_OUT_DIR, or the current directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Attack to inject; at most one per run.
    #[arg(long = "attack")]
    pub attacks: Vec<String>,
    /// Variant override as KEY=VALUE; repeatable.
    #[arg(long = "variant", value_parser = parse_kv)]
    pub variants: Vec<(String, String)>,
    /// Shorthand for --variant encryption=<on|off>.
    #[arg(long)]
    pub encryption: Option<String>,
    /// Shorthand for --variant mode=<bound|unbound>.
    #[arg(long)]
    pub registry: Option<String>,
    /// Shorthand for --variant billing=<centralised|decentralised>.
    #[arg(long)]
    pub billing: Option<String>,
    /// Shorthand for --variant batch-size=<n>.
    #[arg(long)]
    pub batch_size: Option<u64>,
    /// Shorthand for --variant validity=<ticks>.
    #[arg(long)]
    pub validity: Option<u64>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

impl RunConfig {
    pub fn overrides(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self.variants.iter().cloned().collect();
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.insert(k.to_string(), v);
            }
        };
        set("encryption", self.encryption.clone());
        set("mode", self.registry.clone());
        set("billing", self.billing.clone());
        set("batch-size", self.batch_size.map(|n| n.to_string()));
        set("validity", self.validity.map(|n| n.to_string()));
        out
    }

    fn default_out(&self) -> PathBuf {
        let dir = std::env::var_os("TRUSTSIM_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        let mut name = format!("{}-{}", self.scenario, self.seed);
        for a in &self.attacks {
            name.push('-');
            name.push_str(a);
        }
        dir.join(format!("{name}.jsonl"))
    }
}

/// Path of the report written next to a transcript.
pub fn report_path(transcript: &Path) -> PathBuf {
    let stem = transcript.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    transcript.with_file_name(format!("{stem}.report.json"))
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match cli.command {
        Command::Run(cfg) => cmd_run(&cfg, out, err),
        Command::Verify { path, expect } => cmd_verify(&path, expect.as_deref(), out, err),
        Command::List { json } => cmd_list(json, out, err),
    }
}

fn print_report(r: &Report, out: &mut dyn Write) {
    for c in &r.checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        let _ = if c.detail.is_empty() || c.passed {
            writeln!(out, "{mark} {}", c.name)
        } else {
            writeln!(out, "{mark} {}: {}", c.name, c.detail)
        };
    }
    let _ = writeln!(out, "{}: {}", r.scenario, if r.passed { "all checks hold" } else { "check failures" });
}

pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = scenarios::run_scenario(&cfg.scenario, cfg.seed, &cfg.attacks, &cfg.overrides());
    let run = match result {
        Ok(r) => r,
        Err(e @ (ScenarioError::Config(_) | ScenarioError::UnknownScenario(_))) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_MISMATCH;
        }
    };
    let path = cfg.out.clone().unwrap_or_else(|| cfg.default_out());
    let report = serde_json::to_string_pretty(&run.report).expect("report serializes") + "\n";
    let written =
        std::fs::write(&path, run.transcript.to_jsonl()).and_then(|_| std::fs::write(report_path(&path), report));
    if let Err(e) = written {
        let _ = writeln!(err, "error: cannot write {}: {e}", path.display());
        return EXIT_CONFIG;
    }
    print_report(&run.report, out);
    let _ = writeln!(out, "transcript: {}", path.display());
    if run.report.passed {
        EXIT_OK
    } else {
        EXIT_MISMATCH
    }
}

pub fn cmd_verify(path: &Path, expect: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: cannot read {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let expect = match expect.map(std::fs::read_to_string).transpose() {
        Ok(Some(t)) => match toml::from_str::<scenarios::script::Expect>(&t) {
            Ok(e) => Some(e),
            Err(e) => {
                let _ = writeln!(err, "error: bad expectations: {e}");
                return EXIT_CONFIG;
            }
        },
        Ok(None) => None,
        Err(e) => {
            let _ = writeln!(err, "error: cannot read expectations: {e}");
            return EXIT_CONFIG;
        }
    };
    let mut report = match scenarios::verify_transcript(&text) {
        Ok(r) => r,
        Err(scenarios::VerifyError::Parse(e)) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
        Err(e) => {
            // The file parsed but cannot be replayed: its header names an
            // unknown scenario, attack or variant.
            let _ = writeln!(err, "error: {e}");
            return EXIT_MISMATCH;
        }
    };
    if let Some(e) = expect {
        let t = Transcript::parse(&text).expect("parsed above");
        report.push(checks::expectations("expect-file", &e, &t));
    }
    print_report(&report, out);
    if report.passed {
        EXIT_OK
    } else {
        EXIT_MISMATCH
    }
}

#[derive(Serialize)]
struct ListEntry {
    name: String,
    kind: &'static str,
    description: String,
    variants: BTreeMap<String, String>,
    variant_values: BTreeMap<String, String>,
    attacks: Vec<String>,
}

impl ListEntry {
    fn new(s: &Script) -> Self {
        ListEntry {
            name: s.name.clone(),
            kind: s.kind.as_str(),
            description: s.description.clone(),
            variants: s.resolve_variants(&BTreeMap::new()).unwrap_or_default(),
            variant_values: s.variant_help(),
            attacks: s.attacks.clone(),
        }
    }
}

pub fn cmd_list(json: bool, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut entries = Vec::new();
    for name in scenarios::names() {
        match scenarios::load(name) {
            Ok(s) => entries.push(ListEntry::new(&s)),
            Err(e) => {
                let _ = writeln!(err, "error: catalog entry {name}: {e}");
                return EXIT_CONFIG;
            }
        }
    }
    if json {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&entries).expect("catalog serializes"));
        return EXIT_OK;
    }
    for e in &entries {
        let _ = writeln!(out, "{} ({})", e.name, e.kind);
        let _ = writeln!(out, "  {}", e.description);
        let vars: Vec<String> = e
            .variant_values
            .iter()
            .map(|(k, t)| format!("{k}={} [{t}]", e.variants.get(k).map_or("-", String::as_str)))
            .collect();
        let _ = writeln!(out, "  variants: {}", vars.join(", "));
        let _ = writeln!(
            out,
            "  attacks: {}",
            if e.attacks.is_empty() { "none".to_string() } else { e.attacks.join(", ") }
        );
    }
    EXIT_OK
}
