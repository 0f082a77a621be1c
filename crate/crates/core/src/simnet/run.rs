use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::scenario::{ParseError, Scenario};
use super::{SimConfig, SimError, Simulation};
use crate::contract::{ContractBook, ModificationKind, RequesterState};
use crate::ledger::{chain_digest, verify_chain, Chain, Digest, NodeId, Tick};

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: [(&str, &str); 5] = [
    ("share", include_str!("../../scenarios/share.scn")),
    ("reuse_monitor", include_str!("../../scenarios/reuse_monitor.scn")),
    ("gdpr", include_str!("../../scenarios/gdpr.scn")),
    ("share_reuse_revoke", include_str!("../../scenarios/share_reuse_revoke.scn")),
    ("erasure_roundtrip", include_str!("../../scenarios/erasure_roundtrip.scn")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    /// Not chained as a source: the message already ends with the cause.
    #[error("step {index} (line {line}) failed: {error}")]
    Step { index: usize, line: usize, error: SimError },
    #[error(transparent)]
    Setup(SimError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutput {
    pub index: usize,
    pub line: usize,
    pub tick: Tick,
    pub actor: NodeId,
    pub verb: &'static str,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioResult {
    pub digest: Digest,
    pub final_tick: Tick,
    pub outputs: Vec<StepOutput>,
    pub invariants: Vec<InvariantCheck>,
}

impl ScenarioResult {
    pub fn all_ok(&self) -> bool {
        self.invariants.iter().all(|c| c.ok)
    }

    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for o in &self.outputs {
            writeln!(out, "--- step {} t={} {} {}", o.index, o.tick, o.actor, o.verb).expect("write to string");
            if !o.text.is_empty() {
                writeln!(out, "{}", o.text).expect("write to string");
            }
        }
        writeln!(out, "--- end t={} chain {}", self.final_tick, self.digest).expect("write to string");
        for c in &self.invariants {
            writeln!(out, "{} {}{}", if c.ok { "ok  " } else { "FAIL" }, c.name, if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) })
                .expect("write to string");
        }
        out
    }
}

/// Parses, validates and runs `text`, then seals what is pending and runs
/// the invariant suite.
pub fn run_scenario_text(text: &str, config: SimConfig) -> Result<(Simulation, ScenarioResult), ScenarioError> {
    let scenario = Scenario::parse(text)?;
    scenario.validate(&config.topology)?;
    let mut sim = Simulation::new(config).map_err(ScenarioError::Setup)?;
    let mut outputs = Vec::with_capacity(scenario.steps.len());
    for (i, step) in scenario.steps.iter().enumerate() {
        let text = sim.execute(step).map_err(|error| ScenarioError::Step { index: i + 1, line: step.line, error })?;
        outputs.push(StepOutput {
            index: i + 1,
            line: step.line,
            tick: sim.clock(),
            actor: step.actor.clone(),
            verb: step.command.verb(),
            text,
        });
    }
    sim.settle().map_err(ScenarioError::Setup)?;
    let result = ScenarioResult {
        digest: chain_digest(sim.platform().ledger().chain()),
        final_tick: sim.clock(),
        outputs,
        invariants: check_invariants(&sim),
    };
    Ok((sim, result))
}

/// Runs a bundled scenario by name, or a file; relative paths inside a
/// file resolve against its directory.
pub fn run_scenario(name_or_path: &str, mut config: SimConfig) -> Result<(Simulation, ScenarioResult), ScenarioError> {
    if let Some(text) = bundled(name_or_path) {
        return run_scenario_text(text, config);
    }
    let path = Path::new(name_or_path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Setup(SimError::Io(format!("{}: {e}", path.display()))))?;
    if config.base_dir.is_none() {
        config.base_dir = path.parent().map(Path::to_path_buf);
    }
    run_scenario_text(&text, config)
}

/// One line per committed transaction: where, when, who and what.
pub fn golden_trace(chain: &Chain) -> String {
    let mut out = String::new();
    for b in &chain.blocks {
        for tx in &b.transactions {
            writeln!(out, "block={} tick={} sender={} fn={}", b.index, b.timestamp, tx.sender, tx.function).expect("write to string");
        }
    }
    out
}

/// Contract outcomes with every opaque id left out: equal across seeds.
pub fn contract_outcomes(sim: &Simulation) -> String {
    let mut out = String::new();
    for e in sim.registry().entries() {
        let Ok(c) = sim.platform().contracts().get(&e.contract_address) else { continue };
        writeln!(out, "{} license={} period={} provider={}", e.dataset_id, c.license_code, c.period, c.provider).expect("write to string");
        for r in c.requesters.values() {
            let reports: Vec<String> = r.reports.iter().map(|p| format!("{}:{}", p.epoch, if p.compliant { "ok" } else { "violation" })).collect();
            let confs: Vec<String> = r.confirmations.iter().map(|c| format!("{}@{}", c.op, c.at)).collect();
            writeln!(out, "  {} {} reports=[{}] confirmations=[{}]", r.requester, r.state, reports.join(","), confs.join(","))
                .expect("write to string");
        }
        let pconfs: Vec<String> = c.provider_confirmations.iter().map(|c| format!("{}@{}", c.op, c.at)).collect();
        writeln!(out, "  provider confirmations=[{}]", pconfs.join(",")).expect("write to string");
    }
    out
}

fn check(name: &'static str, problems: Vec<String>) -> InvariantCheck {
    InvariantCheck { name, ok: problems.is_empty(), detail: problems.join("; ") }
}

/// The end-of-run suite. Expects pending transactions to be sealed.
pub fn check_invariants(sim: &Simulation) -> Vec<InvariantCheck> {
    let ledger = sim.platform().ledger();
    let chain = ledger.chain();
    let contracts = sim.platform().contracts();

    let mut problems = Vec::new();
    let report = verify_chain(chain);
    if !report.ok {
        problems.push(report.to_string());
    }
    let forged = ledger.forged_transactions();
    if !forged.is_empty() {
        problems.push(format!("{} transaction(s) fail signature checks", forged.len()));
    }
    let chain_ok = check("chain-verifies", problems);

    let mut problems: Vec<String> =
        sim.full_node_faults().iter().map(|(t, n)| format!("{n} diverged at t={t}")).collect();
    for id in sim.node_ids() {
        if let Some(copy) = sim.full_node_copy(&id) {
            if copy.blocks() != chain.blocks.as_slice() {
                problems.push(format!("{id} holds {} of {} blocks", copy.blocks().len(), chain.blocks.len()));
            }
        }
    }
    let full_node = check("full-node-copy", problems);

    let replay = match ContractBook::replay(chain) {
        Ok(book) if chain.pending.is_empty() && &book == contracts => check("replay-equals-state", vec![]),
        Ok(_) if !chain.pending.is_empty() => check("replay-equals-state", vec!["unsealed transactions".into()]),
        Ok(book) => {
            let diff: Vec<String> = contracts
                .iter()
                .filter(|c| book.get(&c.address).ok() != Some(*c))
                .map(|c| format!("{} differs", c.address))
                .collect();
            check("replay-equals-state", if diff.is_empty() { vec!["contract sets differ".into()] } else { diff })
        }
        Err(e) => check("replay-equals-state", vec![e.to_string()]),
    };

    let mut problems = Vec::new();
    for c in contracts.iter() {
        for r in c.requesters.values() {
            let epochs: Vec<u32> = r.reports.iter().map(|p| p.epoch).collect();
            let expected: Vec<u32> = (1..=epochs.len() as u32).collect();
            if epochs != expected {
                problems.push(format!("{} on {}: report epochs {epochs:?}", r.requester, c.address));
            }
            let violations = r.reports.iter().filter(|p| !p.compliant).count();
            let consistent = match r.state {
                RequesterState::Active(e) => e as usize == epochs.len() + 1 && violations == 0,
                RequesterState::Revoked => violations == 1 && r.reports.last().is_some_and(|p| !p.compliant),
                RequesterState::Agreed => epochs.is_empty(),
            };
            if !consistent {
                problems.push(format!("{} on {}: state {} after {} report(s)", r.requester, c.address, r.state, epochs.len()));
            }
            if let (RequesterState::Active(e), Some(t)) = (r.state, &r.token) {
                if t.epoch > e {
                    problems.push(format!("{} holds a token for future epoch {}", r.requester, t.epoch));
                }
            }
        }
    }
    let epochs = check("epoch-monotonic", problems);

    let mut problems = Vec::new();
    for c in contracts.iter() {
        for r in c.requesters.values() {
            for p in &r.reports {
                match sim.replication().retrieve_bytes(&p.log_ref) {
                    Ok(bytes) if Digest::of(&bytes) == p.log_hash => {}
                    Ok(_) => problems.push(format!("{} hashes differently", p.log_ref)),
                    Err(e) => problems.push(format!("{}: {e}", p.log_ref)),
                }
            }
        }
    }
    let logs = check("log-hash-binding", problems);

    let mut problems = Vec::new();
    for proof in sim.proofs().iter().filter(|p| p.op == ModificationKind::Erase) {
        for s in &proof.sections {
            if sim.repository().copy(&s.contract).is_some_and(|d| d.contains(&s.anon_id)) {
                problems.push(format!("{} still in provider copy of {}", s.anon_id, s.dataset_id));
            }
            for h in sim.handles().filter(|h| h.contract() == &s.contract) {
                if h.stored_copy().contains(&s.anon_id) {
                    problems.push(format!("{} still held by {}", s.anon_id, h.requester()));
                }
            }
            for tx in s.requester_confirmations.values().chain(std::iter::once(&s.provider_confirmation)) {
                if ledger.get_transaction(tx).is_err() {
                    problems.push(format!("confirmation {tx} not on chain"));
                }
            }
        }
    }
    let erasure = check("erasure-scan", problems);

    vec![chain_ok, full_node, replay, epochs, logs, erasure]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::FN_REPORT;

    #[test]
    fn bundled_scenarios_pass_their_invariants() {
        for (name, _) in BUNDLED {
            let (_, r) = run_scenario(name, SimConfig::seeded(1)).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(r.all_ok(), "{name}\n{}", r.transcript());
        }
    }

    #[test]
    fn share_reuse_revoke_ends_revoked() {
        let (sim, _) = run_scenario("share_reuse_revoke", SimConfig::seeded(5)).unwrap();
        let outcomes = contract_outcomes(&sim);
        assert!(outcomes.contains("alice revoked reports=[1:violation]"), "{outcomes}");
        let chain = sim.platform().ledger().chain();
        assert!(chain.committed().any(|t| t.function == FN_REPORT && t.field("compliant") == Some("false")));
    }

    #[test]
    fn erasure_roundtrip_proves_two_requesters() {
        let (sim, r) = run_scenario("erasure_roundtrip", SimConfig::seeded(5)).unwrap();
        let erase = sim.proofs().iter().find(|p| p.op == ModificationKind::Erase).unwrap();
        assert_eq!(erase.sections[0].requester_confirmations.len(), 2);
        for tx in erase.tx_ids() {
            assert!(sim.platform().ledger().get_transaction(tx).is_ok());
        }
        assert!(r.invariants.iter().any(|c| c.name == "erasure-scan" && c.ok));
    }

    #[test]
    fn errors_carry_positions() {
        let err = run_scenario_text("0 provider publish license=63\n\n0 provider bogus\n", SimConfig::default()).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(ParseError { line: 3, .. })));
        let err = run_scenario_text("0 mallory query\n", SimConfig::default()).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(ParseError { line: 1, .. })));
        let err = run_scenario_text("0 provider publish license=63\n1 alice agree ds-1 license=63\n", SimConfig::default()).unwrap_err();
        assert!(matches!(err, ScenarioError::Step { index: 2, line: 2, error: SimError::NoGrant { .. } }));
    }
}
