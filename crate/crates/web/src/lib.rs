//! Browser bindings for three demos: the license explorer, the scenario
//! runner and the tamper demo. Each export wraps a plain function so the
//! logic also runs (and is tested) natively.

use std::fmt::Write as _;

use luce::ledger::{verify_chain, Block};
use luce::license::{cc_name, check_action, render_deed, ActionKind, DataAction, LicenseCode};
use luce::simnet::{golden_trace, run_scenario, SimConfig, BUNDLED};
use wasm_bindgen::prelude::*;

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Deed for `code` plus the verdict for every action kind, carrying the
/// given notice/attribution flags; share-derivative uses `derivative`.
pub fn explain_license(code: &str, notice: bool, attrib: bool, derivative: &str) -> Result<String, String> {
    let code: LicenseCode = code.trim().parse().map_err(|e: luce::license::LicenseError| e.to_string())?;
    let terms = code.terms().map_err(|e| e.to_string())?;
    let deriv = if derivative.trim().is_empty() {
        code
    } else {
        derivative.trim().parse().map_err(|e: luce::license::LicenseError| format!("derivative: {e}"))?
    };
    let mut out = render_deed(code, &terms);
    out.push('\n');
    for kind in ActionKind::ALL {
        let action = DataAction::new(kind, notice, attrib, (kind == ActionKind::ShareDerivative).then_some(deriv))
            .expect("derivative given only for share-derivative");
        let note = match kind {
            ActionKind::ShareDerivative => format!(" (as {deriv}{})", cc_name(deriv).map(|n| format!(" {n}")).unwrap_or_default()),
            _ => String::new(),
        };
        writeln!(out, "{:<17} {}{note}", kind.as_str(), check_action(&action, &terms)).expect("write to string");
    }
    Ok(out)
}

#[wasm_bindgen(js_name = explainLicense)]
pub fn explain_license_js(code: &str, notice: bool, attrib: bool, derivative: &str) -> Result<String, JsError> {
    js(explain_license(code, notice, attrib, derivative))
}

/// Newline-separated names of the bundled scenarios.
#[wasm_bindgen(js_name = scenarioNames)]
pub fn scenario_names() -> String {
    BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join("\n")
}

/// Transcript, invariants and block trace of a bundled scenario.
pub fn run_bundled(name: &str, seed: u64, replicas: usize) -> Result<String, String> {
    let config = SimConfig { replicas: replicas.max(1), ..SimConfig::seeded(seed) };
    let (sim, result) = run_scenario(name, config).map_err(|e| e.to_string())?;
    Ok(format!("{}\n{}", result.transcript(), golden_trace(sim.platform().ledger().chain())))
}

#[wasm_bindgen(js_name = runScenario)]
pub fn run_bundled_js(name: &str, seed: u32, replicas: u32) -> Result<String, JsError> {
    js(run_bundled(name, seed as u64, replicas as usize))
}

/// What an attacker edits in the chosen block's first transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tamper {
    /// Change a payload value and leave the block alone.
    Edit,
    /// Change a payload value, then recompute that block's hash.
    Rehash,
    /// Rewrite every block from the edit onwards so every link is intact.
    Rewrite,
}

impl std::str::FromStr for Tamper {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "edit" => Ok(Tamper::Edit),
            "rehash" => Ok(Tamper::Rehash),
            "rewrite" => Ok(Tamper::Rewrite),
            other => Err(format!("unknown tamper `{other}` (edit|rehash|rewrite)")),
        }
    }
}

/// Runs the revocation scenario, tampers with block `block`, and reports
/// what each check (hash links, signatures, the authority's copy) sees.
pub fn tamper_demo(seed: u64, block: usize, how: Tamper) -> Result<String, String> {
    let (mut sim, _) = run_scenario("share_reuse_revoke", SimConfig::seeded(seed)).map_err(|e| e.to_string())?;
    let authority = sim.full_node_copy(&"authority".into()).ok_or("no authority copy")?.as_chain();
    let chain = sim.platform_mut().ledger_mut().chain_mut_for_tests();
    let last = chain.blocks.len() - 1;
    if block == 0 || block > last {
        return Err(format!("pick a block between 1 and {last}"));
    }
    let mut out = String::new();
    let tx = &mut chain.blocks[block].transactions[0];
    let (key, value) = tx.payload.iter_mut().next().ok_or("transaction has no payload")?;
    let forged = if value == "false" { "true".to_owned() } else { format!("{value}X") };
    writeln!(out, "block {block}, tx {} ({}): {key} = {value:?} -> {forged:?}", tx.tx_id, tx.function).expect("write to string");
    *value = forged;

    let upto = match how {
        Tamper::Edit => block,
        Tamper::Rehash => block + 1,
        Tamper::Rewrite => last + 1,
    };
    for i in block..upto {
        let prev = chain.blocks[i - 1].block_hash;
        let b = &chain.blocks[i];
        chain.blocks[i] = Block::seal(b.index, prev, b.timestamp, b.transactions.clone());
    }
    if upto > block {
        writeln!(out, "re-sealed blocks {block}..{}", upto - 1).expect("write to string");
    }
    let tampered = chain.clone();
    writeln!(out, "hash links:  {}", verify_chain(&tampered)).expect("write to string");
    let forged = sim.platform().ledger().forged_transactions();
    let sigs = if forged.is_empty() { "ok".to_owned() } else { format!("FAILED for {}", forged.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")) };
    writeln!(out, "signatures:  {sigs}").expect("write to string");
    let diverge = authority.blocks.iter().zip(&tampered.blocks).position(|(a, b)| a != b);
    match diverge {
        Some(i) => writeln!(out, "authority:   copy differs from block {i}"),
        None => writeln!(out, "authority:   copy agrees"),
    }
    .expect("write to string");
    Ok(out)
}

#[wasm_bindgen(js_name = tamperDemo)]
pub fn tamper_demo_js(seed: u32, block: u32, how: &str) -> Result<String, JsError> {
    js(how.parse().and_then(|h| tamper_demo(seed as u64, block as usize, h)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn license_table() {
        let out = explain_license("63", false, false, "").unwrap();
        assert!(out.contains("CC-BY-NC"));
        assert!(out.contains("commercial-use    violation: commercial use prohibited"), "{out}");
        assert!(out.contains("distribute        violation: notice required"), "{out}");
        let sa = explain_license("71", true, true, "7").unwrap();
        assert!(sa.contains("share-derivative  violation: share-alike"), "{sa}");
        assert!(explain_license("64", false, false, "").is_err());
        assert!(explain_license("300", false, false, "").is_err());
    }

    #[test]
    fn scenarios_run() {
        for name in scenario_names().lines() {
            let out = run_bundled(name, 1, 3).unwrap();
            assert!(!out.contains("FAIL"), "{name}\n{out}");
            assert!(out.contains("block=1 tick=1 sender=provider fn=publishedDataset"));
        }
    }

    #[test]
    fn every_tamper_is_caught() {
        let edit = tamper_demo(0, 1, Tamper::Edit).unwrap();
        assert!(edit.contains("hash links:  FAILED at block 1"), "{edit}");
        let rehash = tamper_demo(0, 1, Tamper::Rehash).unwrap();
        assert!(rehash.contains("hash links:  FAILED at block 2"), "{rehash}");
        // a full rewrite passes the link check; signatures and the replica do not
        let rewrite = tamper_demo(0, 1, Tamper::Rewrite).unwrap();
        assert!(rewrite.contains("hash links:  ok"), "{rewrite}");
        assert!(rewrite.contains("signatures:  FAILED"), "{rewrite}");
        assert!(rewrite.contains("copy differs from block 1"), "{rewrite}");
        assert!(tamper_demo(0, 0, Tamper::Edit).is_err());
    }
}
