use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use luce::ledger::{chain_digest, export_chain, import_chain, verify_chain, ContractAddress, NodeId};
use luce::license::{ActionKind, DataAction, LicenseCode, Verdict, ViolationReason};
use luce::monitor::{AnonId, DataRecord, Dataset, EventLog};
use luce::replication::{Replication, ReplicationError};
use luce::simnet::{run_scenario, SimConfig, BUNDLED};

fn action() -> impl Strategy<Value = DataAction> {
    (0usize..6, any::<bool>(), any::<bool>(), any::<u8>()).prop_map(|(k, n, a, d)| {
        let kind = ActionKind::ALL[k];
        DataAction::new(kind, n, a, (kind == ActionKind::ShareDerivative).then_some(LicenseCode(d))).unwrap()
    })
}

fn verdict() -> impl Strategy<Value = Option<Verdict>> {
    prop_oneof![
        Just(None),
        Just(Some(Verdict::Compliant)),
        Just(Some(Verdict::Violation(ViolationReason::ShareAlike))),
        Just(Some(Verdict::Violation(ViolationReason::MissingNotice))),
        Just(Some(Verdict::Violation(ViolationReason::CommercialUseProhibited))),
    ]
}

fn log_from(entries: &[(u64, DataAction, Option<Verdict>)]) -> EventLog {
    let mut log = EventLog::new(NodeId::from("alice"), ContractAddress("0xabc".into()), 3);
    let mut tick = 0;
    for (dt, a, v) in entries {
        tick += dt;
        log.append(tick, *a, *v).unwrap();
    }
    log
}

proptest! {
    #[test]
    fn event_log_bytes_round_trip(entries in prop::collection::vec((0u64..5, action(), verdict()), 0..40)) {
        let log = log_from(&entries);
        let bytes = log.to_bytes();
        let back = EventLog::parse(&bytes, log.requester.clone(), log.dataset.clone(), log.epoch).unwrap();
        prop_assert_eq!(&back, &log);
        prop_assert_eq!(back.hash(), log.hash());
    }

    #[test]
    fn event_log_hash_sees_every_entry(entries in prop::collection::vec((0u64..5, action(), verdict()), 1..20)) {
        let log = log_from(&entries);
        let shorter = log_from(&entries[..entries.len() - 1]);
        prop_assert_ne!(log.hash(), shorter.hash());
    }

    #[test]
    fn dataset_csv_round_trip(rows in prop::collection::btree_map("[a-z0-9-]{1,8}", ("[ -~]{0,10}", "[ -~]{0,10}"), 0..20)) {
        let mut ds = Dataset::new(vec!["age".into(), "note".into()]);
        for (id, (a, b)) in &rows {
            ds.insert(DataRecord { anon_id: AnonId(id.clone()), attributes: vec![a.clone(), b.clone()] }).unwrap();
        }
        let back = Dataset::from_csv(&ds.to_csv()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn placement_excludes_producer_and_is_distinct(k in 1usize..6, extra in 0usize..6, seed: u64) {
        let mut candidates: Vec<NodeId> = (0..k + extra).map(|i| NodeId(format!("n{i}"))).collect();
        candidates.push(NodeId::from("alice"));
        let mut repl = Replication::new(k);
        let log = log_from(&[]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = repl.replicate_log(&log, &candidates, 0, &mut rng).unwrap();
        let holders = &repl.entry(&r.ref_id).unwrap().holders;
        prop_assert_eq!(holders.len(), k);
        prop_assert_eq!(holders.iter().collect::<BTreeSet<_>>().len(), k);
        prop_assert!(!holders.contains(&log.requester));
        let bytes = log.to_bytes();
        for h in holders {
            prop_assert_eq!(repl.held_copy(h, &r.ref_id), Some(bytes.as_slice()));
        }
    }
}

#[test]
fn placement_refuses_when_too_few_nodes() {
    let mut repl = Replication::new(3);
    let candidates = [NodeId::from("alice"), NodeId::from("h1"), NodeId::from("h2")];
    let err = repl.replicate_log(&log_from(&[]), &candidates, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
    assert_eq!(err, ReplicationError::InsufficientNodes { needed: 3, eligible: 2 });
}

#[test]
fn log_replicated_once_per_epoch() {
    let mut repl = Replication::new(1);
    let candidates = [NodeId::from("h1"), NodeId::from("h2")];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let log = log_from(&[]);
    repl.replicate_log(&log, &candidates, 0, &mut rng).unwrap();
    assert!(matches!(
        repl.replicate_log(&log, &candidates, 1, &mut rng),
        Err(ReplicationError::AlreadyReplicated { epoch: 3, .. })
    ));
}

#[test]
fn exported_chains_import_identically() {
    for (name, _) in BUNDLED {
        let (sim, result) = run_scenario(name, SimConfig::seeded(5)).unwrap();
        let chain = sim.platform().ledger().chain();
        let text = export_chain(chain);
        let back = import_chain(&text).unwrap();
        assert_eq!(&back, chain, "{name}");
        assert!(verify_chain(&back).ok, "{name}");
        assert_eq!(chain_digest(&back), result.digest, "{name}");
        assert_eq!(export_chain(&back), text, "{name}");
    }
}

#[test]
fn import_rejects_garbage() {
    assert!(import_chain("{not json\n").is_err());
}
