//! Deterministic discrete-tick network: every node, module and message
//! queue advances on one logical clock, so a `(seed, scenario)` pair fixes
//! the chain byte for byte.
//!
//! Per tick, in order: deliver messages sent on an earlier tick (FIFO per
//! sender, senders in node-id order), retry queued GDPR modifications,
//! close due periods, seal a block if transactions are pending, and sync
//! every authority's chain copy.

mod run;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::contract::{Admission, ContractError, Platform, Renewal, UseInfo};
use crate::gdpr::{check_purpose_compatibility, DataProvider, GdprError, NetworkView};
use crate::ledger::{verify_chain, ChainReplica, ContractAddress, NodeId, Role, Tick};
use crate::license::{render_deed, Verdict};
use crate::monitor::{open_dataset, AnonId, DataRecord, Dataset, DatasetError, DatasetHandle, MonitorError, MonitorMode, Repository};
use crate::registry::{AdamProfile, DatasetId, Listing, MetaConditions, ProfileHeader, ProfilePermissions, ProfileTerms, PurposeTag, Registry, RegistryError};
use crate::replication::{Replication, ReplicationError, DEFAULT_REPLICAS};

pub use run::{
    bundled, check_invariants, contract_outcomes, golden_trace, run_scenario, run_scenario_text, InvariantCheck,
    ScenarioError, ScenarioResult, StepOutput, BUNDLED,
};
pub use scenario::{Command, InspectTarget, ParseError, PublishArgs, Scenario, Step, SYSTEM_ACTOR};

/// provider, two requesters, the authority and four replica holders.
pub fn default_topology() -> Vec<(NodeId, Role)> {
    let mut t = vec![
        (NodeId::from("provider"), Role::Provider),
        (NodeId::from("alice"), Role::Requester),
        (NodeId::from("bob"), Role::Requester),
        (NodeId::from("authority"), Role::Authority),
    ];
    t.extend((1..=4).map(|i| (NodeId(format!("holder{i}")), Role::ReplicaHolder)));
    t
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub mode: MonitorMode,
    pub replicas: usize,
    pub topology: Vec<(NodeId, Role)>,
    /// Base for relative `profile=` and `data=` paths.
    pub base_dir: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, mode: MonitorMode::Full, replicas: DEFAULT_REPLICAS, topology: default_topology(), base_dir: None }
    }
}

impl SimConfig {
    pub fn seeded(seed: u64) -> Self {
        SimConfig { seed, ..Self::default() }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownActor(NodeId),
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("{node} is not a {expected}")]
    WrongRole { node: NodeId, expected: Role },
    #[error("{requester} has not been granted access to {dataset}")]
    NoGrant { requester: NodeId, dataset: DatasetId },
    #[error("{requester} has not agreed to {dataset}")]
    NoAdmission { requester: NodeId, dataset: DatasetId },
    #[error("{requester} already opened {dataset}")]
    AlreadyOpen { requester: NodeId, dataset: DatasetId },
    #[error("{requester} holds no copy of {dataset}")]
    NoHandle { requester: NodeId, dataset: DatasetId },
    #[error("{dataset} belongs to {owner}")]
    NotOwner { dataset: DatasetId, owner: NodeId },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Gdpr(#[from] GdprError),
    #[error(transparent)]
    Replication(#[from] ReplicationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    AccessRequest { dataset: DatasetId, purpose: PurposeTag },
    AccessGrant { dataset: DatasetId, contract: ContractAddress, purpose: PurposeTag },
    AccessDenied { dataset: DatasetId, reason: String },
}

#[derive(Debug, Clone)]
struct Envelope {
    sent_at: Tick,
    to: NodeId,
    msg: Message,
}

#[derive(Debug, Clone)]
struct Grant {
    contract: ContractAddress,
    purpose: PurposeTag,
}

#[derive(Debug)]
pub struct Simulation {
    config: SimConfig,
    clock: Tick,
    platform: Platform,
    registry: Registry,
    replication: Replication,
    repository: Repository,
    handles: BTreeMap<(NodeId, ContractAddress), DatasetHandle>,
    providers: BTreeMap<NodeId, DataProvider>,
    offline: BTreeSet<NodeId>,
    outbox: BTreeMap<NodeId, VecDeque<Envelope>>,
    grants: BTreeMap<(NodeId, DatasetId), Grant>,
    admissions: BTreeMap<(NodeId, DatasetId), Admission>,
    full_nodes: BTreeMap<NodeId, ChainReplica>,
    full_node_faults: Vec<(Tick, NodeId)>,
    proofs: Vec<crate::gdpr::ModificationProof>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        let mut sim = Simulation {
            clock: 0,
            platform: Platform::new(config.seed),
            registry: Registry::new(),
            replication: Replication::new(config.replicas),
            repository: Repository::default(),
            handles: BTreeMap::new(),
            providers: BTreeMap::new(),
            offline: BTreeSet::new(),
            outbox: BTreeMap::new(),
            grants: BTreeMap::new(),
            admissions: BTreeMap::new(),
            full_nodes: BTreeMap::new(),
            full_node_faults: Vec::new(),
            proofs: Vec::new(),
            config,
        };
        for (id, role) in sim.config.topology.clone() {
            sim.join(id, role)?;
        }
        sim.sync_full_nodes();
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn clock(&self) -> Tick {
        self.clock
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn platform_mut(&mut self) -> &mut Platform {
        &mut self.platform
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn replication(&self) -> &Replication {
        &self.replication
    }

    pub fn replication_mut(&mut self) -> &mut Replication {
        &mut self.replication
    }

    pub fn repository(&self) -> &Repository {
        &self.repository
    }

    pub fn handles(&self) -> impl Iterator<Item = &DatasetHandle> {
        self.handles.values()
    }

    pub fn handle(&self, requester: &NodeId, dataset: &DatasetId) -> Option<&DatasetHandle> {
        let addr = self.registry.get(dataset).ok()?.contract_address.clone();
        self.handles.get(&(requester.clone(), addr))
    }

    pub fn provider(&self, id: &NodeId) -> Option<&DataProvider> {
        self.providers.get(id)
    }

    pub fn proofs(&self) -> &[crate::gdpr::ModificationProof] {
        &self.proofs
    }

    pub fn full_node_copy(&self, id: &NodeId) -> Option<&ChainReplica> {
        self.full_nodes.get(id)
    }

    pub fn full_node_faults(&self) -> &[(Tick, NodeId)] {
        &self.full_node_faults
    }

    pub fn is_online(&self, id: &NodeId) -> bool {
        !self.offline.contains(id)
    }

    /// Registered node ids in id order.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.platform.ledger().nodes().map(|n| n.id.clone()).collect()
    }

    pub fn join(&mut self, id: NodeId, role: Role) -> Result<(), SimError> {
        self.platform.register_node(id.clone(), role)?;
        match role {
            Role::Provider => {
                self.providers.insert(id.clone(), DataProvider::new(id));
            }
            Role::Authority => {
                self.full_nodes.insert(id, ChainReplica::default());
            }
            Role::Requester | Role::ReplicaHolder => {}
        }
        self.sync_full_nodes();
        Ok(())
    }

    fn require(&self, id: &NodeId, role: Role) -> Result<(), SimError> {
        match self.platform.ledger().role_of(id) {
            None => Err(SimError::UnknownActor(id.clone())),
            Some(r) if r == role => Ok(()),
            Some(_) => Err(SimError::WrongRole { node: id.clone(), expected: role }),
        }
    }

    /// Accepts a dataset id or a contract address.
    fn resolve(&self, target: &str) -> Result<(DatasetId, ContractAddress), SimError> {
        if let Ok(e) = self.registry.get(&DatasetId(target.to_owned())) {
            return Ok((e.dataset_id.clone(), e.contract_address.clone()));
        }
        self.registry
            .by_contract(&ContractAddress(target.to_owned()))
            .map(|e| (e.dataset_id.clone(), e.contract_address.clone()))
            .ok_or_else(|| SimError::UnknownTarget(target.to_owned()))
    }

    fn send(&mut self, from: &NodeId, to: &NodeId, msg: Message) {
        let env = Envelope { sent_at: self.clock, to: to.clone(), msg };
        self.outbox.entry(from.clone()).or_default().push_back(env);
    }

    pub fn in_flight(&self) -> usize {
        self.outbox.values().map(VecDeque::len).sum()
    }

    fn deliver(&mut self, notes: &mut Vec<String>) {
        let senders: Vec<NodeId> = self.outbox.keys().cloned().collect();
        for from in senders {
            let queue = self.outbox.remove(&from).unwrap_or_default();
            let mut held = VecDeque::new();
            for env in queue {
                if env.sent_at >= self.clock || self.offline.contains(&env.to) {
                    held.push_back(env);
                    continue;
                }
                self.receive(&from, env, notes);
            }
            if !held.is_empty() {
                self.outbox.entry(from).or_default().extend(held);
            }
        }
    }

    fn receive(&mut self, from: &NodeId, env: Envelope, notes: &mut Vec<String>) {
        let to = env.to;
        match env.msg {
            Message::AccessRequest { dataset, purpose } => {
                let reply = match self.registry.get(&dataset) {
                    Ok(e) if check_purpose_compatibility(&purpose, &e.profile) => {
                        notes.push(format!("{to} granted {from} access to {dataset} for {purpose}"));
                        Message::AccessGrant { dataset, contract: e.contract_address.clone(), purpose }
                    }
                    Ok(e) => {
                        let allowed: Vec<&str> = e.profile.permissions.allowed_purposes.iter().map(|p| p.as_str()).collect();
                        let reason = format!("purpose {} incompatible with {}", purpose.tag, allowed.join(","));
                        notes.push(format!("{to} denied {from} access to {dataset}: {reason}"));
                        Message::AccessDenied { dataset, reason }
                    }
                    Err(e) => Message::AccessDenied { dataset, reason: e.to_string() },
                };
                self.send(&to, from, reply);
            }
            Message::AccessGrant { dataset, contract, purpose } => {
                notes.push(format!("{to} received contract {contract} for {dataset}"));
                self.grants.insert((to, dataset), Grant { contract, purpose });
            }
            Message::AccessDenied { dataset, reason } => {
                notes.push(format!("{to} was denied {dataset}: {reason}"));
            }
        }
    }

    fn gdpr_view<'a>(
        platform: &'a mut Platform,
        registry: &'a Registry,
        repository: &'a mut Repository,
        handles: &'a mut BTreeMap<(NodeId, ContractAddress), DatasetHandle>,
        reachable: &'a dyn Fn(&NodeId) -> bool,
    ) -> NetworkView<'a> {
        NetworkView { platform, registry, repository, handles, reachable }
    }

    fn redeliver_gdpr(&mut self, notes: &mut Vec<String>) {
        let offline = self.offline.clone();
        let reachable = move |n: &NodeId| !offline.contains(n);
        for provider in self.providers.values_mut() {
            if !provider.has_pending() {
                continue;
            }
            let mut net =
                Self::gdpr_view(&mut self.platform, &self.registry, &mut self.repository, &mut self.handles, &reachable);
            for result in provider.redeliver(&mut net, self.clock) {
                match result {
                    Ok(proof) => {
                        notes.push(format!("{} of {} completed", proof.op, proof.subject));
                        self.proofs.push(proof);
                    }
                    Err(e) => notes.push(format!("modification by {} failed: {e}", provider.id())),
                }
            }
        }
    }

    fn close_periods(&mut self, notes: &mut Vec<String>) -> Result<(), SimError> {
        let candidates = self.node_ids();
        let mut due: Vec<(NodeId, DatasetId, ContractAddress)> = self
            .handles
            .iter()
            .filter(|(_, h)| h.period_due(self.clock) && !self.offline.contains(h.requester()))
            .filter_map(|((req, addr), _)| {
                self.registry.by_contract(addr).map(|e| (req.clone(), e.dataset_id.clone(), addr.clone()))
            })
            .collect();
        due.sort();
        for (req, ds, addr) in due {
            let handle = self.handles.get_mut(&(req.clone(), addr)).expect("collected above");
            match handle.end_period(&mut self.platform, &mut self.replication, &candidates, self.clock) {
                Ok(outcome) => {
                    let verdict = if outcome.report.compliant { "compliant" } else { "violation" };
                    let next = match &outcome.renewal {
                        Renewal::Renewed(t) => format!("renewed to epoch {} until t={}", t.epoch, t.expires_at),
                        Renewal::Revoked(_) => "revoked".to_owned(),
                    };
                    notes.push(format!(
                        "{req} {ds} epoch {} {verdict}, log {} on {}; {next}",
                        outcome.report.epoch,
                        outcome.replica.ref_id,
                        self.replication.entry(&outcome.replica.ref_id)?.holders.iter().map(|h| h.as_str()).collect::<Vec<_>>().join(",")
                    ));
                }
                Err(MonitorError::ReplicationUnavailable) => {
                    notes.push(format!("{req} {ds} period over; replication unavailable, retrying"));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn sync_full_nodes(&mut self) {
        let chain = self.platform.ledger().chain();
        for (id, copy) in self.full_nodes.iter_mut() {
            if copy.sync(chain).is_err() || copy.blocks() != chain.blocks.as_slice() {
                self.full_node_faults.push((self.clock, id.clone()));
            }
        }
    }

    /// Seals pending transactions at the current tick without advancing.
    pub fn settle(&mut self) -> Result<Option<u64>, SimError> {
        let sealed = self.platform.seal_block(self.clock)?;
        self.sync_full_nodes();
        Ok(sealed)
    }

    fn tick_once(&mut self, notes: &mut Vec<String>) -> Result<(), SimError> {
        self.clock += 1;
        self.deliver(notes);
        self.redeliver_gdpr(notes);
        self.close_periods(notes)?;
        if let Some(index) = self.platform.seal_block(self.clock)? {
            let n = self.platform.ledger().chain().head().transactions.len();
            notes.push(format!("block {index} sealed with {n} tx"));
        }
        self.sync_full_nodes();
        Ok(())
    }

    /// Advances `n` ticks; returns what happened, one line per event.
    pub fn tick(&mut self, n: u64) -> Result<Vec<String>, SimError> {
        let mut notes = Vec::new();
        for _ in 0..n {
            let before = notes.len();
            self.tick_once(&mut notes)?;
            let t = self.clock;
            for note in &mut notes[before..] {
                *note = format!("[t={t}] {note}");
            }
        }
        Ok(notes)
    }

    pub fn advance_to(&mut self, tick: Tick) -> Result<Vec<String>, SimError> {
        self.tick(tick.saturating_sub(self.clock))
    }

    /// Runs one step: catch the clock up to its tick, then execute.
    pub fn execute(&mut self, step: &Step) -> Result<String, SimError> {
        let mut out = self.advance_to(step.tick)?;
        let body = self.run_command(&step.actor, &step.command)?;
        if !body.is_empty() {
            out.push(body);
        }
        Ok(out.join("\n"))
    }

    fn read_file(&self, rel: &str) -> Result<String, SimError> {
        let path = match &self.config.base_dir {
            Some(base) => base.join(rel),
            None => PathBuf::from(rel),
        };
        std::fs::read_to_string(&path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
    }

    pub fn run_command(&mut self, actor: &NodeId, cmd: &Command) -> Result<String, SimError> {
        let now = self.clock;
        match cmd {
            Command::Join(role) => {
                self.join(actor.clone(), *role)?;
                Ok(format!("{actor} joined as {role}"))
            }
            Command::Publish(args) => self.publish(actor, args),
            Command::Record { dataset, subject, anon_id, row } => {
                let (ds, addr) = self.resolve(dataset)?;
                self.require_owner(actor, &ds)?;
                let copy = self.repository.copy_mut(&addr).ok_or_else(|| SimError::UnknownTarget(ds.to_string()))?;
                let anon = AnonId(anon_id.clone());
                copy.insert(DataRecord { anon_id: anon.clone(), attributes: row.clone() })?;
                self.providers.get_mut(actor).expect("owner is a provider").map_subject(subject.clone(), ds.clone(), anon.clone());
                Ok(format!("{actor} recorded {anon} in {ds}"))
            }
            Command::Query(keywords) => {
                let hits = self.registry.query(keywords);
                let mut out = format!("{} result(s) for [{}]", hits.len(), keywords.join(" "));
                for e in hits {
                    let purposes: Vec<&str> = e.profile.permissions.allowed_purposes.iter().map(|p| p.as_str()).collect();
                    write!(
                        out,
                        "\n  {} | {} | license {} | provider {} | purposes {}",
                        e.dataset_id,
                        e.profile.header.data_description,
                        e.license_type,
                        e.provider_name,
                        if purposes.is_empty() { "-".into() } else { purposes.join(",") }
                    )
                    .expect("write to string");
                }
                Ok(out)
            }
            Command::Request { dataset, purpose } => {
                self.require(actor, Role::Requester)?;
                let (ds, _) = self.resolve(dataset)?;
                let provider = self.registry.get(&ds)?.provider.clone();
                self.send(actor, &provider, Message::AccessRequest { dataset: ds.clone(), purpose: purpose.clone() });
                Ok(format!("{actor} asked {provider} for {ds} ({purpose})"))
            }
            Command::Agree { target, license, institution, processing } => {
                self.require(actor, Role::Requester)?;
                let (ds, addr) = self.resolve(target)?;
                let grant = self
                    .grants
                    .get(&(actor.clone(), ds.clone()))
                    .filter(|g| g.contract == addr)
                    .ok_or_else(|| SimError::NoGrant { requester: actor.clone(), dataset: ds.clone() })?
                    .clone();
                let use_info = UseInfo {
                    identity: actor.to_string(),
                    institution: institution.clone(),
                    processing: if processing.is_empty() { grant.purpose.to_string() } else { processing.clone() },
                };
                let adm = self.platform.add_data_requester(&addr, actor, *license, grant.purpose, use_info, now)?;
                let out = format!("{actor} agreed to license {license} on {addr}; download link {}", adm.link);
                self.admissions.insert((actor.clone(), ds), adm);
                Ok(out)
            }
            Command::Open { dataset } => {
                let (ds, addr) = self.resolve(dataset)?;
                let key = (actor.clone(), addr.clone());
                if self.handles.contains_key(&key) {
                    return Err(SimError::AlreadyOpen { requester: actor.clone(), dataset: ds });
                }
                let adm = self
                    .admissions
                    .get(&(actor.clone(), ds.clone()))
                    .ok_or_else(|| SimError::NoAdmission { requester: actor.clone(), dataset: ds.clone() })?
                    .clone();
                let token = match self.platform.current_token(&addr, actor) {
                    Some(t) if self.platform.contracts().token_valid(&t, now) => t,
                    _ => self.platform.issue_access_token(&addr, actor, now)?,
                };
                let handle = open_dataset(&self.platform, &mut self.repository, &adm.download_token, &token, self.config.mode, now)?;
                let out = format!(
                    "{actor} opened {ds}: {} record(s), epoch {}, token valid until t={}",
                    handle.stored_copy().len(),
                    token.epoch,
                    token.expires_at
                );
                self.handles.insert(key, handle);
                Ok(out)
            }
            Command::Act { dataset, action } => {
                let (ds, addr) = self.resolve(dataset)?;
                let handle = self
                    .handles
                    .get_mut(&(actor.clone(), addr))
                    .ok_or_else(|| SimError::NoHandle { requester: actor.clone(), dataset: ds.clone() })?;
                let verdict = handle.perform_action(&self.platform, *action, now)?;
                let shown = match (handle.mode(), verdict) {
                    (MonitorMode::Attest, _) => "unchecked".to_owned(),
                    (_, Verdict::Compliant) => "compliant".to_owned(),
                    (_, Verdict::Violation(r)) => format!("violation ({r})"),
                };
                Ok(format!("{actor} {ds} {}: {shown}", action.kind()))
            }
            Command::Tick(n) => {
                let mut notes = self.tick(*n)?;
                notes.push(format!("clock={}", self.clock));
                Ok(notes.join("\n"))
            }
            Command::Erase(subject) | Command::Rectify { subject, .. } => {
                self.require(actor, Role::Provider)?;
                let offline = self.offline.clone();
                let reachable = move |n: &NodeId| !offline.contains(n);
                let provider = self.providers.get_mut(actor).expect("providers are tracked on join");
                let mut net =
                    Self::gdpr_view(&mut self.platform, &self.registry, &mut self.repository, &mut self.handles, &reachable);
                let result = match cmd {
                    Command::Rectify { row, .. } => provider.request_rectification(&mut net, subject, row.clone(), now),
                    _ => provider.request_erasure(&mut net, subject, now),
                };
                match result {
                    Ok(proof) => {
                        let out = proof.to_string().trim_end().to_owned();
                        self.proofs.push(proof);
                        Ok(out)
                    }
                    Err(GdprError::PartialFailure { unreached }) => Ok(format!(
                        "{} of {subject} pending: unreachable {}",
                        cmd.verb(),
                        unreached.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(",")
                    )),
                    Err(e) => Err(e.into()),
                }
            }
            Command::AccessReport(subject) => {
                self.require(actor, Role::Provider)?;
                let provider = &self.providers[actor];
                let report = provider.access_report(&self.platform, &self.registry, subject)?;
                Ok(report.to_string().trim_end().to_owned())
            }
            Command::Inspect(target) => self.inspect(target),
            Command::Offline(n) | Command::Online(n) => {
                if self.platform.ledger().node(n).is_none() {
                    return Err(SimError::UnknownActor(n.clone()));
                }
                if matches!(cmd, Command::Offline(_)) {
                    self.offline.insert(n.clone());
                    Ok(format!("{n} offline"))
                } else {
                    self.offline.remove(n);
                    Ok(format!("{n} online"))
                }
            }
            Command::Replication(up) => {
                self.replication.set_available(*up);
                Ok(format!("replication {}", if *up { "up" } else { "down" }))
            }
        }
    }

    fn require_owner(&self, actor: &NodeId, ds: &DatasetId) -> Result<(), SimError> {
        let owner = &self.registry.get(ds)?.provider;
        if owner != actor {
            return Err(SimError::NotOwner { dataset: ds.clone(), owner: owner.clone() });
        }
        Ok(())
    }

    fn publish(&mut self, actor: &NodeId, args: &PublishArgs) -> Result<String, SimError> {
        self.require(actor, Role::Provider)?;
        let n = self.registry.entries().count() + 1;
        let profile = match &args.profile_file {
            Some(f) => AdamProfile::from_toml(&self.read_file(f)?)?,
            None => {
                let id = args.profile_id.clone().unwrap_or_else(|| format!("profile-{n}"));
                AdamProfile {
                    header: ProfileHeader {
                        data_description: args.description.clone().unwrap_or_else(|| id.clone()),
                        profile_id: id,
                        created_at: self.clock,
                        provider_name: actor.to_string(),
                    },
                    permissions: ProfilePermissions {
                        allowed_purposes: args.purposes.clone(),
                        purpose_detail: args.purpose_detail.clone(),
                    },
                    terms: ProfileTerms::default(),
                    meta_conditions: MetaConditions { contains_personal_data: args.personal },
                }
            }
        };
        let data = match &args.data_file {
            Some(f) => Dataset::from_csv(&self.read_file(f)?)?,
            None => Dataset::new(args.columns.clone()),
        };
        let link = args.link.clone().unwrap_or_else(|| format!("repo://{}", profile.header.profile_id));
        let listing = Listing { license: args.license, link, period: args.period };
        let ds = self.registry.publish_profile(&mut self.platform, actor, profile, listing, self.clock)?;
        let addr = self.registry.get(&ds)?.contract_address.clone();
        let rows = data.len();
        self.repository.deposit(addr.clone(), data);
        Ok(format!("{actor} published {ds} at {addr} (license {}, period {}, {rows} record(s))", args.license, args.period))
    }

    /// Read-only rendering of part of the simulation.
    pub fn inspect(&self, target: &InspectTarget) -> Result<String, SimError> {
        let mut out = String::new();
        match target {
            InspectTarget::Chain => {
                let chain = self.platform.ledger().chain();
                for b in &chain.blocks {
                    writeln!(out, "block {} t={} hash={} prev={}", b.index, b.timestamp, &b.block_hash.to_hex()[..16], &b.prev_hash.to_hex()[..16])
                        .expect("write to string");
                    for tx in &b.transactions {
                        writeln!(out, "  {} {} {}", tx.tx_id, tx.sender, tx.function).expect("write to string");
                    }
                }
                writeln!(out, "pending: {}", chain.pending.len()).expect("write to string");
                write!(out, "verify: {}", verify_chain(chain)).expect("write to string");
                let forged = self.platform.ledger().forged_transactions();
                if !forged.is_empty() {
                    write!(out, "\nbad signatures: {}", forged.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","))
                        .expect("write to string");
                }
            }
            InspectTarget::Contract(c) => {
                let (ds, addr) = self.resolve(c)?;
                let contract = self.platform.contracts().get(&addr)?;
                writeln!(out, "dataset {ds}").expect("write to string");
                write!(out, "{contract}").expect("write to string");
                let terms = contract.license_code.terms().expect("published codes are valid");
                write!(out, "{}", render_deed(contract.license_code, &terms)).expect("write to string");
            }
            InspectTarget::Replicas => {
                let auditor = self
                    .full_nodes
                    .keys()
                    .next()
                    .ok_or_else(|| SimError::UnknownTarget("replicas (no authority)".into()))?;
                let audits = self.replication.audit_replicas(self.platform.ledger(), auditor)?;
                if audits.is_empty() {
                    out.push_str("no replicated logs");
                }
                for a in audits {
                    let holders: Vec<String> =
                        a.holders.iter().map(|(h, ok)| format!("{h}:{}", if *ok { "ok" } else { "corrupt" })).collect();
                    writeln!(
                        out,
                        "{} requester={} epoch={} hash={} holders={} {}",
                        a.reference.ref_id,
                        a.reference.requester,
                        a.reference.epoch,
                        &a.log_hash.to_hex()[..16],
                        holders.join(","),
                        if a.intact { "intact" } else { "LOST" }
                    )
                    .expect("write to string");
                }
            }
            InspectTarget::Node(id) => {
                let id = NodeId(id.clone());
                let node = self.platform.ledger().node(&id).ok_or_else(|| SimError::UnknownTarget(format!("node {id}")))?;
                writeln!(out, "node {} role={} {}", id, node.role, if self.is_online(&id) { "online" } else { "offline" })
                    .expect("write to string");
                let sent = self.platform.ledger().chain().committed().filter(|t| t.sender == id).count();
                writeln!(out, "  committed tx sent: {sent}").expect("write to string");
                for ((req, addr), h) in &self.handles {
                    if req == &id {
                        let ds = self.registry.by_contract(addr).map(|e| e.dataset_id.to_string()).unwrap_or_default();
                        writeln!(
                            out,
                            "  holds {ds} epoch={} records={} {}",
                            h.epoch(),
                            h.stored_copy().len(),
                            if h.is_revoked() { "revoked" } else if h.is_sealed() { "sealed" } else { "open" }
                        )
                        .expect("write to string");
                    }
                }
                let held = self.replication.entries().filter(|e| self.replication.held_copy(&id, &e.reference.ref_id).is_some()).count();
                writeln!(out, "  log replicas held: {held}").expect("write to string");
                if let Some(copy) = self.full_nodes.get(&id) {
                    writeln!(out, "  chain copy: {} block(s)", copy.blocks().len()).expect("write to string");
                }
                if let Some(p) = self.providers.get(&id) {
                    writeln!(out, "  modifications in flight: {}", p.pending_anon_ids().len()).expect("write to string");
                }
            }
        }
        Ok(out.trim_end().to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::RequesterState;
    use crate::license::ActionKind;

    fn sim() -> Simulation {
        Simulation::new(SimConfig::seeded(3)).unwrap()
    }

    fn run(sim: &mut Simulation, text: &str) {
        let scenario = Scenario::parse(text).unwrap();
        for step in &scenario.steps {
            sim.execute(step).unwrap_or_else(|e| panic!("line {}: {e}", step.line));
        }
    }

    const SETUP: &str = "0 provider publish id=c desc=cohort license=63 purposes=general-research personal=true period=5\n\
                         0 provider record ds-1 s1 anon-1 40,T2D\n\
                         0 alice request ds-1 purpose=general-research\n\
                         2 alice agree ds-1 license=63\n\
                         2 alice open ds-1\n";

    #[test]
    fn idle_tick_forms_no_block() {
        let mut s = sim();
        let h = s.platform().ledger().height();
        assert!(s.tick(1).unwrap().is_empty());
        assert_eq!(s.clock(), 1);
        assert_eq!(s.platform().ledger().height(), h);
    }

    #[test]
    fn request_round_trip_takes_two_ticks() {
        let mut s = sim();
        run(&mut s, "0 provider publish license=63 purposes=general-research personal=true\n0 alice request ds-1 purpose=general-research\n");
        let early = Scenario::parse("1 alice agree ds-1 license=63\n").unwrap();
        assert!(matches!(s.execute(&early.steps[0]), Err(SimError::NoGrant { .. })));
        run(&mut s, "2 alice agree ds-1 license=63\n");
    }

    #[test]
    fn incompatible_purpose_is_denied() {
        let mut s = sim();
        run(&mut s, "0 provider publish license=63 purposes=general-research personal=true\n0 bob request ds-1 purpose=commercial\n3 - tick 1\n");
        let agree = Scenario::parse("4 bob agree ds-1 license=63\n").unwrap();
        assert!(matches!(s.execute(&agree.steps[0]), Err(SimError::NoGrant { .. })));
    }

    #[test]
    fn period_boundaries_fire_per_handle() {
        let mut s = sim();
        run(
            &mut s,
            "0 provider publish license=63 purposes=general-research personal=true period=5\n\
             0 provider publish license=63 purposes=general-research personal=true period=10\n\
             0 alice request ds-1 purpose=general-research\n\
             0 alice request ds-2 purpose=general-research\n\
             2 alice agree ds-1 license=63\n2 alice agree ds-2 license=63\n\
             2 alice open ds-1\n2 alice open ds-2\n",
        );
        s.tick(10).unwrap();
        let h1 = s.handle(&"alice".into(), &"ds-1".into()).unwrap();
        let h2 = s.handle(&"alice".into(), &"ds-2".into()).unwrap();
        assert_eq!(h1.history().len(), 2);
        assert_eq!(h2.history().len(), 1);
        assert_eq!(h1.epoch(), 3);
    }

    #[test]
    fn violation_revokes_at_period_end() {
        let mut s = sim();
        run(&mut s, SETUP);
        run(&mut s, "3 alice act ds-1 commercial-use\n7 - tick 1\n");
        let addr = s.registry().get(&"ds-1".into()).unwrap().contract_address.clone();
        let rec = s.platform().contracts().get(&addr).unwrap().requester(&"alice".into()).unwrap();
        assert_eq!(rec.state, RequesterState::Revoked);
        assert!(!rec.reports[0].compliant);
        let act = Scenario::parse("9 alice act ds-1 read\n").unwrap();
        assert!(matches!(s.execute(&act.steps[0]), Err(SimError::Monitor(MonitorError::Sealed))));
    }

    #[test]
    fn replication_outage_defers_the_report() {
        let mut s = sim();
        run(&mut s, SETUP);
        run(&mut s, "6 - replication down\n");
        s.tick(3).unwrap();
        let h = s.handle(&"alice".into(), &"ds-1".into()).unwrap();
        assert!(h.history().is_empty());
        run(&mut s, "9 - replication up\n10 - tick 1\n");
        let h = s.handle(&"alice".into(), &"ds-1".into()).unwrap();
        assert_eq!(h.history().len(), 1);
        assert_eq!(h.history()[0].report.epoch, 1);
    }

    #[test]
    fn offline_requester_delays_erasure_proof() {
        let mut s = sim();
        run(&mut s, SETUP);
        run(&mut s, "3 - offline alice\n3 provider erase s1\n");
        assert!(s.proofs().is_empty());
        assert!(s.provider(&"provider".into()).unwrap().has_pending());
        run(&mut s, "4 - online alice\n5 - tick 1\n");
        assert_eq!(s.proofs().len(), 1);
        assert_eq!(s.proofs()[0].sections[0].requester_confirmations.len(), 1);
        assert!(!s.handle(&"alice".into(), &"ds-1".into()).unwrap().stored_copy().contains(&AnonId::from("anon-1")));
    }

    #[test]
    fn authority_copy_tracks_chain() {
        let mut s = sim();
        run(&mut s, SETUP);
        s.tick(12).unwrap();
        let copy = s.full_node_copy(&"authority".into()).unwrap();
        assert_eq!(copy.blocks(), s.platform().ledger().chain().blocks.as_slice());
        assert!(s.full_node_faults().is_empty());
    }

    #[test]
    fn inspect_targets() {
        let mut s = sim();
        run(&mut s, SETUP);
        run(&mut s, &format!("3 alice act ds-1 {}\n8 - tick 1\n", ActionKind::Read));
        let c = s.inspect(&InspectTarget::Contract("ds-1".into())).unwrap();
        assert!(c.contains("license: 63") && c.contains("requester alice [active(2)]") && c.contains("report epoch 1 compliant=true"));
        assert!(s.inspect(&InspectTarget::Replicas).unwrap().contains("intact"));
        assert!(s.inspect(&InspectTarget::Chain).unwrap().contains("verify: ok"));
        assert!(matches!(s.inspect(&InspectTarget::Node("mallory".into())), Err(SimError::UnknownTarget(_))));
        s.platform_mut().ledger_mut().chain_mut_for_tests().blocks[1].timestamp += 1;
        assert!(!s.inspect(&InspectTarget::Chain).unwrap().contains("verify: ok"));
    }
}
