//! Data-subject rights: purpose compatibility at request time, access
//! reports, and erasure/rectification fan-out through the provider's
//! modification module, ending in on-chain confirmations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::contract::{
    usage_info, ContractBook, ContractError, ModificationKind, Platform, RequesterState, UsageInfo, UseInfo,
};
use crate::ledger::{Chain, ContractAddress, NodeId, Tick, TxId};
use crate::monitor::{AnonId, DatasetHandle, ModificationCommand, MonitorError, Repository};
use crate::registry::{AdamProfile, DatasetId, PurposeKind, PurposeTag, Registry, RegistryError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubjectId(pub String);

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SubjectId {
    fn from(s: &str) -> Self {
        SubjectId(s.to_owned())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GdprError {
    #[error("subject {0} is not in the provider's mapping")]
    UnknownSubject(SubjectId),
    #[error("row has {got} attributes, dataset {dataset} expects {expected}")]
    SchemaMismatch { dataset: DatasetId, expected: usize, got: usize },
    #[error("modification pending: unreachable requesters {}", .unreached.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(", "))]
    PartialFailure { unreached: Vec<NodeId> },
    #[error("a modification for {0} is already in flight")]
    InFlight(SubjectId),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

/// `true` when the dataset holds no personal data (the purpose is recorded
/// but not gated), or when the requested purpose is among those the data
/// was collected for.
pub fn check_purpose_compatibility(requested: &PurposeTag, profile: &AdamProfile) -> bool {
    !profile.meta_conditions.contains_personal_data || profile.permissions.allowed_purposes.contains(&requested.tag)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequesterDisclosure {
    pub requester: NodeId,
    pub use_info: UseInfo,
    pub purpose: PurposeTag,
    pub state: RequesterState,
    pub admitted_at: Tick,
    /// `(epoch, compliant)` for every report on record.
    pub compliance: Vec<(u32, bool)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessSection {
    pub dataset_id: DatasetId,
    pub contract: ContractAddress,
    pub description: String,
    pub collected_for: BTreeSet<PurposeKind>,
    pub requesters: Vec<RequesterDisclosure>,
    /// Who received a copy of the dataset, and when.
    pub transfers: Vec<(NodeId, Tick)>,
}

impl AccessSection {
    /// The parts of a section that are derivable from the chain alone.
    pub fn from_usage(dataset_id: DatasetId, collected_for: BTreeSet<PurposeKind>, info: UsageInfo) -> Self {
        let requesters: Vec<RequesterDisclosure> = info
            .requesters
            .iter()
            .map(|r| RequesterDisclosure {
                requester: r.requester.clone(),
                use_info: r.use_info.clone(),
                purpose: r.purpose.clone(),
                state: r.state,
                admitted_at: r.admitted_at,
                compliance: r.reports.iter().map(|rep| (rep.epoch, rep.compliant)).collect(),
            })
            .collect();
        let transfers = requesters.iter().map(|r| (r.requester.clone(), r.admitted_at)).collect();
        AccessSection { dataset_id, contract: info.address, description: info.description, collected_for, requesters, transfers }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessReport {
    pub subject: SubjectId,
    pub sections: Vec<AccessSection>,
}

impl fmt::Display for AccessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "access report for {}", self.subject)?;
        for s in &self.sections {
            let purposes: Vec<&str> = s.collected_for.iter().map(|p| p.as_str()).collect();
            writeln!(f, "dataset {} ({}) contract {}", s.dataset_id, s.description, s.contract)?;
            writeln!(f, "  collected for: {}", if purposes.is_empty() { "-".into() } else { purposes.join(", ") })?;
            if s.requesters.is_empty() {
                writeln!(f, "  requesters: (none)")?;
            }
            for r in &s.requesters {
                writeln!(
                    f,
                    "  requester {} [{}] purpose={} identity={:?} institution={:?} processing={:?}",
                    r.requester, r.state, r.purpose, r.use_info.identity, r.use_info.institution, r.use_info.processing
                )?;
                for (epoch, ok) in &r.compliance {
                    writeln!(f, "    epoch {epoch}: {}", if *ok { "compliant" } else { "violation" })?;
                }
            }
            for (who, at) in &s.transfers {
                writeln!(f, "  transferred to {who} at tick {at}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProofSection {
    pub dataset_id: DatasetId,
    pub contract: ContractAddress,
    pub anon_id: AnonId,
    pub requester_confirmations: BTreeMap<NodeId, TxId>,
    pub provider_confirmation: TxId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModificationProof {
    pub subject: SubjectId,
    pub op: ModificationKind,
    pub sections: Vec<ProofSection>,
    pub completed_at: Tick,
}

impl ModificationProof {
    pub fn tx_ids(&self) -> impl Iterator<Item = &TxId> {
        self.sections
            .iter()
            .flat_map(|s| s.requester_confirmations.values().chain(std::iter::once(&s.provider_confirmation)))
    }
}

impl fmt::Display for ModificationProof {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} proof for {} completed at tick {}", self.op, self.subject, self.completed_at)?;
        for s in &self.sections {
            writeln!(f, "dataset {} contract {} anon_id {}", s.dataset_id, s.contract, s.anon_id)?;
            writeln!(f, "  provider tx={}", s.provider_confirmation)?;
            for (who, tx) in &s.requester_confirmations {
                writeln!(f, "  {who} tx={tx}")?;
            }
        }
        Ok(())
    }
}

/// The rest of the network as seen by the modification module.
pub struct NetworkView<'a> {
    pub platform: &'a mut Platform,
    pub registry: &'a Registry,
    pub repository: &'a mut Repository,
    pub handles: &'a mut BTreeMap<(NodeId, ContractAddress), DatasetHandle>,
    pub reachable: &'a dyn Fn(&NodeId) -> bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct JobSection {
    dataset_id: DatasetId,
    contract: ContractAddress,
    anon_id: AnonId,
    requesters: Vec<NodeId>,
    confirmed: BTreeMap<NodeId, TxId>,
    provider_tx: Option<TxId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Job {
    subject: SubjectId,
    op: ModificationKind,
    row: Vec<String>,
    sections: Vec<JobSection>,
}

/// A data provider's private subject mapping and its modification module.
#[derive(Debug, Clone)]
pub struct DataProvider {
    id: NodeId,
    mapping: BTreeMap<SubjectId, Vec<(DatasetId, AnonId)>>,
    pending: Vec<Job>,
}

impl DataProvider {
    pub fn new(id: NodeId) -> Self {
        DataProvider { id, mapping: BTreeMap::new(), pending: Vec::new() }
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn map_subject(&mut self, subject: SubjectId, dataset: DatasetId, anon_id: AnonId) {
        self.mapping.entry(subject).or_default().push((dataset, anon_id));
    }

    pub fn knows(&self, subject: &SubjectId) -> bool {
        self.mapping.contains_key(subject)
    }

    /// Anonymized ids awaiting a modification, for erasure scans.
    pub fn pending_anon_ids(&self) -> Vec<&AnonId> {
        self.pending.iter().flat_map(|j| j.sections.iter().map(|s| &s.anon_id)).collect()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    fn mapped(&self, subject: &SubjectId) -> Result<&[(DatasetId, AnonId)], GdprError> {
        match self.mapping.get(subject) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(GdprError::UnknownSubject(subject.clone())),
        }
    }

    pub fn access_report(&self, platform: &Platform, registry: &Registry, subject: &SubjectId) -> Result<AccessReport, GdprError> {
        let mut sections = Vec::new();
        for (dataset_id, _) in self.mapped(subject)? {
            let entry = registry.get(dataset_id)?;
            let info = platform.read_usage_info(&entry.contract_address, &self.id)?;
            sections.push(AccessSection::from_usage(
                dataset_id.clone(),
                entry.profile.permissions.allowed_purposes.clone(),
                info,
            ));
        }
        Ok(AccessReport { subject: subject.clone(), sections })
    }

    pub fn request_erasure(&mut self, net: &mut NetworkView<'_>, subject: &SubjectId, now: Tick) -> Result<ModificationProof, GdprError> {
        self.start(net, subject, ModificationKind::Erase, Vec::new(), now)
    }

    pub fn request_rectification(
        &mut self,
        net: &mut NetworkView<'_>,
        subject: &SubjectId,
        row: Vec<String>,
        now: Tick,
    ) -> Result<ModificationProof, GdprError> {
        self.start(net, subject, ModificationKind::Rectify, row, now)
    }

    fn start(
        &mut self,
        net: &mut NetworkView<'_>,
        subject: &SubjectId,
        op: ModificationKind,
        row: Vec<String>,
        now: Tick,
    ) -> Result<ModificationProof, GdprError> {
        if self.pending.iter().any(|j| &j.subject == subject) {
            return Err(GdprError::InFlight(subject.clone()));
        }
        let mut sections = Vec::new();
        for (dataset_id, anon_id) in self.mapped(subject)? {
            let contract = net.registry.get(dataset_id)?.contract_address.clone();
            if op == ModificationKind::Rectify {
                let expected = net.repository.copy(&contract).map_or(0, |d| d.columns().len());
                if expected != row.len() {
                    return Err(GdprError::SchemaMismatch { dataset: dataset_id.clone(), expected, got: row.len() });
                }
            }
            let requesters = net.platform.get_requesters(&contract, &self.id)?.into_iter().map(|(id, _)| id).collect();
            sections.push(JobSection {
                dataset_id: dataset_id.clone(),
                contract,
                anon_id: anon_id.clone(),
                requesters,
                confirmed: BTreeMap::new(),
                provider_tx: None,
            });
        }
        let mut job = Job { subject: subject.clone(), op, row, sections };
        match self.drive(net, &mut job, now) {
            Ok(proof) => Ok(proof),
            Err(GdprError::PartialFailure { unreached }) => {
                self.pending.push(job);
                Err(GdprError::PartialFailure { unreached })
            }
            Err(e) => Err(e),
        }
    }

    /// Retries every queued modification; returns the proofs that completed.
    pub fn redeliver(&mut self, net: &mut NetworkView<'_>, now: Tick) -> Vec<Result<ModificationProof, GdprError>> {
        let jobs = std::mem::take(&mut self.pending);
        let mut results = Vec::new();
        for mut job in jobs {
            match self.drive(net, &mut job, now) {
                Err(GdprError::PartialFailure { .. }) => self.pending.push(job),
                other => results.push(other),
            }
        }
        results
    }

    fn drive(&mut self, net: &mut NetworkView<'_>, job: &mut Job, now: Tick) -> Result<ModificationProof, GdprError> {
        let mut unreached = Vec::new();
        for section in &mut job.sections {
            let cmd = match job.op {
                ModificationKind::Erase => ModificationCommand::Erase(section.anon_id.clone()),
                ModificationKind::Rectify => ModificationCommand::Rectify(section.anon_id.clone(), job.row.clone()),
            };
            if section.provider_tx.is_none() {
                if let Some(copy) = net.repository.copy_mut(&section.contract) {
                    match &cmd {
                        ModificationCommand::Erase(id) => {
                            copy.remove(id);
                        }
                        ModificationCommand::Rectify(id, row) => copy.replace(id, row.clone()).map_err(MonitorError::from)?,
                    }
                }
                let tx = net.platform.record_modification_confirmation(&section.contract, &self.id, &section.anon_id, job.op, now)?;
                section.provider_tx = Some(tx);
            }
            // node-id order
            for requester in section.requesters.clone() {
                if section.confirmed.contains_key(&requester) {
                    continue;
                }
                if !(net.reachable)(&requester) {
                    unreached.push(requester);
                    continue;
                }
                let tx = match net.handles.get_mut(&(requester.clone(), section.contract.clone())) {
                    Some(handle) => handle.apply_modification(net.platform, &cmd, &self.id, now)?,
                    // admitted but never downloaded: nothing to change, confirm anyway
                    None => net.platform.record_modification_confirmation(
                        &section.contract,
                        &requester,
                        &section.anon_id,
                        job.op,
                        now,
                    )?,
                };
                section.confirmed.insert(requester, tx);
            }
        }
        if !unreached.is_empty() {
            return Err(GdprError::PartialFailure { unreached });
        }
        if job.op == ModificationKind::Erase {
            self.mapping.remove(&job.subject);
        }
        Ok(ModificationProof {
            subject: job.subject.clone(),
            op: job.op,
            sections: job
                .sections
                .iter()
                .map(|s| ProofSection {
                    dataset_id: s.dataset_id.clone(),
                    contract: s.contract.clone(),
                    anon_id: s.anon_id.clone(),
                    requester_confirmations: s.confirmed.clone(),
                    provider_confirmation: s.provider_tx.clone().expect("set before requesters are contacted"),
                })
                .collect(),
            completed_at: now,
        })
    }
}

/// What a full node can reconstruct about one contract from its own copy
/// of the chain, without asking anyone.
pub fn authority_view(chain: &Chain, contract: &ContractAddress) -> Result<UsageInfo, ContractError> {
    let book = ContractBook::replay(chain)?;
    Ok(usage_info(book.get(contract)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::{tests::platform_with, FN_CONFIRM};
    use crate::ledger::Role;
    use crate::license::LicenseCode;
    use crate::monitor::{open_dataset, Dataset, MonitorMode};
    use crate::registry::{Listing, MetaConditions, ProfileHeader, ProfilePermissions, ProfileTerms};

    fn profile(id: &str, personal: bool, allowed: &[PurposeKind]) -> AdamProfile {
        AdamProfile {
            header: ProfileHeader { profile_id: id.into(), created_at: 0, data_description: format!("dataset {id}"), provider_name: "H".into() },
            permissions: ProfilePermissions { allowed_purposes: allowed.iter().copied().collect(), purpose_detail: String::new() },
            terms: ProfileTerms::default(),
            meta_conditions: MetaConditions { contains_personal_data: personal },
        }
    }

    fn purpose(k: PurposeKind) -> PurposeTag {
        PurposeTag::new(k, "").unwrap()
    }

    #[test]
    fn purpose_gate() {
        let personal = profile("p", true, &[PurposeKind::GeneralResearch]);
        assert!(check_purpose_compatibility(&purpose(PurposeKind::GeneralResearch), &personal));
        assert!(!check_purpose_compatibility(&purpose(PurposeKind::Commercial), &personal));
        let open = profile("q", false, &[PurposeKind::GeneralResearch]);
        assert!(check_purpose_compatibility(&purpose(PurposeKind::Commercial), &open));
    }

    struct World {
        platform: Platform,
        registry: Registry,
        repo: Repository,
        handles: BTreeMap<(NodeId, ContractAddress), DatasetHandle>,
        provider: DataProvider,
    }

    impl World {
        fn view<'a>(&'a mut self, reachable: &'a dyn Fn(&NodeId) -> bool) -> (NetworkView<'a>, &'a mut DataProvider) {
            (
                NetworkView {
                    platform: &mut self.platform,
                    registry: &self.registry,
                    repository: &mut self.repo,
                    handles: &mut self.handles,
                    reachable,
                },
                &mut self.provider,
            )
        }
    }

    /// One provider, `datasets` datasets each holding subject `s1` (and a
    /// bystander), `requesters` requesters opening every dataset.
    fn world(datasets: usize, requesters: usize) -> World {
        let mut nodes = vec![("provider", Role::Provider), ("authority", Role::Authority)];
        let names: Vec<String> = (0..requesters).map(|i| format!("r{i}")).collect();
        for n in &names {
            nodes.push((n.as_str(), Role::Requester));
        }
        let mut platform = platform_with(&nodes);
        let mut registry = Registry::new();
        let mut repo = Repository::default();
        let mut handles = BTreeMap::new();
        let mut provider = DataProvider::new("provider".into());
        for d in 0..datasets {
            let ds = registry
                .publish_profile(
                    &mut platform,
                    &"provider".into(),
                    profile(&format!("p{d}"), true, &[PurposeKind::GeneralResearch]),
                    Listing { license: LicenseCode(63), link: format!("repo://{d}"), period: 10 },
                    0,
                )
                .unwrap();
            let addr = registry.get(&ds).unwrap().contract_address.clone();
            repo.deposit(addr.clone(), Dataset::from_csv(&format!("anon_id,age\nanon-{d}-s1,40\nanon-{d}-s2,50\n")).unwrap());
            provider.map_subject("s1".into(), ds, AnonId(format!("anon-{d}-s1")));
            for n in &names {
                let who: NodeId = n.as_str().into();
                let adm = platform
                    .add_data_requester(&addr, &who, LicenseCode(63), purpose(PurposeKind::GeneralResearch), UseInfo { identity: n.clone(), ..Default::default() }, 0)
                    .unwrap();
                let t = platform.issue_access_token(&addr, &who, 0).unwrap();
                let h = open_dataset(&platform, &mut repo, &adm.download_token, &t, MonitorMode::Full, 1).unwrap();
                handles.insert((who, addr.clone()), h);
            }
        }
        World { platform, registry, repo, handles, provider }
    }

    fn holds(w: &World, anon: &AnonId) -> usize {
        w.handles.values().filter(|h| h.stored_copy().contains(anon)).count()
            + w.repo.copies().filter(|(_, d)| d.contains(anon)).count()
    }

    #[test]
    fn erasure_reaches_every_copy() {
        let mut w = world(1, 2);
        let anon = AnonId::from("anon-0-s1");
        assert_eq!(holds(&w, &anon), 3);
        let yes = |_: &NodeId| true;
        let (mut net, provider) = w.view(&yes);
        let proof = provider.request_erasure(&mut net, &"s1".into(), 2).unwrap();
        assert_eq!(proof.sections[0].requester_confirmations.len(), 2);
        assert_eq!(holds(&w, &anon), 0);
        assert!(holds(&w, &"anon-0-s2".into()) > 0);
        w.platform.seal_block(3).unwrap();
        for tx in proof.tx_ids() {
            let t = w.platform.ledger().get_transaction(tx).unwrap();
            assert_eq!(t.function, FN_CONFIRM);
            assert_eq!(t.field("anonId"), Some("anon-0-s1"));
            assert_eq!(t.field("opKind"), Some("erase"));
        }
        let (mut net, provider) = w.view(&yes);
        assert_eq!(
            provider.request_erasure(&mut net, &"s1".into(), 4).unwrap_err(),
            GdprError::UnknownSubject("s1".into())
        );
    }

    #[test]
    fn erasure_without_requesters() {
        let mut w = world(1, 0);
        let yes = |_: &NodeId| true;
        let (mut net, provider) = w.view(&yes);
        let proof = provider.request_erasure(&mut net, &"s1".into(), 2).unwrap();
        assert!(proof.sections[0].requester_confirmations.is_empty());
        assert_eq!(proof.tx_ids().count(), 1);
    }

    #[test]
    fn unreachable_requester_withholds_proof_until_redelivery() {
        let mut w = world(1, 2);
        let offline = |n: &NodeId| n.as_str() != "r1";
        let (mut net, provider) = w.view(&offline);
        let err = provider.request_erasure(&mut net, &"s1".into(), 2).unwrap_err();
        assert_eq!(err, GdprError::PartialFailure { unreached: vec!["r1".into()] });
        assert!(w.provider.has_pending());
        assert!(w.provider.knows(&"s1".into()));
        let (mut net, provider) = w.view(&offline);
        assert!(provider.redeliver(&mut net, 3).is_empty());
        let yes = |_: &NodeId| true;
        let (mut net, provider) = w.view(&yes);
        let done = provider.redeliver(&mut net, 4);
        let proof = done.into_iter().next().unwrap().unwrap();
        assert_eq!(proof.sections[0].requester_confirmations.len(), 2);
        assert!(!w.provider.has_pending());
        assert_eq!(holds(&w, &"anon-0-s1".into()), 0);
    }

    #[test]
    fn rectification_updates_all_copies_including_revoked() {
        let mut w = world(1, 2);
        let addr = w.registry.get(&"ds-1".into()).unwrap().contract_address.clone();
        // revoke r0 by a violating report
        let r0: NodeId = "r0".into();
        let h = w.handles.get_mut(&(r0.clone(), addr.clone())).unwrap();
        h.perform_action(&w.platform, crate::license::DataAction::plain(crate::license::ActionKind::CommercialUse), 2).unwrap();
        let mut repl = crate::replication::Replication::new(1);
        let nodes: Vec<NodeId> = w.platform.ledger().nodes().map(|n| n.id.clone()).collect();
        h.end_period(&mut w.platform, &mut repl, &nodes, 10).unwrap();
        assert!(w.handles[&(r0.clone(), addr.clone())].is_sealed());

        let yes = |_: &NodeId| true;
        let (mut net, provider) = w.view(&yes);
        assert!(matches!(
            provider.request_rectification(&mut net, &"s1".into(), vec!["1".into(), "2".into()], 11),
            Err(GdprError::SchemaMismatch { expected: 1, got: 2, .. })
        ));
        let proof = provider.request_rectification(&mut net, &"s1".into(), vec!["41".into()], 11).unwrap();
        assert_eq!(proof.sections[0].requester_confirmations.len(), 2);
        for h in w.handles.values() {
            assert_eq!(h.stored_copy().get(&"anon-0-s1".into()).unwrap().attributes, vec!["41"]);
        }
        assert!(w.provider.knows(&"s1".into()), "rectification keeps the mapping");
    }

    #[test]
    fn access_report_sections_and_authority_view() {
        let mut w = world(2, 1);
        let report = w.provider.access_report(&w.platform, &w.registry, &"s1".into()).unwrap();
        assert_eq!(report.sections.len(), 2);
        assert_eq!(report.sections[0].requesters[0].requester, NodeId::from("r0"));
        assert_eq!(report.sections[0].requesters[0].purpose.tag, PurposeKind::GeneralResearch);
        assert!(matches!(
            w.provider.access_report(&w.platform, &w.registry, &"nobody".into()),
            Err(GdprError::UnknownSubject(_))
        ));
        w.platform.seal_block(1).unwrap();
        for s in &report.sections {
            let info = authority_view(w.platform.ledger().chain(), &s.contract).unwrap();
            let rebuilt = AccessSection::from_usage(s.dataset_id.clone(), s.collected_for.clone(), info);
            assert_eq!(&rebuilt, s);
        }
        assert!(report.to_string().contains("requester r0"));
    }
}
