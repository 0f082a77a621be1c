//! The sealed dataset executable held by each requester: access gating,
//! license monitoring with an event log, and the update path that reports
//! each period and applies rectify/erase commands.
//!
//! Event-log lines are `tick|action_kind|flags|verdict`, newline-terminated:
//!
//! * `flags` is `N` or `-` (notice carried), then `A` or `-` (attribution
//!   carried), then `:<code>` for a shared derivative's license;
//! * `verdict` is `compliant`, `violation:<reason>` or `unchecked`.
//!
//! Dataset files are CSV with a header row whose first column is `anon_id`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{
    AccessToken, ComplianceReport, ContractBook, ContractError, DownloadToken, ModificationKind, Platform, Renewal,
};
use crate::ledger::{ContractAddress, Digest, NodeId, Tick, TxId};
use crate::license::{check_action, ActionKind, DataAction, LicenseCode, LicenseTerms, Verdict, ViolationReason};
use crate::replication::{ReplicaRef, Replication, ReplicationError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnonId(pub String);

impl fmt::Display for AnonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AnonId {
    fn from(s: &str) -> Self {
        AnonId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRecord {
    pub anon_id: AnonId,
    pub attributes: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("csv: {0}")]
    Csv(String),
    #[error("first column must be `anon_id`")]
    MissingAnonIdColumn,
    #[error("duplicate anon_id {0}")]
    DuplicateAnonId(AnonId),
    #[error("expected {expected} attributes, got {got}")]
    Arity { expected: usize, got: usize },
}

/// An anonymized table keyed by `anon_id`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    columns: Vec<String>,
    records: BTreeMap<AnonId, DataRecord>,
}

impl Dataset {
    /// `columns` excludes the leading `anon_id` column.
    pub fn new(columns: Vec<String>) -> Self {
        Dataset { columns, records: BTreeMap::new() }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn insert(&mut self, record: DataRecord) -> Result<(), DatasetError> {
        if record.attributes.len() != self.columns.len() {
            return Err(DatasetError::Arity { expected: self.columns.len(), got: record.attributes.len() });
        }
        if self.records.contains_key(&record.anon_id) {
            return Err(DatasetError::DuplicateAnonId(record.anon_id));
        }
        self.records.insert(record.anon_id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &AnonId) -> Option<&DataRecord> {
        self.records.get(id)
    }

    pub fn contains(&self, id: &AnonId) -> bool {
        self.records.contains_key(id)
    }

    pub fn remove(&mut self, id: &AnonId) -> Option<DataRecord> {
        self.records.remove(id)
    }

    pub fn replace(&mut self, id: &AnonId, attributes: Vec<String>) -> Result<(), DatasetError> {
        if attributes.len() != self.columns.len() {
            return Err(DatasetError::Arity { expected: self.columns.len(), got: attributes.len() });
        }
        if let Some(r) = self.records.get_mut(id) {
            r.attributes = attributes;
        }
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = &DataRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_csv(text: &str) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| DatasetError::Csv(e.to_string()))?.clone();
        if headers.get(0) != Some("anon_id") {
            return Err(DatasetError::MissingAnonIdColumn);
        }
        let mut ds = Dataset::new(headers.iter().skip(1).map(str::to_owned).collect());
        for row in rdr.records() {
            let row = row.map_err(|e| DatasetError::Csv(e.to_string()))?;
            let mut fields = row.iter();
            let anon_id = AnonId(fields.next().unwrap_or_default().to_owned());
            ds.insert(DataRecord { anon_id, attributes: fields.map(str::to_owned).collect() })?;
        }
        Ok(ds)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["anon_id".to_owned()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for r in self.records.values() {
            let mut row = vec![r.anon_id.0.clone()];
            row.extend(r.attributes.iter().cloned());
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub tick: Tick,
    pub action: DataAction,
    /// `None` when the action was not checked (attest mode).
    pub verdict: Option<Verdict>,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        let a = &self.action;
        let mut flags = String::new();
        flags.push(if a.carried_notice() { 'N' } else { '-' });
        flags.push(if a.carried_attribution() { 'A' } else { '-' });
        if let Some(code) = a.derivative_license() {
            flags.push_str(&format!(":{code}"));
        }
        let verdict = match self.verdict {
            None => "unchecked".to_owned(),
            Some(Verdict::Compliant) => "compliant".to_owned(),
            Some(Verdict::Violation(r)) => format!("violation:{}", r.slug()),
        };
        format!("{}|{}|{}|{}", self.tick, a.kind(), flags, verdict)
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let parts: Vec<&str> = line.split('|').collect();
        let [tick, kind, flags, verdict] = parts[..] else {
            return Err(format!("expected 4 fields in `{line}`"));
        };
        let tick: Tick = tick.parse().map_err(|_| format!("bad tick `{tick}`"))?;
        let kind: ActionKind = kind.parse()?;
        let (marks, deriv) = match flags.split_once(':') {
            Some((m, c)) => (m, Some(LicenseCode(c.parse().map_err(|_| format!("bad license `{c}`"))?))),
            None => (flags, None),
        };
        let notice = match marks.get(0..1) {
            Some("N") => true,
            Some("-") => false,
            _ => return Err(format!("bad flags `{flags}`")),
        };
        let attribution = match marks.get(1..2) {
            Some("A") => true,
            Some("-") => false,
            _ => return Err(format!("bad flags `{flags}`")),
        };
        if marks.len() != 2 {
            return Err(format!("bad flags `{flags}`"));
        }
        let action = DataAction::new(kind, notice, attribution, deriv)?;
        let verdict = match verdict {
            "unchecked" => None,
            "compliant" => Some(Verdict::Compliant),
            v => {
                let slug = v.strip_prefix("violation:").ok_or_else(|| format!("bad verdict `{v}`"))?;
                Some(Verdict::Violation(ViolationReason::from_slug(slug).ok_or_else(|| format!("bad reason `{slug}`"))?))
            }
        };
        Ok(LogEntry { tick, action, verdict })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("event log line {line}: {reason}")]
pub struct LogParseError {
    pub line: usize,
    pub reason: String,
}

/// Append-only record of one requester's actions during one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    pub requester: NodeId,
    pub dataset: ContractAddress,
    pub epoch: u32,
    entries: Vec<LogEntry>,
}

impl EventLog {
    pub fn new(requester: NodeId, dataset: ContractAddress, epoch: u32) -> Self {
        EventLog { requester, dataset, epoch, entries: Vec::new() }
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn append(&mut self, tick: Tick, action: DataAction, verdict: Option<Verdict>) -> Result<(), String> {
        if let Some(last) = self.entries.last() {
            if tick < last.tick {
                return Err(format!("tick {tick} precedes last entry at {}", last.tick));
            }
        }
        self.entries.push(LogEntry { tick, action, verdict });
        Ok(())
    }

    pub fn has_violation(&self) -> bool {
        self.entries.iter().any(|e| matches!(e.verdict, Some(Verdict::Violation(_))))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn hash(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }

    pub fn parse(bytes: &[u8], requester: NodeId, dataset: ContractAddress, epoch: u32) -> Result<Self, LogParseError> {
        let text = std::str::from_utf8(bytes).map_err(|e| LogParseError { line: 0, reason: e.to_string() })?;
        let mut log = EventLog::new(requester, dataset, epoch);
        for (i, line) in text.lines().enumerate() {
            let err = |reason| LogParseError { line: i + 1, reason };
            let e = LogEntry::parse_line(line).map_err(err)?;
            log.append(e.tick, e.action, e.verdict).map_err(err)?;
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MonitorMode {
    /// Every action is checked against the license.
    #[default]
    Full,
    /// Per-action checking is skipped; each epoch self-declares compliance.
    Attest,
}

impl std::str::FromStr for MonitorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(MonitorMode::Full),
            "attest" => Ok(MonitorMode::Attest),
            other => Err(format!("unknown mode `{other}` (full|attest)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonitorError {
    #[error("access token expired")]
    TokenExpired,
    #[error("access token is not valid for this requester and dataset")]
    TokenMismatch,
    #[error("access token has been superseded or revoked")]
    TokenInvalid,
    #[error("download token already spent")]
    DownloadTokenSpent,
    #[error("download token not recognized")]
    UnknownDownloadToken,
    #[error("dataset is sealed")]
    Sealed,
    #[error("the period has not ended yet (ends at {0})")]
    PeriodNotOver(Tick),
    #[error("replication module unavailable; report deferred")]
    ReplicationUnavailable,
    #[error("unknown anon_id {0}")]
    UnknownAnonId(AnonId),
    #[error("modification command from {0}, which is not the dataset's provider")]
    UnauthorizedOrigin(NodeId),
    #[error("no repository copy for {0}")]
    NoRepositoryCopy(ContractAddress),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Replication(ReplicationError),
}

impl From<ReplicationError> for MonitorError {
    fn from(e: ReplicationError) -> Self {
        match e {
            ReplicationError::Unavailable => MonitorError::ReplicationUnavailable,
            other => MonitorError::Replication(other),
        }
    }
}

/// The provider-side repository serving sealed dataset copies against
/// single-use download tokens.
#[derive(Debug, Clone, Default)]
pub struct Repository {
    copies: BTreeMap<ContractAddress, Dataset>,
    spent: BTreeSet<Digest>,
}

impl Repository {
    pub fn deposit(&mut self, address: ContractAddress, data: Dataset) {
        self.copies.insert(address, data);
    }

    pub fn copy(&self, address: &ContractAddress) -> Option<&Dataset> {
        self.copies.get(address)
    }

    pub fn copy_mut(&mut self, address: &ContractAddress) -> Option<&mut Dataset> {
        self.copies.get_mut(address)
    }

    pub fn copies(&self) -> impl Iterator<Item = (&ContractAddress, &Dataset)> {
        self.copies.iter()
    }

    pub fn is_spent(&self, token: &DownloadToken) -> bool {
        self.spent.contains(&token.hash())
    }

    /// Redeems `token` against the on-chain admission record.
    pub fn download(&mut self, contracts: &ContractBook, token: &DownloadToken) -> Result<Dataset, MonitorError> {
        let hash = token.hash();
        if self.spent.contains(&hash) {
            return Err(MonitorError::DownloadTokenSpent);
        }
        let record = contracts.get(&token.contract)?.requester(&token.requester)?;
        if record.download_token_hash != hash {
            return Err(MonitorError::UnknownDownloadToken);
        }
        let data = self.copies.get(&token.contract).cloned().ok_or_else(|| MonitorError::NoRepositoryCopy(token.contract.clone()))?;
        self.spent.insert(hash);
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedEffect {
    pub tick: Tick,
    pub kind: ActionKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModificationCommand {
    Erase(AnonId),
    Rectify(AnonId, Vec<String>),
}

impl ModificationCommand {
    pub fn anon_id(&self) -> &AnonId {
        match self {
            ModificationCommand::Erase(a) | ModificationCommand::Rectify(a, _) => a,
        }
    }

    pub fn kind(&self) -> ModificationKind {
        match self {
            ModificationCommand::Erase(_) => ModificationKind::Erase,
            ModificationCommand::Rectify(..) => ModificationKind::Rectify,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodOutcome {
    pub replica: ReplicaRef,
    pub report: ComplianceReport,
    pub report_tx: TxId,
    pub renewal: Renewal,
}

/// A requester's unsealed (or sealed) copy of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHandle {
    requester: NodeId,
    contract: ContractAddress,
    provider: NodeId,
    data: Dataset,
    license: LicenseTerms,
    log: EventLog,
    token: AccessToken,
    mode: MonitorMode,
    sealed: bool,
    revoked: bool,
    effects: Vec<AppliedEffect>,
    history: Vec<PeriodOutcome>,
}

/// Redeems the download token and unseals the copy with the access token.
pub fn open_dataset(
    platform: &Platform,
    repo: &mut Repository,
    download: &DownloadToken,
    access: &AccessToken,
    mode: MonitorMode,
    now: Tick,
) -> Result<DatasetHandle, MonitorError> {
    if access.requester != download.requester || access.dataset != download.contract {
        return Err(MonitorError::TokenMismatch);
    }
    if now >= access.expires_at {
        return Err(MonitorError::TokenExpired);
    }
    if !platform.contracts().token_valid(access, now) {
        return Err(MonitorError::TokenInvalid);
    }
    let contract = platform.contracts().get(&access.dataset)?;
    let license = contract.license_code.terms().expect("published codes are valid");
    let provider = contract.provider.clone();
    let data = repo.download(platform.contracts(), download)?;
    Ok(DatasetHandle {
        requester: access.requester.clone(),
        contract: access.dataset.clone(),
        provider,
        data,
        license,
        log: EventLog::new(access.requester.clone(), access.dataset.clone(), access.epoch),
        token: access.clone(),
        mode,
        sealed: false,
        revoked: false,
        effects: Vec::new(),
        history: Vec::new(),
    })
}

impl DatasetHandle {
    pub fn requester(&self) -> &NodeId {
        &self.requester
    }

    pub fn contract(&self) -> &ContractAddress {
        &self.contract
    }

    pub fn epoch(&self) -> u32 {
        self.token.epoch
    }

    pub fn token(&self) -> &AccessToken {
        &self.token
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn is_revoked(&self) -> bool {
        self.revoked
    }

    pub fn mode(&self) -> MonitorMode {
        self.mode
    }

    pub fn current_log(&self) -> &EventLog {
        &self.log
    }

    pub fn effects(&self) -> &[AppliedEffect] {
        &self.effects
    }

    pub fn history(&self) -> &[PeriodOutcome] {
        &self.history
    }

    pub fn license(&self) -> &LicenseTerms {
        &self.license
    }

    /// Whether the current period has ended and a report is owed.
    pub fn period_due(&self, now: Tick) -> bool {
        !self.revoked && now >= self.token.expires_at
    }

    /// Storage-level view for erasure scans; bypasses the access gate.
    pub fn stored_copy(&self) -> &Dataset {
        &self.data
    }

    fn gate(&self, platform: &Platform, now: Tick) -> Result<(), MonitorError> {
        if self.sealed {
            return Err(MonitorError::Sealed);
        }
        if now >= self.token.expires_at {
            return Err(MonitorError::TokenExpired);
        }
        if !platform.contracts().token_valid(&self.token, now) {
            return Err(MonitorError::TokenInvalid);
        }
        Ok(())
    }

    /// Reads the records; requires an unsealed handle and a live token.
    pub fn read_records(&self, platform: &Platform, now: Tick) -> Result<&Dataset, MonitorError> {
        self.gate(platform, now)?;
        Ok(&self.data)
    }

    /// Checks and logs `action`; its effect is applied only if compliant.
    pub fn perform_action(&mut self, platform: &Platform, action: DataAction, now: Tick) -> Result<Verdict, MonitorError> {
        self.gate(platform, now)?;
        let (logged, verdict) = match self.mode {
            MonitorMode::Full => {
                let v = check_action(&action, &self.license);
                (Some(v), v)
            }
            MonitorMode::Attest => (None, Verdict::Compliant),
        };
        self.log.append(now, action, logged).expect("clock never runs backwards");
        if verdict.is_compliant() {
            self.effects.push(AppliedEffect { tick: now, kind: action.kind() });
        }
        Ok(verdict)
    }

    /// Closes the epoch: replicate the log, report, and renew or seal.
    pub fn end_period(
        &mut self,
        platform: &mut Platform,
        replication: &mut Replication,
        candidates: &[NodeId],
        now: Tick,
    ) -> Result<PeriodOutcome, MonitorError> {
        if self.revoked {
            return Err(MonitorError::Sealed);
        }
        if now < self.token.expires_at {
            return Err(MonitorError::PeriodNotOver(self.token.expires_at));
        }
        let replica = replication.replicate_log(&self.log, candidates, now, platform.rng())?;
        let log_hash = self.log.hash();
        let compliant = match self.mode {
            MonitorMode::Full => !self.log.has_violation(),
            MonitorMode::Attest => true,
        };
        let report = ComplianceReport {
            requester: self.requester.clone(),
            epoch: self.log.epoch,
            compliant,
            log_ref: replica.ref_id.clone(),
            log_hash,
        };
        let report_tx = platform.record_compliance_report(&self.contract, report.clone(), now)?;
        let renewal = platform.renew_token(&self.contract, &self.requester, now)?;
        match &renewal {
            Renewal::Renewed(token) => {
                self.token = token.clone();
                self.log = EventLog::new(self.requester.clone(), self.contract.clone(), token.epoch);
            }
            Renewal::Revoked(_) => {
                self.sealed = true;
                self.revoked = true;
            }
        }
        let outcome = PeriodOutcome { replica, report, report_tx, renewal };
        self.history.push(outcome.clone());
        Ok(outcome)
    }

    /// Applies a rectify/erase command from the provider's modification
    /// module, regardless of access state, and confirms it on-chain.
    pub fn apply_modification(
        &mut self,
        platform: &mut Platform,
        cmd: &ModificationCommand,
        origin: &NodeId,
        now: Tick,
    ) -> Result<TxId, MonitorError> {
        if origin != &self.provider {
            return Err(MonitorError::UnauthorizedOrigin(origin.clone()));
        }
        match cmd {
            ModificationCommand::Erase(id) => {
                self.data.remove(id);
            }
            ModificationCommand::Rectify(id, row) => {
                if !self.data.contains(id) {
                    return Err(MonitorError::UnknownAnonId(id.clone()));
                }
                self.data.replace(id, row.clone())?;
            }
        }
        Ok(platform.record_modification_confirmation(&self.contract, &self.requester, cmd.anon_id(), cmd.kind(), now)?)
    }
}
