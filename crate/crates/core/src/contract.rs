//! Per-dataset contract state machine.
//!
//! Contract state is event-sourced: every mutation is a [`ContractCall`]
//! carried by a signed ledger transaction, and [`ContractBook::apply`] is
//! the only code path that changes state. Replaying the committed chain
//! through [`ContractBook::replay`] therefore rebuilds the live state.
//!
//! Transaction functions and payload keys:
//!
//! | function                | payload keys                                   |
//! |-------------------------|------------------------------------------------|
//! | `publishedDataset`      | `description`, `link`, `license`, `period`     |
//! | `addDataRequester`      | `license`, `purpose`, `useInfo`, `downloadTokenHash` |
//! | `issueAccessToken`      | `epoch`, `tokenId`                             |
//! | `complianceReport`      | `epoch`, `compliant`, `logRef`, `logHash`      |
//! | `renewToken`            | `epoch`, `outcome`, `tokenId` (when renewed)   |
//! | `modificationConfirmed` | `anonId`, `opKind`                             |
//!
//! The acting requester is always the transaction sender.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{
    Chain, ContractAddress, Digest, Ledger, LedgerError, Node, NodeId, Payload, Role, Tick, Transaction, TxId,
};
use crate::license::{decode_license, LicenseCode};
use crate::monitor::AnonId;
use crate::registry::PurposeTag;
use crate::replication::RefId;

pub const FN_PUBLISH: &str = "publishedDataset";
pub const FN_ADD_REQUESTER: &str = "addDataRequester";
pub const FN_ISSUE_TOKEN: &str = "issueAccessToken";
pub const FN_REPORT: &str = "complianceReport";
pub const FN_RENEW: &str = "renewToken";
pub const FN_CONFIRM: &str = "modificationConfirmed";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContractError {
    #[error("invalid license code {0}")]
    InvalidLicenseCode(i64),
    #[error("period must be a positive number of ticks")]
    InvalidPeriod,
    #[error("unknown contract {0}")]
    UnknownContract(ContractAddress),
    #[error("offered license {offered} does not match contract license {required}")]
    LicenseMismatch { offered: LicenseCode, required: LicenseCode },
    #[error("{0} is already registered on this contract")]
    AlreadyRegistered(NodeId),
    #[error("{0} is not registered on this contract")]
    NotRegistered(NodeId),
    #[error("{0} has been revoked")]
    Revoked(NodeId),
    #[error("an access token was already issued for epoch {0}")]
    TokenAlreadyIssued(u32),
    #[error("report for epoch {got} but requester is at epoch {current}")]
    WrongEpoch { got: u32, current: u32 },
    #[error("a compliance report for epoch {0} already exists")]
    DuplicateReport(u32),
    #[error("no compliance report for epoch {0}")]
    NoReportForEpoch(u32),
    #[error("{0} is not authorized for this operation")]
    Unauthorized(NodeId),
    #[error("{0} is not a registered node")]
    UnknownNode(NodeId),
    #[error("malformed contract call in {tx}: {reason}")]
    MalformedCall { tx: TxId, reason: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModificationKind {
    Erase,
    Rectify,
}

impl ModificationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModificationKind::Erase => "erase",
            ModificationKind::Rectify => "rectify",
        }
    }
}

impl fmt::Display for ModificationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModificationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "erase" => Ok(ModificationKind::Erase),
            "rectify" => Ok(ModificationKind::Rectify),
            other => Err(format!("unknown modification kind `{other}`")),
        }
    }
}

/// What a requester discloses about their use of the data; the same
/// material a data subject is entitled to under a right-of-access request.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UseInfo {
    pub identity: String,
    pub institution: String,
    pub processing: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequesterState {
    /// License agreed; immediately followed by `Active(1)` on admission.
    Agreed,
    Active(u32),
    Revoked,
}

impl fmt::Display for RequesterState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequesterState::Agreed => f.write_str("agreed"),
            RequesterState::Active(e) => write!(f, "active({e})"),
            RequesterState::Revoked => f.write_str("revoked"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessToken {
    pub token_id: String,
    pub requester: NodeId,
    pub dataset: ContractAddress,
    pub epoch: u32,
    pub issued_at: Tick,
    pub expires_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplianceReport {
    pub requester: NodeId,
    pub epoch: u32,
    pub compliant: bool,
    pub log_ref: RefId,
    pub log_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModificationConfirmation {
    pub tx_id: TxId,
    pub anon_id: AnonId,
    pub op: ModificationKind,
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequesterRecord {
    pub requester: NodeId,
    pub agreed_license: LicenseCode,
    pub purpose: PurposeTag,
    pub use_info: UseInfo,
    pub state: RequesterState,
    pub admitted_at: Tick,
    pub admission_tx: TxId,
    pub download_token_hash: Digest,
    /// Token of the current epoch, once issued.
    pub token: Option<AccessToken>,
    pub reports: Vec<ComplianceReport>,
    pub confirmations: Vec<ModificationConfirmation>,
}

impl RequesterRecord {
    pub fn current_epoch(&self) -> Option<u32> {
        match self.state {
            RequesterState::Active(e) => Some(e),
            _ => None,
        }
    }

    pub fn report_for(&self, epoch: u32) -> Option<&ComplianceReport> {
        self.reports.iter().find(|r| r.epoch == epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetContract {
    pub address: ContractAddress,
    pub provider: NodeId,
    pub description: String,
    pub link: String,
    pub license_code: LicenseCode,
    pub period: Tick,
    pub published_at: Tick,
    pub publish_tx: TxId,
    pub requesters: BTreeMap<NodeId, RequesterRecord>,
    pub provider_confirmations: Vec<ModificationConfirmation>,
}

impl DatasetContract {
    pub fn requester(&self, id: &NodeId) -> Result<&RequesterRecord, ContractError> {
        self.requesters.get(id).ok_or_else(|| ContractError::NotRegistered(id.clone()))
    }
}

impl fmt::Display for DatasetContract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "contract {} (provider {}, published at tick {})", self.address, self.provider, self.published_at)?;
        writeln!(f, "  description: {}", self.description)?;
        writeln!(f, "  link: {}", self.link)?;
        writeln!(f, "  license: {}", self.license_code)?;
        writeln!(f, "  period: {}", self.period)?;
        if self.requesters.is_empty() {
            writeln!(f, "  requesters: (none)")?;
        }
        for r in self.requesters.values() {
            writeln!(f, "  requester {} [{}] purpose={}", r.requester, r.state, r.purpose)?;
            for rep in &r.reports {
                writeln!(
                    f,
                    "    report epoch {} compliant={} log={} hash={}",
                    rep.epoch,
                    rep.compliant,
                    rep.log_ref,
                    &rep.log_hash.to_hex()[..16]
                )?;
            }
            for c in &r.confirmations {
                writeln!(f, "    {} {} tx={}", c.op, c.anon_id, c.tx_id)?;
            }
        }
        for c in &self.provider_confirmations {
            writeln!(f, "  provider {} {} tx={}", c.op, c.anon_id, c.tx_id)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenewalOutcome {
    Renewed,
    Revoked,
}

impl RenewalOutcome {
    fn as_str(self) -> &'static str {
        match self {
            RenewalOutcome::Renewed => "renewed",
            RenewalOutcome::Revoked => "revoked",
        }
    }
}

/// Typed form of a contract transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContractCall {
    Publish { description: String, link: String, license: i64, period: Tick },
    AddRequester { license: LicenseCode, purpose: PurposeTag, use_info: UseInfo, download_token_hash: Digest },
    IssueToken { epoch: u32, token_id: String },
    Report { epoch: u32, compliant: bool, log_ref: RefId, log_hash: Digest },
    Renew { epoch: u32, outcome: RenewalOutcome, token_id: Option<String> },
    Confirm { anon_id: AnonId, op: ModificationKind },
}

impl ContractCall {
    pub fn function(&self) -> &'static str {
        match self {
            ContractCall::Publish { .. } => FN_PUBLISH,
            ContractCall::AddRequester { .. } => FN_ADD_REQUESTER,
            ContractCall::IssueToken { .. } => FN_ISSUE_TOKEN,
            ContractCall::Report { .. } => FN_REPORT,
            ContractCall::Renew { .. } => FN_RENEW,
            ContractCall::Confirm { .. } => FN_CONFIRM,
        }
    }

    pub fn to_payload(&self) -> Payload {
        let mut p = Payload::new();
        let mut put = |k: &str, v: String| {
            p.insert(k.to_owned(), v);
        };
        match self {
            ContractCall::Publish { description, link, license, period } => {
                put("description", description.clone());
                put("link", link.clone());
                put("license", license.to_string());
                put("period", period.to_string());
            }
            ContractCall::AddRequester { license, purpose, use_info, download_token_hash } => {
                put("license", license.to_string());
                put("purpose", purpose.to_string());
                put("useInfo", serde_json::to_string(use_info).expect("use info serializes"));
                put("downloadTokenHash", download_token_hash.to_hex());
            }
            ContractCall::IssueToken { epoch, token_id } => {
                put("epoch", epoch.to_string());
                put("tokenId", token_id.clone());
            }
            ContractCall::Report { epoch, compliant, log_ref, log_hash } => {
                put("epoch", epoch.to_string());
                put("compliant", compliant.to_string());
                put("logRef", log_ref.to_string());
                put("logHash", log_hash.to_hex());
            }
            ContractCall::Renew { epoch, outcome, token_id } => {
                put("epoch", epoch.to_string());
                put("outcome", outcome.as_str().to_owned());
                if let Some(t) = token_id {
                    put("tokenId", t.clone());
                }
            }
            ContractCall::Confirm { anon_id, op } => {
                put("anonId", anon_id.to_string());
                put("opKind", op.as_str().to_owned());
            }
        }
        p
    }

    pub fn from_transaction(tx: &Transaction) -> Result<Self, ContractError> {
        let bad = |reason: String| ContractError::MalformedCall { tx: tx.tx_id.clone(), reason };
        let get = |k: &str| tx.field(k).ok_or_else(|| bad(format!("missing `{k}`")));
        fn num<T: FromStr>(v: &str, k: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("`{k}` is not a number"))
        }
        let digest = |k: &str| -> Result<Digest, ContractError> {
            Digest::from_hex(get(k)?).ok_or_else(|| bad(format!("`{k}` is not a digest")))
        };
        let epoch = || -> Result<u32, ContractError> { num(get("epoch")?, "epoch").map_err(bad) };
        Ok(match tx.function.as_str() {
            FN_PUBLISH => ContractCall::Publish {
                description: get("description")?.to_owned(),
                link: get("link")?.to_owned(),
                license: num(get("license")?, "license").map_err(bad)?,
                period: num(get("period")?, "period").map_err(bad)?,
            },
            FN_ADD_REQUESTER => ContractCall::AddRequester {
                license: LicenseCode(num(get("license")?, "license").map_err(bad)?),
                purpose: PurposeTag::parse(get("purpose")?).map_err(|e| bad(e.to_string()))?,
                use_info: serde_json::from_str(get("useInfo")?).map_err(|e| bad(e.to_string()))?,
                download_token_hash: digest("downloadTokenHash")?,
            },
            FN_ISSUE_TOKEN => ContractCall::IssueToken { epoch: epoch()?, token_id: get("tokenId")?.to_owned() },
            FN_REPORT => ContractCall::Report {
                epoch: epoch()?,
                compliant: get("compliant")?.parse().map_err(|_| bad("`compliant` is not a bool".into()))?,
                log_ref: RefId(get("logRef")?.to_owned()),
                log_hash: digest("logHash")?,
            },
            FN_RENEW => ContractCall::Renew {
                epoch: epoch()?,
                outcome: match get("outcome")? {
                    "renewed" => RenewalOutcome::Renewed,
                    "revoked" => RenewalOutcome::Revoked,
                    other => return Err(bad(format!("unknown outcome `{other}`"))),
                },
                token_id: tx.field("tokenId").map(str::to_owned),
            },
            FN_CONFIRM => ContractCall::Confirm {
                anon_id: AnonId(get("anonId")?.to_owned()),
                op: get("opKind")?.parse().map_err(bad)?,
            },
            other => return Err(bad(format!("unknown function `{other}`"))),
        })
    }
}

/// Contract address derived from the creating transaction id.
pub fn contract_address_for(tx_id: &TxId) -> ContractAddress {
    let h = Digest::of(format!("contract:{tx_id}").as_bytes());
    ContractAddress(format!("0x{}", &h.to_hex()[..20]))
}

/// All dataset contracts, keyed by address.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContractBook {
    contracts: BTreeMap<ContractAddress, DatasetContract>,
}

impl ContractBook {
    pub fn get(&self, address: &ContractAddress) -> Result<&DatasetContract, ContractError> {
        self.contracts.get(address).ok_or_else(|| ContractError::UnknownContract(address.clone()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetContract> {
        self.contracts.values()
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    fn target(&self, tx: &Transaction) -> Result<&DatasetContract, ContractError> {
        let address = tx.contract.as_ref().ok_or_else(|| ContractError::MalformedCall {
            tx: tx.tx_id.clone(),
            reason: "missing contract address".into(),
        })?;
        self.get(address)
    }

    fn active_epoch(record: &RequesterRecord) -> Result<u32, ContractError> {
        match record.state {
            RequesterState::Active(e) => Ok(e),
            RequesterState::Revoked => Err(ContractError::Revoked(record.requester.clone())),
            RequesterState::Agreed => Err(ContractError::NotRegistered(record.requester.clone())),
        }
    }

    /// Checks `call` against current state without mutating anything.
    pub fn validate(&self, tx: &Transaction, call: &ContractCall) -> Result<(), ContractError> {
        match call {
            ContractCall::Publish { license, period, .. } => {
                if tx.contract.is_some() {
                    return Err(ContractError::MalformedCall {
                        tx: tx.tx_id.clone(),
                        reason: "contract creation carries no address".into(),
                    });
                }
                decode_license(*license).map_err(|_| ContractError::InvalidLicenseCode(*license))?;
                if *period == 0 {
                    return Err(ContractError::InvalidPeriod);
                }
                Ok(())
            }
            ContractCall::AddRequester { license, .. } => {
                let c = self.target(tx)?;
                if c.requesters.contains_key(&tx.sender) {
                    return Err(ContractError::AlreadyRegistered(tx.sender.clone()));
                }
                if *license != c.license_code {
                    return Err(ContractError::LicenseMismatch { offered: *license, required: c.license_code });
                }
                Ok(())
            }
            ContractCall::IssueToken { epoch, .. } => {
                let r = self.target(tx)?.requester(&tx.sender)?;
                let current = Self::active_epoch(r)?;
                if *epoch != current {
                    return Err(ContractError::WrongEpoch { got: *epoch, current });
                }
                if r.token.as_ref().is_some_and(|t| t.epoch == current) {
                    return Err(ContractError::TokenAlreadyIssued(current));
                }
                Ok(())
            }
            ContractCall::Report { epoch, .. } => {
                let r = self.target(tx)?.requester(&tx.sender)?;
                let current = Self::active_epoch(r)?;
                if *epoch != current {
                    return Err(ContractError::WrongEpoch { got: *epoch, current });
                }
                if r.report_for(*epoch).is_some() {
                    return Err(ContractError::DuplicateReport(*epoch));
                }
                Ok(())
            }
            ContractCall::Renew { epoch, outcome, token_id } => {
                let r = self.target(tx)?.requester(&tx.sender)?;
                let current = Self::active_epoch(r)?;
                if *epoch != current {
                    return Err(ContractError::WrongEpoch { got: *epoch, current });
                }
                let report = r.report_for(current).ok_or(ContractError::NoReportForEpoch(current))?;
                let expected = if report.compliant { RenewalOutcome::Renewed } else { RenewalOutcome::Revoked };
                if *outcome != expected || (expected == RenewalOutcome::Renewed) != token_id.is_some() {
                    return Err(ContractError::MalformedCall {
                        tx: tx.tx_id.clone(),
                        reason: format!("renewal outcome must be `{}`", expected.as_str()),
                    });
                }
                Ok(())
            }
            ContractCall::Confirm { .. } => {
                let c = self.target(tx)?;
                if c.provider != tx.sender {
                    c.requester(&tx.sender)?;
                }
                Ok(())
            }
        }
    }

    /// Validates and applies one contract transaction.
    pub fn apply(&mut self, tx: &Transaction) -> Result<(), ContractError> {
        let call = ContractCall::from_transaction(tx)?;
        self.validate(tx, &call)?;
        let now = tx.timestamp;
        if let ContractCall::Publish { description, link, license, period } = call {
            let address = contract_address_for(&tx.tx_id);
            self.contracts.insert(
                address.clone(),
                DatasetContract {
                    address,
                    provider: tx.sender.clone(),
                    description,
                    link,
                    license_code: LicenseCode(license as u8),
                    period,
                    published_at: now,
                    publish_tx: tx.tx_id.clone(),
                    requesters: BTreeMap::new(),
                    provider_confirmations: Vec::new(),
                },
            );
            return Ok(());
        }
        let address = tx.contract.clone().expect("validated");
        let contract = self.contracts.get_mut(&address).expect("validated");
        let period = contract.period;
        let sender = tx.sender.clone();
        let token = |token_id: String, epoch: u32| AccessToken {
            token_id,
            requester: sender.clone(),
            dataset: address.clone(),
            epoch,
            issued_at: now,
            expires_at: now + period,
        };
        match call {
            ContractCall::Publish { .. } => unreachable!("handled above"),
            ContractCall::AddRequester { license, purpose, use_info, download_token_hash } => {
                let mut record = RequesterRecord {
                    requester: tx.sender.clone(),
                    agreed_license: license,
                    purpose,
                    use_info,
                    state: RequesterState::Agreed,
                    admitted_at: now,
                    admission_tx: tx.tx_id.clone(),
                    download_token_hash,
                    token: None,
                    reports: Vec::new(),
                    confirmations: Vec::new(),
                };
                record.state = RequesterState::Active(1);
                contract.requesters.insert(tx.sender.clone(), record);
            }
            ContractCall::IssueToken { epoch, token_id } => {
                let issued = token(token_id, epoch);
                contract.requesters.get_mut(&tx.sender).expect("validated").token = Some(issued);
            }
            ContractCall::Report { epoch, compliant, log_ref, log_hash } => {
                let r = contract.requesters.get_mut(&tx.sender).expect("validated");
                r.reports.push(ComplianceReport { requester: tx.sender.clone(), epoch, compliant, log_ref, log_hash });
            }
            ContractCall::Renew { epoch, outcome, token_id } => {
                let issued = token_id.map(|id| token(id, epoch + 1));
                let r = contract.requesters.get_mut(&tx.sender).expect("validated");
                match outcome {
                    RenewalOutcome::Renewed => {
                        r.state = RequesterState::Active(epoch + 1);
                        r.token = issued;
                    }
                    RenewalOutcome::Revoked => r.state = RequesterState::Revoked,
                }
            }
            ContractCall::Confirm { anon_id, op } => {
                let c = ModificationConfirmation { tx_id: tx.tx_id.clone(), anon_id, op, at: now };
                if contract.provider == tx.sender {
                    contract.provider_confirmations.push(c);
                } else {
                    contract.requesters.get_mut(&tx.sender).expect("validated").confirmations.push(c);
                }
            }
        }
        Ok(())
    }

    /// Rebuilds contract state from the committed blocks of `chain`.
    pub fn replay(chain: &Chain) -> Result<ContractBook, ContractError> {
        let mut book = ContractBook::default();
        for tx in chain.committed() {
            book.apply(tx)?;
        }
        Ok(book)
    }

    /// Whether `token` grants access at tick `now`.
    pub fn token_valid(&self, token: &AccessToken, now: Tick) -> bool {
        let Ok(c) = self.get(&token.dataset) else { return false };
        let Ok(r) = c.requester(&token.requester) else { return false };
        now < token.expires_at
            && r.state == RequesterState::Active(token.epoch)
            && r.token.as_ref() == Some(token)
    }
}

/// A single-use credential for fetching the dataset executable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownloadToken {
    pub secret: String,
    pub contract: ContractAddress,
    pub requester: NodeId,
}

impl DownloadToken {
    pub fn hash(&self) -> Digest {
        Digest::of(self.secret.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub download_token: DownloadToken,
    pub link: String,
    pub tx_id: TxId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Renewal {
    Renewed(AccessToken),
    Revoked(RevokedNotice),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevokedNotice {
    pub requester: NodeId,
    pub contract: ContractAddress,
    pub epoch: u32,
    pub tx_id: TxId,
}

/// Material for a right-of-access response about one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageInfo {
    pub address: ContractAddress,
    pub provider: NodeId,
    pub description: String,
    pub license_code: LicenseCode,
    pub published_at: Tick,
    pub requesters: Vec<RequesterRecord>,
}

/// Ledger plus contract state plus the seeded id source.
pub struct Platform {
    ledger: Ledger,
    contracts: ContractBook,
    rng: ChaCha8Rng,
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform").field("ledger", &self.ledger).field("contracts", &self.contracts.len()).finish()
    }
}

impl Platform {
    pub fn new(seed: u64) -> Self {
        Platform { ledger: Ledger::default(), contracts: ContractBook::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn contracts(&self) -> &ContractBook {
        &self.contracts
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// `prefix-` followed by 16 random hex digits.
    pub fn fresh_id(&mut self, prefix: &str) -> String {
        let mut b = [0u8; 8];
        self.rng.fill_bytes(&mut b);
        format!("{prefix}-{}", hex::encode(b))
    }

    pub fn register_node(&mut self, id: impl Into<NodeId>, role: Role) -> Result<(), ContractError> {
        let mut key = [0u8; 32];
        self.rng.fill_bytes(&mut key);
        self.ledger.register(Node { id: id.into(), role, key })?;
        Ok(())
    }

    fn role(&self, id: &NodeId) -> Result<Role, ContractError> {
        self.ledger.role_of(id).ok_or_else(|| ContractError::UnknownNode(id.clone()))
    }

    fn transact(
        &mut self,
        sender: &NodeId,
        contract: Option<ContractAddress>,
        call: ContractCall,
        now: Tick,
    ) -> Result<TxId, ContractError> {
        let key = self.ledger.node(sender).ok_or_else(|| ContractError::UnknownNode(sender.clone()))?.key;
        let tx_id = TxId(self.fresh_id("tx"));
        let tx = Transaction::signed(tx_id, sender.clone(), contract, call.function(), call.to_payload(), now, &key);
        self.contracts.validate(&tx, &call)?;
        let id = self.ledger.submit_transaction(tx.clone())?;
        self.contracts.apply(&tx)?;
        Ok(id)
    }

    pub fn publish_dataset(
        &mut self,
        provider: &NodeId,
        description: &str,
        link: &str,
        license: LicenseCode,
        period: Tick,
        now: Tick,
    ) -> Result<ContractAddress, ContractError> {
        self.publish_dataset_raw(provider, description, link, license.0 as i64, period, now)
    }

    /// Like [`Platform::publish_dataset`], with an unchecked integer code.
    pub fn publish_dataset_raw(
        &mut self,
        provider: &NodeId,
        description: &str,
        link: &str,
        license: i64,
        period: Tick,
        now: Tick,
    ) -> Result<ContractAddress, ContractError> {
        if self.role(provider)? != Role::Provider {
            return Err(ContractError::Unauthorized(provider.clone()));
        }
        let call = ContractCall::Publish { description: description.into(), link: link.into(), license, period };
        let tx = self.transact(provider, None, call, now)?;
        Ok(contract_address_for(&tx))
    }

    pub fn add_data_requester(
        &mut self,
        address: &ContractAddress,
        requester: &NodeId,
        offered: LicenseCode,
        purpose: PurposeTag,
        use_info: UseInfo,
        now: Tick,
    ) -> Result<Admission, ContractError> {
        let link = self.contracts.get(address)?.link.clone();
        let download_token =
            DownloadToken { secret: self.fresh_id("dl"), contract: address.clone(), requester: requester.clone() };
        let call = ContractCall::AddRequester {
            license: offered,
            purpose,
            use_info,
            download_token_hash: download_token.hash(),
        };
        let tx_id = self.transact(requester, Some(address.clone()), call, now)?;
        Ok(Admission { download_token, link, tx_id })
    }

    pub fn issue_access_token(
        &mut self,
        address: &ContractAddress,
        requester: &NodeId,
        now: Tick,
    ) -> Result<AccessToken, ContractError> {
        let record = self.contracts.get(address)?.requester(requester)?;
        let epoch = ContractBook::active_epoch(record)?;
        let call = ContractCall::IssueToken { epoch, token_id: self.fresh_id("at") };
        self.transact(requester, Some(address.clone()), call, now)?;
        Ok(self.current_token(address, requester).expect("token just issued"))
    }

    pub fn record_compliance_report(
        &mut self,
        address: &ContractAddress,
        report: ComplianceReport,
        now: Tick,
    ) -> Result<TxId, ContractError> {
        let call = ContractCall::Report {
            epoch: report.epoch,
            compliant: report.compliant,
            log_ref: report.log_ref,
            log_hash: report.log_hash,
        };
        self.transact(&report.requester, Some(address.clone()), call, now)
    }

    pub fn renew_token(
        &mut self,
        address: &ContractAddress,
        requester: &NodeId,
        now: Tick,
    ) -> Result<Renewal, ContractError> {
        let record = self.contracts.get(address)?.requester(requester)?;
        let epoch = ContractBook::active_epoch(record)?;
        let report = record.report_for(epoch).ok_or(ContractError::NoReportForEpoch(epoch))?;
        let call = if report.compliant {
            ContractCall::Renew { epoch, outcome: RenewalOutcome::Renewed, token_id: Some(self.fresh_id("at")) }
        } else {
            ContractCall::Renew { epoch, outcome: RenewalOutcome::Revoked, token_id: None }
        };
        let tx_id = self.transact(requester, Some(address.clone()), call, now)?;
        Ok(match self.current_token(address, requester) {
            Some(t) if t.epoch == epoch + 1 => Renewal::Renewed(t),
            _ => Renewal::Revoked(RevokedNotice { requester: requester.clone(), contract: address.clone(), epoch, tx_id }),
        })
    }

    pub fn current_token(&self, address: &ContractAddress, requester: &NodeId) -> Option<AccessToken> {
        self.contracts.get(address).ok()?.requesters.get(requester)?.token.clone()
    }

    fn authorize_reader(&self, address: &ContractAddress, caller: &NodeId) -> Result<&DatasetContract, ContractError> {
        let c = self.contracts.get(address)?;
        if &c.provider == caller || self.ledger.role_of(caller) == Some(Role::Authority) {
            Ok(c)
        } else {
            Err(ContractError::Unauthorized(caller.clone()))
        }
    }

    /// Every requester that ever joined, with its state. Revoked requesters
    /// are included because they may still hold a stale copy.
    pub fn get_requesters(
        &self,
        address: &ContractAddress,
        caller: &NodeId,
    ) -> Result<Vec<(NodeId, RequesterState)>, ContractError> {
        let c = self.authorize_reader(address, caller)?;
        Ok(c.requesters.values().map(|r| (r.requester.clone(), r.state)).collect())
    }

    pub fn record_modification_confirmation(
        &mut self,
        address: &ContractAddress,
        confirmer: &NodeId,
        anon_id: &AnonId,
        op: ModificationKind,
        now: Tick,
    ) -> Result<TxId, ContractError> {
        let call = ContractCall::Confirm { anon_id: anon_id.clone(), op };
        self.transact(confirmer, Some(address.clone()), call, now)
    }

    pub fn read_usage_info(&self, address: &ContractAddress, caller: &NodeId) -> Result<UsageInfo, ContractError> {
        let c = self.authorize_reader(address, caller)?;
        Ok(usage_info(c))
    }

    /// Seals pending transactions into a block, if any, using the validator
    /// selected for this height. Returns the new block's index.
    pub fn seal_block(&mut self, now: Tick) -> Result<Option<u64>, ContractError> {
        if self.ledger.pending().is_empty() {
            return Ok(None);
        }
        let Some(validator) = self.ledger.current_validator() else {
            return Ok(None);
        };
        Ok(Some(self.ledger.form_block(&validator, now)?.index))
    }
}

pub fn usage_info(c: &DatasetContract) -> UsageInfo {
    UsageInfo {
        address: c.address.clone(),
        provider: c.provider.clone(),
        description: c.description.clone(),
        license_code: c.license_code,
        published_at: c.published_at,
        requesters: c.requesters.values().cloned().collect(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::registry::PurposeKind;

    pub(crate) fn platform_with(nodes: &[(&str, Role)]) -> Platform {
        let mut p = Platform::new(7);
        for (id, role) in nodes {
            p.register_node(*id, *role).unwrap();
        }
        p
    }

    fn setup() -> (Platform, ContractAddress) {
        let mut p = platform_with(&[
            ("provider", Role::Provider),
            ("authority", Role::Authority),
            ("bob", Role::Requester),
            ("carol", Role::Requester),
        ]);
        let addr = p.publish_dataset(&"provider".into(), "cohort-1", "repo://d1", LicenseCode(63), 10, 0).unwrap();
        (p, addr)
    }

    fn purpose() -> PurposeTag {
        PurposeTag::new(PurposeKind::GeneralResearch, "").unwrap()
    }

    fn admit(p: &mut Platform, addr: &ContractAddress, who: &str) -> Admission {
        p.add_data_requester(addr, &who.into(), LicenseCode(63), purpose(), UseInfo::default(), 0).unwrap()
    }

    fn report(p: &Platform, who: &str, epoch: u32, compliant: bool) -> ComplianceReport {
        let _ = p;
        ComplianceReport {
            requester: who.into(),
            epoch,
            compliant,
            log_ref: RefId(format!("ref-{who}-{epoch}")),
            log_hash: Digest::of(b"log"),
        }
    }

    #[test]
    fn publish_commits_transaction() {
        let (mut p, addr) = setup();
        assert_eq!(p.ledger().pending()[0].function, FN_PUBLISH);
        assert_eq!(p.contracts().get(&addr).unwrap().license_code, LicenseCode(63));
        p.seal_block(1).unwrap();
        assert_eq!(p.ledger().chain().blocks[1].transactions[0].function, FN_PUBLISH);
    }

    #[test]
    fn publish_rejects_invalid_code_and_republish_makes_new_contract() {
        let (mut p, addr) = setup();
        let err = p.publish_dataset_raw(&"provider".into(), "x", "repo://d1", 64, 10, 0).unwrap_err();
        assert_eq!(err, ContractError::InvalidLicenseCode(64));
        let again = p.publish_dataset(&"provider".into(), "cohort-1", "repo://d1", LicenseCode(63), 10, 0).unwrap();
        assert_ne!(again, addr);
        assert_eq!(p.contracts().len(), 2);
        assert!(matches!(
            p.publish_dataset(&"bob".into(), "x", "y", LicenseCode(1), 10, 0),
            Err(ContractError::Unauthorized(_))
        ));
    }

    #[test]
    fn admission_requires_exact_license() {
        let (mut p, addr) = setup();
        let adm = admit(&mut p, &addr, "bob");
        assert_eq!(adm.link, "repo://d1");
        let rec = p.contracts().get(&addr).unwrap().requester(&"bob".into()).unwrap();
        assert_eq!(rec.state, RequesterState::Active(1));
        assert_eq!(rec.download_token_hash, adm.download_token.hash());
        let err = p.add_data_requester(&addr, &"carol".into(), LicenseCode(7), purpose(), UseInfo::default(), 0);
        assert_eq!(err.unwrap_err(), ContractError::LicenseMismatch { offered: LicenseCode(7), required: LicenseCode(63) });
        let err = p.add_data_requester(&addr, &"bob".into(), LicenseCode(63), purpose(), UseInfo::default(), 0);
        assert_eq!(err.unwrap_err(), ContractError::AlreadyRegistered("bob".into()));
    }

    #[test]
    fn token_issue_rules() {
        let (mut p, addr) = setup();
        admit(&mut p, &addr, "bob");
        let t = p.issue_access_token(&addr, &"bob".into(), 0).unwrap();
        assert_eq!((t.epoch, t.issued_at, t.expires_at), (1, 0, 10));
        assert!(p.contracts().token_valid(&t, 9));
        assert!(!p.contracts().token_valid(&t, 10));
        assert_eq!(p.issue_access_token(&addr, &"bob".into(), 1).unwrap_err(), ContractError::TokenAlreadyIssued(1));
        assert_eq!(
            p.issue_access_token(&addr, &"carol".into(), 1).unwrap_err(),
            ContractError::NotRegistered("carol".into())
        );
    }

    #[test]
    fn report_rules() {
        let (mut p, addr) = setup();
        admit(&mut p, &addr, "bob");
        p.record_compliance_report(&addr, report(&p, "bob", 1, true), 10).unwrap();
        assert_eq!(
            p.record_compliance_report(&addr, report(&p, "bob", 1, true), 10).unwrap_err(),
            ContractError::DuplicateReport(1)
        );
        assert_eq!(
            p.record_compliance_report(&addr, report(&p, "bob", 3, true), 10).unwrap_err(),
            ContractError::WrongEpoch { got: 3, current: 1 }
        );
    }

    #[test]
    fn compliant_report_renews() {
        let (mut p, addr) = setup();
        admit(&mut p, &addr, "bob");
        p.issue_access_token(&addr, &"bob".into(), 0).unwrap();
        assert_eq!(p.renew_token(&addr, &"bob".into(), 10).unwrap_err(), ContractError::NoReportForEpoch(1));
        p.record_compliance_report(&addr, report(&p, "bob", 1, true), 10).unwrap();
        let Renewal::Renewed(t) = p.renew_token(&addr, &"bob".into(), 10).unwrap() else { panic!("expected renewal") };
        assert_eq!((t.epoch, t.issued_at, t.expires_at), (2, 10, 20));
        let rec = p.contracts().get(&addr).unwrap().requester(&"bob".into()).unwrap();
        assert_eq!(rec.state, RequesterState::Active(2));
    }

    #[test]
    fn violating_report_revokes_for_good() {
        let (mut p, addr) = setup();
        admit(&mut p, &addr, "bob");
        let old = p.issue_access_token(&addr, &"bob".into(), 0).unwrap();
        p.record_compliance_report(&addr, report(&p, "bob", 1, false), 10).unwrap();
        assert!(matches!(p.renew_token(&addr, &"bob".into(), 10).unwrap(), Renewal::Revoked(_)));
        let bob: NodeId = "bob".into();
        assert!(!p.contracts().token_valid(&old, 5));
        assert_eq!(p.issue_access_token(&addr, &bob, 11).unwrap_err(), ContractError::Revoked(bob.clone()));
        assert_eq!(p.renew_token(&addr, &bob, 11).unwrap_err(), ContractError::Revoked(bob.clone()));
        assert!(p.record_compliance_report(&addr, report(&p, "bob", 2, true), 11).is_err());
    }

    #[test]
    fn requester_listing_authorization() {
        let (mut p, addr) = setup();
        assert!(p.get_requesters(&addr, &"provider".into()).unwrap().is_empty());
        admit(&mut p, &addr, "bob");
        admit(&mut p, &addr, "carol");
        p.record_compliance_report(&addr, report(&p, "carol", 1, false), 10).unwrap();
        p.renew_token(&addr, &"carol".into(), 10).unwrap();
        let list = p.get_requesters(&addr, &"authority".into()).unwrap();
        assert_eq!(list, vec![("bob".into(), RequesterState::Active(1)), ("carol".into(), RequesterState::Revoked)]);
        assert_eq!(p.get_requesters(&addr, &"bob".into()).unwrap_err(), ContractError::Unauthorized("bob".into()));
    }

    #[test]
    fn modification_confirmations_append() {
        let (mut p, addr) = setup();
        admit(&mut p, &addr, "bob");
        let anon = AnonId::from("anon-17");
        let t1 = p.record_modification_confirmation(&addr, &"bob".into(), &anon, ModificationKind::Erase, 3).unwrap();
        let t2 = p.record_modification_confirmation(&addr, &"bob".into(), &anon, ModificationKind::Rectify, 4).unwrap();
        p.seal_block(5).unwrap();
        let tx = p.ledger().get_transaction(&t1).unwrap();
        assert_eq!(tx.field("anonId"), Some("anon-17"));
        assert_eq!(tx.field("opKind"), Some("erase"));
        let rec = p.contracts().get(&addr).unwrap().requester(&"bob".into()).unwrap();
        assert_eq!(rec.confirmations.iter().map(|c| &c.tx_id).collect::<Vec<_>>(), vec![&t1, &t2]);
        assert_eq!(
            p.record_modification_confirmation(&addr, &"carol".into(), &anon, ModificationKind::Erase, 5).unwrap_err(),
            ContractError::NotRegistered("carol".into())
        );
    }

    #[test]
    fn usage_info_authorization() {
        let (mut p, addr) = setup();
        let info = p.read_usage_info(&addr, &"provider".into()).unwrap();
        assert!(info.requesters.is_empty());
        let who = UseInfo { identity: "Bob".into(), institution: "Uni".into(), processing: "regression".into() };
        p.add_data_requester(&addr, &"bob".into(), LicenseCode(63), purpose(), who.clone(), 0).unwrap();
        let info = p.read_usage_info(&addr, &"authority".into()).unwrap();
        assert_eq!(info.requesters[0].use_info, who);
        assert!(p.read_usage_info(&addr, &"bob".into()).is_err());
    }

    #[test]
    fn replay_matches_live_state() {
        let (mut p, addr) = setup();
        admit(&mut p, &addr, "bob");
        p.issue_access_token(&addr, &"bob".into(), 0).unwrap();
        p.record_compliance_report(&addr, report(&p, "bob", 1, true), 10).unwrap();
        p.renew_token(&addr, &"bob".into(), 10).unwrap();
        p.seal_block(10).unwrap();
        let rebuilt = ContractBook::replay(p.ledger().chain()).unwrap();
        assert_eq!(&rebuilt, p.contracts());
    }

    #[test]
    fn payload_roundtrip_through_transaction() {
        let calls = vec![
            ContractCall::Publish { description: "d".into(), link: "l".into(), license: 63, period: 10 },
            ContractCall::AddRequester {
                license: LicenseCode(63),
                purpose: PurposeTag::new(PurposeKind::Commercial, "x:y").unwrap(),
                use_info: UseInfo::default(),
                download_token_hash: Digest::of(b"t"),
            },
            ContractCall::Renew { epoch: 2, outcome: RenewalOutcome::Revoked, token_id: None },
            ContractCall::Confirm { anon_id: "a1".into(), op: ModificationKind::Rectify },
        ];
        for call in calls {
            let tx = Transaction::signed("t".into(), "n".into(), None, call.function(), call.to_payload(), 0, &[0; 32]);
            assert_eq!(ContractCall::from_transaction(&tx).unwrap(), call);
        }
    }
}
