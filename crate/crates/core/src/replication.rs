//! Off-chain replication of per-epoch event logs onto randomly chosen
//! nodes, with hash-verified retrieval.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{ContractAddress, Digest, Ledger, NodeId, Role, Tick};
use crate::monitor::{EventLog, LogParseError};

pub const DEFAULT_REPLICAS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RefId(pub String);

impl fmt::Display for RefId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RefId {
    fn from(s: &str) -> Self {
        RefId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaRef {
    pub ref_id: RefId,
    pub requester: NodeId,
    pub dataset: ContractAddress,
    pub epoch: u32,
    pub created_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaEntry {
    pub reference: ReplicaRef,
    pub holders: Vec<NodeId>,
    pub log_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaAudit {
    pub reference: ReplicaRef,
    pub log_hash: Digest,
    /// Each holder with whether its copy still hashes to `log_hash`.
    pub holders: Vec<(NodeId, bool)>,
    pub intact: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplicationError {
    #[error("need {needed} eligible nodes, only {eligible} available")]
    InsufficientNodes { needed: usize, eligible: usize },
    #[error("unknown replica reference {0}")]
    UnknownRef(RefId),
    #[error("every replica of {0} fails hash verification")]
    AllReplicasCorrupt(RefId),
    #[error("{0} may not audit replicas")]
    Unauthorized(NodeId),
    #[error("replication module unavailable")]
    Unavailable,
    #[error("log for {requester} epoch {epoch} already replicated as {existing}")]
    AlreadyReplicated { requester: NodeId, epoch: u32, existing: RefId },
    #[error(transparent)]
    Parse(#[from] LogParseError),
}

/// The replication module: the replica map plus each holder's local store.
#[derive(Debug, Clone)]
pub struct Replication {
    k: usize,
    available: bool,
    map: BTreeMap<RefId, ReplicaEntry>,
    by_epoch: BTreeMap<(NodeId, ContractAddress, u32), RefId>,
    stores: BTreeMap<NodeId, BTreeMap<RefId, Vec<u8>>>,
}

impl Default for Replication {
    fn default() -> Self {
        Self::new(DEFAULT_REPLICAS)
    }
}

impl Replication {
    pub fn new(k: usize) -> Self {
        Replication { k: k.max(1), available: true, map: BTreeMap::new(), by_epoch: BTreeMap::new(), stores: BTreeMap::new() }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn set_available(&mut self, up: bool) {
        self.available = up;
    }

    pub fn is_available(&self) -> bool {
        self.available
    }

    /// Places byte-identical copies of `log` on `k` nodes drawn from
    /// `candidates` (the producing requester is never chosen).
    pub fn replicate_log<R: Rng + ?Sized>(
        &mut self,
        log: &EventLog,
        candidates: &[NodeId],
        now: Tick,
        rng: &mut R,
    ) -> Result<ReplicaRef, ReplicationError> {
        if !self.available {
            return Err(ReplicationError::Unavailable);
        }
        let key = (log.requester.clone(), log.dataset.clone(), log.epoch);
        if let Some(existing) = self.by_epoch.get(&key) {
            return Err(ReplicationError::AlreadyReplicated {
                requester: log.requester.clone(),
                epoch: log.epoch,
                existing: existing.clone(),
            });
        }
        let mut eligible: Vec<NodeId> = candidates.iter().filter(|n| **n != log.requester).cloned().collect();
        eligible.sort();
        eligible.dedup();
        if eligible.len() < self.k {
            return Err(ReplicationError::InsufficientNodes { needed: self.k, eligible: eligible.len() });
        }
        let holders: Vec<NodeId> = eligible.choose_multiple(rng, self.k).cloned().collect();
        let ref_id = RefId(format!("log-{:016x}", rng.gen::<u64>()));
        let bytes = log.to_bytes();
        let log_hash = Digest::of(&bytes);
        for h in &holders {
            self.stores.entry(h.clone()).or_default().insert(ref_id.clone(), bytes.clone());
        }
        let reference = ReplicaRef {
            ref_id: ref_id.clone(),
            requester: log.requester.clone(),
            dataset: log.dataset.clone(),
            epoch: log.epoch,
            created_at: now,
        };
        self.map.insert(ref_id.clone(), ReplicaEntry { reference: reference.clone(), holders, log_hash });
        self.by_epoch.insert(key, ref_id);
        Ok(reference)
    }

    pub fn entry(&self, id: &RefId) -> Result<&ReplicaEntry, ReplicationError> {
        self.map.get(id).ok_or_else(|| ReplicationError::UnknownRef(id.clone()))
    }

    fn copy_intact(&self, entry: &ReplicaEntry, holder: &NodeId) -> Option<&[u8]> {
        let bytes = self.stores.get(holder)?.get(&entry.reference.ref_id)?;
        (Digest::of(bytes) == entry.log_hash).then_some(bytes.as_slice())
    }

    /// Returns the first holder's copy whose bytes hash to the recorded hash.
    pub fn retrieve_bytes(&self, id: &RefId) -> Result<Vec<u8>, ReplicationError> {
        let entry = self.entry(id)?;
        entry
            .holders
            .iter()
            .find_map(|h| self.copy_intact(entry, h))
            .map(<[u8]>::to_vec)
            .ok_or_else(|| ReplicationError::AllReplicasCorrupt(id.clone()))
    }

    pub fn retrieve_log(&self, id: &RefId) -> Result<EventLog, ReplicationError> {
        let entry = self.entry(id)?;
        let bytes = self.retrieve_bytes(id)?;
        let r = &entry.reference;
        Ok(EventLog::parse(&bytes, r.requester.clone(), r.dataset.clone(), r.epoch)?)
    }

    pub fn audit_replicas(&self, ledger: &Ledger, caller: &NodeId) -> Result<Vec<ReplicaAudit>, ReplicationError> {
        if ledger.role_of(caller) != Some(Role::Authority) {
            return Err(ReplicationError::Unauthorized(caller.clone()));
        }
        Ok(self
            .map
            .values()
            .map(|e| {
                let holders: Vec<(NodeId, bool)> =
                    e.holders.iter().map(|h| (h.clone(), self.copy_intact(e, h).is_some())).collect();
                let intact = holders.iter().all(|(_, ok)| *ok);
                ReplicaAudit { reference: e.reference.clone(), log_hash: e.log_hash, holders, intact }
            })
            .collect())
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplicaEntry> {
        self.map.values()
    }

    /// Raw copy held by `holder`, if any.
    pub fn held_copy(&self, holder: &NodeId, id: &RefId) -> Option<&[u8]> {
        self.stores.get(holder)?.get(id).map(Vec::as_slice)
    }

    /// Flips one byte of `holder`'s copy (or appends one to an empty copy).
    /// Returns false if the holder has no copy.
    pub fn corrupt_copy(&mut self, holder: &NodeId, id: &RefId, at: usize) -> bool {
        let Some(bytes) = self.stores.get_mut(holder).and_then(|s| s.get_mut(id)) else { return false };
        if bytes.is_empty() {
            bytes.push(b'x');
        } else {
            let i = at % bytes.len();
            bytes[i] ^= 0x01;
        }
        true
    }

    pub fn drop_copy(&mut self, holder: &NodeId, id: &RefId) -> bool {
        self.stores.get_mut(holder).and_then(|s| s.remove(id)).is_some()
    }
}
