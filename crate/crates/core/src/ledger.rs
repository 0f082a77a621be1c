//! Append-only, hash-linked transaction ledger.
//!
//! Every block commits to its predecessor through `prev_hash`, and every
//! block hash covers the full canonical encoding of its transactions
//! (signatures included), so any mutation of a committed transaction or
//! block header surfaces in [`verify_chain`].
//!
//! Canonical encoding: every field is written in declaration order as an
//! 8-byte big-endian length followed by its bytes; integers are written as
//! 8-byte big-endian values; an optional field is a one-byte presence tag
//! followed by the value when present; the payload is its entry count
//! followed by `key, value` pairs in ascending key order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub type Tick = u64;

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Identity of a simulated network participant.
    NodeId
);
string_id!(TxId);
string_id!(ContractAddress);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Provider,
    Requester,
    Authority,
    ReplicaHolder,
}

impl Role {
    /// Full nodes hold the complete chain and take part in block formation.
    pub fn is_full_node(self) -> bool {
        matches!(self, Role::Provider | Role::Authority)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Provider => "provider",
            Role::Requester => "requester",
            Role::Authority => "authority",
            Role::ReplicaHolder => "replica-holder",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "provider" => Ok(Role::Provider),
            "requester" => Ok(Role::Requester),
            "authority" => Ok(Role::Authority),
            "replica-holder" | "holder" => Ok(Role::ReplicaHolder),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// A registered node and its signing material.
///
/// Signatures are HMAC-SHA256 tags, so the verification key is the node's
/// shared secret.
#[derive(Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub role: Role,
    pub key: [u8; 32],
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node").field("id", &self.id).field("role", &self.role).finish_non_exhaustive()
    }
}

/// Length-prefixed canonical byte encoder.
#[derive(Default)]
pub struct Canonical(Vec<u8>);

impl Canonical {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.extend_from_slice(&(b.len() as u64).to_be_bytes());
        self.0.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn opt_str(&mut self, s: Option<&str>) -> &mut Self {
        match s {
            None => self.0.push(0),
            Some(s) => {
                self.0.push(1);
                self.str(s);
            }
        }
        self
    }

    pub fn raw(&mut self, b: &[u8]) -> &mut Self {
        self.0.extend_from_slice(b);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

pub type Payload = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub tx_id: TxId,
    pub sender: NodeId,
    /// `None` for contract creation.
    pub contract: Option<ContractAddress>,
    pub function: String,
    pub payload: Payload,
    pub timestamp: Tick,
    pub signature: Digest,
}

impl Transaction {
    pub fn signed(
        tx_id: TxId,
        sender: NodeId,
        contract: Option<ContractAddress>,
        function: impl Into<String>,
        payload: Payload,
        timestamp: Tick,
        key: &[u8; 32],
    ) -> Self {
        let mut tx = Transaction {
            tx_id,
            sender,
            contract,
            function: function.into(),
            payload,
            timestamp,
            signature: Digest::ZERO,
        };
        tx.signature = tag(key, &tx.signing_bytes());
        tx
    }

    /// Canonical encoding of every field except the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut c = Canonical::new();
        c.str(self.tx_id.as_str())
            .str(self.sender.as_str())
            .opt_str(self.contract.as_ref().map(|a| a.as_str()))
            .str(&self.function)
            .u64(self.payload.len() as u64);
        for (k, v) in &self.payload {
            c.str(k).str(v);
        }
        c.u64(self.timestamp);
        c.finish()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut c = Canonical::new();
        c.raw(&self.signing_bytes()).raw(&self.signature.0);
        c.finish()
    }

    pub fn verify_signature(&self, key: &[u8; 32]) -> bool {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(&self.signing_bytes());
        mac.verify_slice(&self.signature.0).is_ok()
    }

    pub fn field(&self, key: &str) -> Option<&str> {
        self.payload.get(key).map(String::as_str)
    }
}

fn tag(key: &[u8; 32], msg: &[u8]) -> Digest {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(msg);
    Digest(mac.finalize().into_bytes().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub timestamp: Tick,
    pub transactions: Vec<Transaction>,
    pub block_hash: Digest,
}

impl Block {
    pub fn genesis() -> Self {
        Self::seal(0, Digest::ZERO, 0, Vec::new())
    }

    pub fn seal(index: u64, prev_hash: Digest, timestamp: Tick, transactions: Vec<Transaction>) -> Self {
        let mut block = Block { index, prev_hash, timestamp, transactions, block_hash: Digest::ZERO };
        block.block_hash = block.compute_hash();
        block
    }

    pub fn compute_hash(&self) -> Digest {
        let mut c = Canonical::new();
        c.u64(self.index).raw(&self.prev_hash.0).u64(self.timestamp).u64(self.transactions.len() as u64);
        for tx in &self.transactions {
            c.bytes(&tx.canonical_bytes());
        }
        Digest::of(&c.finish())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub blocks: Vec<Block>,
    pub pending: Vec<Transaction>,
}

impl Default for Chain {
    fn default() -> Self {
        Chain { blocks: vec![Block::genesis()], pending: Vec::new() }
    }
}

impl Chain {
    pub fn head(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn committed(&self) -> impl Iterator<Item = &Transaction> {
        self.blocks.iter().flat_map(|b| b.transactions.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureKind {
    BadGenesis,
    IndexMismatch { expected: u64, found: u64 },
    BrokenLink,
    HashMismatch,
    EmptyBlock,
    DuplicateTx(TxId),
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureKind::BadGenesis => f.write_str("genesis block malformed"),
            FailureKind::IndexMismatch { expected, found } => {
                write!(f, "index mismatch: expected {expected}, found {found}")
            }
            FailureKind::BrokenLink => f.write_str("prev_hash does not match predecessor"),
            FailureKind::HashMismatch => f.write_str("block_hash does not match contents"),
            FailureKind::EmptyBlock => f.write_str("non-genesis block without transactions"),
            FailureKind::DuplicateTx(id) => write!(f, "transaction {id} appears twice"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainFailure {
    /// Position of the offending block in the chain.
    pub position: usize,
    pub kind: FailureKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub ok: bool,
    pub failure: Option<ChainFailure>,
    pub blocks_checked: usize,
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => write!(f, "ok ({} blocks)", self.blocks_checked),
            Some(fail) => write!(f, "FAILED at block {}: {}", fail.position, fail.kind),
        }
    }
}

/// Checks every block and chain invariant, stopping at the first failure.
pub fn verify_chain(chain: &Chain) -> VerificationReport {
    let fail = |position, kind| VerificationReport {
        ok: false,
        failure: Some(ChainFailure { position, kind }),
        blocks_checked: position,
    };
    let mut seen: HashSet<&TxId> = HashSet::new();
    for (i, block) in chain.blocks.iter().enumerate() {
        if block.index != i as u64 {
            return fail(i, FailureKind::IndexMismatch { expected: i as u64, found: block.index });
        }
        if block.compute_hash() != block.block_hash {
            return fail(i, FailureKind::HashMismatch);
        }
        if i == 0 {
            if block.prev_hash != Digest::ZERO || !block.transactions.is_empty() {
                return fail(0, FailureKind::BadGenesis);
            }
            continue;
        }
        if block.prev_hash != chain.blocks[i - 1].block_hash {
            return fail(i, FailureKind::BrokenLink);
        }
        if block.transactions.is_empty() {
            return fail(i, FailureKind::EmptyBlock);
        }
        for tx in &block.transactions {
            if !seen.insert(&tx.tx_id) {
                return fail(i, FailureKind::DuplicateTx(tx.tx_id.clone()));
            }
        }
    }
    if chain.blocks.is_empty() {
        return fail(0, FailureKind::BadGenesis);
    }
    VerificationReport { ok: true, failure: None, blocks_checked: chain.blocks.len() }
}

/// Chooses which full node may seal the block at a given height.
pub trait ValidationRule: Send + Sync {
    fn select(&self, height: u64, candidates: &[NodeId]) -> Option<NodeId>;
}

/// Proof-of-authority rotation over full nodes in id order.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoundRobin;

impl ValidationRule for RoundRobin {
    fn select(&self, height: u64, candidates: &[NodeId]) -> Option<NodeId> {
        if candidates.is_empty() {
            return None;
        }
        Some(candidates[(height % candidates.len() as u64) as usize].clone())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("invalid signature on transaction {0}")]
    InvalidSignature(TxId),
    #[error("unknown sender {0}")]
    UnknownSender(NodeId),
    #[error("duplicate transaction id {0}")]
    DuplicateTxId(TxId),
    #[error("{caller} is not the validator for this round (expected {expected:?})")]
    NotCurrentValidator { caller: NodeId, expected: Option<NodeId> },
    #[error("no pending transactions")]
    EmptyPending,
    #[error("transaction {0} not found in a committed block")]
    NotFound(TxId),
    #[error("node {0} already registered")]
    DuplicateNode(NodeId),
    #[error("chain import failed at line {line}: {reason}")]
    Import { line: usize, reason: String },
}

/// The shared ledger: canonical chain, node directory and validator rule.
pub struct Ledger {
    chain: Chain,
    nodes: BTreeMap<NodeId, Node>,
    seen: HashSet<TxId>,
    committed: HashMap<TxId, (usize, usize)>,
    rule: Box<dyn ValidationRule>,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger")
            .field("height", &self.chain.blocks.len())
            .field("pending", &self.chain.pending.len())
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new(Box::new(RoundRobin))
    }
}

impl Ledger {
    pub fn new(rule: Box<dyn ValidationRule>) -> Self {
        Ledger {
            chain: Chain::default(),
            nodes: BTreeMap::new(),
            seen: HashSet::new(),
            committed: HashMap::new(),
            rule,
        }
    }

    pub fn register(&mut self, node: Node) -> Result<(), LedgerError> {
        if self.nodes.contains_key(&node.id) {
            return Err(LedgerError::DuplicateNode(node.id));
        }
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn role_of(&self, id: &NodeId) -> Option<Role> {
        self.nodes.get(id).map(|n| n.role)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn validators(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.role.is_full_node()).map(|n| n.id.clone()).collect()
    }

    /// Validator entitled to seal the next block.
    pub fn current_validator(&self) -> Option<NodeId> {
        self.rule.select(self.chain.blocks.len() as u64, &self.validators())
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.chain.pending
    }

    pub fn height(&self) -> usize {
        self.chain.blocks.len()
    }

    pub fn submit_transaction(&mut self, tx: Transaction) -> Result<TxId, LedgerError> {
        let node = self.nodes.get(&tx.sender).ok_or_else(|| LedgerError::UnknownSender(tx.sender.clone()))?;
        if !tx.verify_signature(&node.key) {
            return Err(LedgerError::InvalidSignature(tx.tx_id));
        }
        if self.seen.contains(&tx.tx_id) {
            return Err(LedgerError::DuplicateTxId(tx.tx_id));
        }
        let id = tx.tx_id.clone();
        self.seen.insert(id.clone());
        self.chain.pending.push(tx);
        Ok(id)
    }

    pub fn form_block(&mut self, caller: &NodeId, now: Tick) -> Result<&Block, LedgerError> {
        let expected = self.current_validator();
        if expected.as_ref() != Some(caller) {
            return Err(LedgerError::NotCurrentValidator { caller: caller.clone(), expected });
        }
        if self.chain.pending.is_empty() {
            return Err(LedgerError::EmptyPending);
        }
        let txs = std::mem::take(&mut self.chain.pending);
        let position = self.chain.blocks.len();
        for (i, tx) in txs.iter().enumerate() {
            self.committed.insert(tx.tx_id.clone(), (position, i));
        }
        let block = Block::seal(position as u64, self.chain.head().block_hash, now, txs);
        self.chain.blocks.push(block);
        Ok(self.chain.head())
    }

    /// Looks up a committed transaction; pending ones are not returned.
    pub fn get_transaction(&self, id: &TxId) -> Result<&Transaction, LedgerError> {
        let (b, t) = self.committed.get(id).ok_or_else(|| LedgerError::NotFound(id.clone()))?;
        Ok(&self.chain.blocks[*b].transactions[*t])
    }

    pub fn verify(&self) -> VerificationReport {
        verify_chain(&self.chain)
    }

    /// Committed transactions whose signature does not verify against the
    /// sender's registered key.
    pub fn forged_transactions(&self) -> Vec<TxId> {
        self.chain
            .committed()
            .filter(|tx| self.nodes.get(&tx.sender).is_none_or(|n| !tx.verify_signature(&n.key)))
            .map(|tx| tx.tx_id.clone())
            .collect()
    }

    #[doc(hidden)]
    pub fn chain_mut_for_tests(&mut self) -> &mut Chain {
        &mut self.chain
    }
}

/// Serializes committed blocks as JSON lines, one block per line, fields in
/// declaration order and payload keys sorted.
pub fn export_chain(chain: &Chain) -> String {
    let mut out = String::new();
    for block in &chain.blocks {
        out.push_str(&serde_json::to_string(block).expect("blocks always serialize"));
        out.push('\n');
    }
    out
}

pub fn import_chain(text: &str) -> Result<Chain, LedgerError> {
    let mut blocks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let block: Block =
            serde_json::from_str(line).map_err(|e| LedgerError::Import { line: i + 1, reason: e.to_string() })?;
        blocks.push(block);
    }
    Ok(Chain { blocks, pending: Vec::new() })
}

/// SHA-256 of the exported chain text.
pub fn chain_digest(chain: &Chain) -> Digest {
    Digest::of(export_chain(chain).as_bytes())
}

/// A full node's local copy of the chain, fed by block broadcast.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChainReplica {
    blocks: Vec<Block>,
}

impl ChainReplica {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn as_chain(&self) -> Chain {
        Chain { blocks: self.blocks.clone(), pending: Vec::new() }
    }

    /// Appends any blocks the canonical chain has beyond the local copy.
    /// Fails if the already-held prefix differs from the canonical chain.
    pub fn sync(&mut self, canonical: &Chain) -> Result<usize, ChainFailure> {
        for (i, held) in self.blocks.iter().enumerate() {
            match canonical.blocks.get(i) {
                Some(b) if b.block_hash == held.block_hash && b.index == held.index => {}
                _ => return Err(ChainFailure { position: i, kind: FailureKind::BrokenLink }),
            }
        }
        let start = self.blocks.len();
        for block in &canonical.blocks[start..] {
            let linked = match self.blocks.last() {
                None => block.index == 0 && block.prev_hash == Digest::ZERO,
                Some(prev) => block.prev_hash == prev.block_hash && block.index == prev.index + 1,
            };
            if !linked {
                return Err(ChainFailure { position: block.index as usize, kind: FailureKind::BrokenLink });
            }
            if block.compute_hash() != block.block_hash {
                return Err(ChainFailure { position: block.index as usize, kind: FailureKind::HashMismatch });
            }
            self.blocks.push(block.clone());
        }
        Ok(self.blocks.len() - start)
    }
}
