//! Simulated append-only block ledger.
//!
//! Signed transactions queue in a pending pool; a single sealer drains the
//! pool into a block at a fixed interval (or on explicit trigger in tests)
//! and applies each transaction to its target contract in order. There is
//! no proof-of-work: the sealer stands in for the miners, and fork choice
//! is longest-valid-chain with a keep-local tie-break. Replaying all
//! transactions from genesis deterministically reproduces every hosted
//! contract's state, which is what the service providers rely on when they
//! synchronize their local chain.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write as _};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::baselines::{AttributeContractState, RoleContractState};
use crate::capcontract::{
    CallOutcome, ContractCall, ContractError, ContractKind, ContractState,
};
use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{self, sha256, Hash32, KeyPair, PublicKey, Signature};
use crate::identity::{derive_address, Address};

/// Default sealing interval, mirroring a public-network block time.
pub const DEFAULT_BLOCK_INTERVAL: Duration = Duration::from_secs(15);

const TX_SIGN_TAG: &[u8] = b"blendcac.tx.v1";
const BLOCK_HASH_TAG: &[u8] = b"blendcac.block.v1";
const CONTRACT_ADDR_TAG: &[u8] = b"blendcac.contract.v1";

/// Transaction identifier: digest of the full canonical transaction.
pub type TxId = Hash32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("bad transaction signature")]
    BadSignature,
    #[error("bad nonce: expected {expected}, got {found}")]
    BadNonce { expected: u64, found: u64 },
    #[error("unknown contract {0}")]
    UnknownContract(Address),
    #[error("height {requested} out of range (tip {tip})")]
    HeightOutOfRange { requested: u64, tip: u64 },
    #[error("malformed data: {0}")]
    Codec(#[from] CodecError),
    #[error("chain verification failed: {0}")]
    InvalidChain(ChainViolation),
    #[error("i/o error: {0}")]
    Io(String),
}

/// First rule a chain breaks, reported by verification.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainViolation {
    #[error("chain has no genesis block")]
    Empty,
    #[error("block {found} at position expecting height {expected}")]
    NonConsecutiveHeight { expected: u64, found: u64 },
    #[error("genesis prev_hash is not all-zero")]
    BadGenesisPrev,
    #[error("block {height}: prev_hash does not match parent")]
    BrokenLink { height: u64 },
    #[error("block {height}: stored hash does not match contents")]
    BadBlockHash { height: u64 },
    #[error("block {height}, tx {index}: invalid signature")]
    BadTxSignature { height: u64, index: usize },
    #[error("block {height}, tx {index}: sender does not match public key")]
    BadSenderBinding { height: u64, index: usize },
    #[error("block {height}, tx {index}: nonce {found}, expected {expected}")]
    NonceGap {
        height: u64,
        index: usize,
        expected: u64,
        found: u64,
    },
}

/// A contract call bound to a sender, sequenced by nonce and signed.
/// The attached public key must hash to the sender address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedTransaction {
    pub sender: Address,
    pub public_key: PublicKey,
    pub nonce: u64,
    pub contract: Address,
    pub call: Vec<u8>,
    pub signature: Signature,
}

impl SignedTransaction {
    /// Canonical bytes covered by the signature.
    pub fn signing_preimage(
        sender: &Address,
        nonce: u64,
        contract: &Address,
        call: &[u8],
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(TX_SIGN_TAG)
            .fixed(sender.as_bytes())
            .u64(nonce)
            .fixed(contract.as_bytes())
            .bytes(call);
        w.finish()
    }

    /// Builds and signs a transaction with the key's derived address as
    /// sender.
    pub fn sign(keypair: &KeyPair, nonce: u64, contract: Address, call: &ContractCall) -> Self {
        let sender = derive_address(&keypair.public_key());
        let call_bytes = call.encode();
        let preimage = Self::signing_preimage(&sender, nonce, &contract, &call_bytes);
        let signature = keypair.sign(&preimage);
        SignedTransaction {
            sender,
            public_key: keypair.public_key(),
            nonce,
            contract,
            call: call_bytes,
            signature,
        }
    }

    /// Signature and sender/public-key binding check.
    pub fn verify(&self) -> bool {
        if derive_address(&self.public_key) != self.sender {
            return false;
        }
        let preimage =
            Self::signing_preimage(&self.sender, self.nonce, &self.contract, &self.call);
        crypto::verify(&self.public_key, &preimage, &self.signature)
    }

    pub fn encode(&self, w: &mut Writer) {
        w.fixed(self.sender.as_bytes())
            .fixed(self.public_key.as_bytes())
            .u64(self.nonce)
            .fixed(self.contract.as_bytes())
            .bytes(&self.call)
            .fixed(self.signature.as_bytes());
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SignedTransaction {
            sender: Address(r.fixed()?),
            public_key: PublicKey(r.fixed()?),
            nonce: r.u64()?,
            contract: Address(r.fixed()?),
            call: r.bytes()?.to_vec(),
            signature: Signature(r.fixed()?),
        })
    }

    /// Digest of the full canonical encoding, including key and signature.
    pub fn id(&self) -> TxId {
        let mut w = Writer::new();
        self.encode(&mut w);
        sha256(&w.finish())
    }
}

/// One sealed block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Hash32,
    /// Milliseconds since the Unix epoch; genesis uses 0.
    pub timestamp: u64,
    pub transactions: Vec<SignedTransaction>,
    pub block_hash: Hash32,
}

impl Block {
    /// Hash over (height, prev_hash, timestamp, transaction digests).
    pub fn compute_hash(
        height: u64,
        prev_hash: &Hash32,
        timestamp: u64,
        transactions: &[SignedTransaction],
    ) -> Hash32 {
        let mut w = Writer::new();
        w.fixed(BLOCK_HASH_TAG)
            .u64(height)
            .fixed(prev_hash.as_bytes())
            .u64(timestamp)
            .u32(transactions.len() as u32);
        for tx in transactions {
            w.fixed(tx.id().as_bytes());
        }
        sha256(&w.finish())
    }

    pub fn seal(
        height: u64,
        prev_hash: Hash32,
        timestamp: u64,
        transactions: Vec<SignedTransaction>,
    ) -> Self {
        let block_hash = Self::compute_hash(height, &prev_hash, timestamp, &transactions);
        Block {
            height,
            prev_hash,
            timestamp,
            transactions,
            block_hash,
        }
    }

    pub fn genesis() -> Self {
        Block::seal(0, Hash32::ZERO, 0, Vec::new())
    }

    /// Canonical encoding, the persisted record format.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.height)
            .fixed(self.prev_hash.as_bytes())
            .u64(self.timestamp)
            .u32(self.transactions.len() as u32);
        for tx in &self.transactions {
            tx.encode(&mut w);
        }
        w.fixed(self.block_hash.as_bytes());
        w.finish()
    }

    pub fn decode(data: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(data);
        let height = r.u64()?;
        let prev_hash = Hash32(r.fixed()?);
        let timestamp = r.u64()?;
        let count = r.list_len()?;
        let mut transactions = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            transactions.push(SignedTransaction::decode(&mut r)?);
        }
        let block_hash = Hash32(r.fixed()?);
        r.finish()?;
        Ok(Block {
            height,
            prev_hash,
            timestamp,
            transactions,
            block_hash,
        })
    }
}

/// The ordered block list plus structural verification.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Chain {
    pub blocks: Vec<Block>,
}

impl Chain {
    pub fn with_genesis() -> Self {
        Chain {
            blocks: vec![Block::genesis()],
        }
    }

    /// Height of the tip block.
    pub fn tip_height(&self) -> u64 {
        self.blocks.last().map(|b| b.height).unwrap_or(0)
    }

    pub fn tip_hash(&self) -> Hash32 {
        self.blocks.last().map(|b| b.block_hash).unwrap_or(Hash32::ZERO)
    }

    /// Full verification: hash links, heights, stored hashes, signatures,
    /// sender bindings, and per-sender nonce sequences.
    pub fn verify(&self) -> Result<(), ChainViolation> {
        if self.blocks.is_empty() {
            return Err(ChainViolation::Empty);
        }
        let mut next_nonce: BTreeMap<Address, u64> = BTreeMap::new();
        let mut prev_hash = Hash32::ZERO;
        for (pos, block) in self.blocks.iter().enumerate() {
            let expected_height = pos as u64;
            if block.height != expected_height {
                return Err(ChainViolation::NonConsecutiveHeight {
                    expected: expected_height,
                    found: block.height,
                });
            }
            if pos == 0 {
                if block.prev_hash != Hash32::ZERO {
                    return Err(ChainViolation::BadGenesisPrev);
                }
            } else if block.prev_hash != prev_hash {
                return Err(ChainViolation::BrokenLink { height: block.height });
            }
            let recomputed = Block::compute_hash(
                block.height,
                &block.prev_hash,
                block.timestamp,
                &block.transactions,
            );
            if recomputed != block.block_hash {
                return Err(ChainViolation::BadBlockHash { height: block.height });
            }
            for (index, tx) in block.transactions.iter().enumerate() {
                if derive_address(&tx.public_key) != tx.sender {
                    return Err(ChainViolation::BadSenderBinding {
                        height: block.height,
                        index,
                    });
                }
                if !tx.verify() {
                    return Err(ChainViolation::BadTxSignature {
                        height: block.height,
                        index,
                    });
                }
                let expected = next_nonce.entry(tx.sender).or_insert(1);
                if tx.nonce != *expected {
                    return Err(ChainViolation::NonceGap {
                        height: block.height,
                        index,
                        expected: *expected,
                        found: tx.nonce,
                    });
                }
                *expected += 1;
            }
            prev_hash = block.block_hash;
        }
        Ok(())
    }
}

/// Convenience form of [`Chain::verify`].
pub fn verify_chain(chain: &Chain) -> bool {
    chain.verify().is_ok()
}

/// State payload of one deployed contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContractStateData {
    Capability(ContractState),
    Role(RoleContractState),
    Attribute(AttributeContractState),
}

impl ContractStateData {
    pub fn kind(&self) -> ContractKind {
        match self {
            ContractStateData::Capability(_) => ContractKind::Capability,
            ContractStateData::Role(_) => ContractKind::Role,
            ContractStateData::Attribute(_) => ContractKind::Attribute,
        }
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        match self {
            ContractStateData::Capability(s) => s.canonical_bytes(),
            ContractStateData::Role(s) => s.canonical_bytes(),
            ContractStateData::Attribute(s) => s.canonical_bytes(),
        }
    }

    pub fn as_capability(&self) -> Option<&ContractState> {
        match self {
            ContractStateData::Capability(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_role(&self) -> Option<&RoleContractState> {
        match self {
            ContractStateData::Role(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_attribute(&self) -> Option<&AttributeContractState> {
        match self {
            ContractStateData::Attribute(s) => Some(s),
            _ => None,
        }
    }
}

/// Read-only view of one contract at a height. Snapshots taken on nodes
/// holding the same chain prefix are byte-identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractSnapshot {
    pub address: Address,
    pub kind: ContractKind,
    pub owner: Address,
    pub deployed_at: u64,
    pub height: u64,
    pub state: ContractStateData,
}

impl ContractSnapshot {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(self.address.as_bytes())
            .u8(self.kind.tag())
            .fixed(self.owner.as_bytes())
            .u64(self.deployed_at)
            .u64(self.height)
            .bytes(&self.state.canonical_bytes());
        w.finish()
    }
}

/// Why an included transaction produced no state change.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("unknown contract {0}")]
    UnknownContract(Address),
    #[error("deploy must target the zero address")]
    DeployToContract,
    #[error("only deploy calls may target the zero address")]
    NotADeploy,
    #[error("malformed call: {0}")]
    Codec(#[from] CodecError),
    #[error("{0}")]
    Contract(#[from] ContractError),
}

/// Post-application record for one included transaction. Failed
/// transactions stay on-chain; the failure mark is derived state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxReceipt {
    pub tx_id: TxId,
    pub height: u64,
    pub index: usize,
    pub result: Result<CallOutcome, ApplyError>,
}

impl TxReceipt {
    pub fn succeeded(&self) -> bool {
        self.result.is_ok()
    }
}

/// Deterministic contract address: last 20 bytes of a digest over the
/// deployer and the deploying transaction's nonce.
pub fn derive_contract_address(owner: &Address, nonce: u64) -> Address {
    let mut w = Writer::new();
    w.fixed(CONTRACT_ADDR_TAG).fixed(owner.as_bytes()).u64(nonce);
    let digest = sha256(&w.finish());
    let mut out = [0u8; 20];
    out.copy_from_slice(&digest.as_bytes()[12..]);
    Address(out)
}

/// Registered contract with its live state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractEntry {
    pub kind: ContractKind,
    pub owner: Address,
    pub deployed_at: u64,
    pub state: ContractStateData,
}

/// All contract state plus per-sender nonce accounting, reproducible from
/// the chain alone.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct World {
    pub contracts: BTreeMap<Address, ContractEntry>,
    next_nonce: BTreeMap<Address, u64>,
}

impl World {
    pub fn next_nonce(&self, sender: &Address) -> u64 {
        self.next_nonce.get(sender).copied().unwrap_or(1)
    }

    /// Applies one included transaction. The nonce is consumed even when
    /// the contract call fails; a failed call leaves contract state
    /// exactly as before.
    pub fn apply_tx(&mut self, tx: &SignedTransaction, height: u64) -> Result<CallOutcome, ApplyError> {
        let entry = self.next_nonce.entry(tx.sender).or_insert(1);
        debug_assert_eq!(tx.nonce, *entry, "sealed chains carry consecutive nonces");
        *entry += 1;

        let call = ContractCall::decode(&tx.call)?;
        if tx.contract == Address::ZERO {
            let ContractCall::Deploy { kind } = call else {
                return Err(ApplyError::NotADeploy);
            };
            let address = derive_contract_address(&tx.sender, tx.nonce);
            let state = match kind {
                ContractKind::Capability => {
                    ContractStateData::Capability(ContractState::new(tx.sender))
                }
                ContractKind::Role => ContractStateData::Role(RoleContractState::new(tx.sender)),
                ContractKind::Attribute => {
                    ContractStateData::Attribute(AttributeContractState::new(tx.sender))
                }
            };
            self.contracts.insert(
                address,
                ContractEntry {
                    kind,
                    owner: tx.sender,
                    deployed_at: height,
                    state,
                },
            );
            return Ok(CallOutcome::Deployed { address, kind });
        }

        if matches!(call, ContractCall::Deploy { .. }) {
            return Err(ApplyError::DeployToContract);
        }
        let entry = self
            .contracts
            .get_mut(&tx.contract)
            .ok_or(ApplyError::UnknownContract(tx.contract))?;
        let outcome = match &mut entry.state {
            ContractStateData::Capability(s) => s.apply(tx.sender, &call, height)?,
            ContractStateData::Role(s) => s.apply(tx.sender, &call)?,
            ContractStateData::Attribute(s) => s.apply(tx.sender, &call)?,
        };
        Ok(outcome)
    }

    pub fn apply_block(&mut self, block: &Block) -> Vec<TxReceipt> {
        block
            .transactions
            .iter()
            .enumerate()
            .map(|(index, tx)| TxReceipt {
                tx_id: tx.id(),
                height: block.height,
                index,
                result: self.apply_tx(tx, block.height),
            })
            .collect()
    }

    /// Rebuilds the world by replaying `chain` up to and including
    /// `at_height`.
    pub fn replay(chain: &Chain, at_height: u64) -> (World, Vec<TxReceipt>) {
        let mut world = World::default();
        let mut receipts = Vec::new();
        for block in chain.blocks.iter().take_while(|b| b.height <= at_height) {
            receipts.extend(world.apply_block(block));
        }
        (world, receipts)
    }

    fn snapshot(&self, address: Address, height: u64) -> Option<ContractSnapshot> {
        self.contracts.get(&address).map(|entry| ContractSnapshot {
            address,
            kind: entry.kind,
            owner: entry.owner,
            deployed_at: entry.deployed_at,
            height,
            state: entry.state.clone(),
        })
    }
}

/// Append-only persistence: one `u32` length prefix plus canonical block
/// bytes per record.
pub struct ChainLog {
    file: File,
}

impl ChainLog {
    pub fn open(path: &Path) -> Result<(Self, Vec<Block>), LedgerError> {
        let mut file = OpenOptions::new()
            .read(true)
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LedgerError::Io(e.to_string()))?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)
            .map_err(|e| LedgerError::Io(e.to_string()))?;
        let blocks = Self::decode_records(&raw)?;
        Ok((ChainLog { file }, blocks))
    }

    /// Splits a record stream into blocks; rejects truncated records.
    pub fn decode_records(raw: &[u8]) -> Result<Vec<Block>, CodecError> {
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        while offset < raw.len() {
            if raw.len() - offset < 4 {
                return Err(CodecError::UnexpectedEof);
            }
            let len = u32::from_be_bytes(raw[offset..offset + 4].try_into().unwrap()) as usize;
            offset += 4;
            if len > crate::codec::MAX_FIELD_BYTES * 8 {
                return Err(CodecError::LengthOverflow(len as u32));
            }
            if raw.len() - offset < len {
                return Err(CodecError::UnexpectedEof);
            }
            blocks.push(Block::decode(&raw[offset..offset + len])?);
            offset += len;
        }
        Ok(blocks)
    }

    pub fn append(&mut self, block: &Block) -> Result<(), LedgerError> {
        let bytes = block.encode();
        let mut record = (bytes.len() as u32).to_be_bytes().to_vec();
        record.extend_from_slice(&bytes);
        self.file
            .write_all(&record)
            .and_then(|_| self.file.flush())
            .map_err(|e| LedgerError::Io(e.to_string()))
    }
}

struct NodeInner {
    chain: Chain,
    world: World,
    pending: VecDeque<SignedTransaction>,
    /// Next expected nonce per sender including pending transactions.
    pending_next_nonce: BTreeMap<Address, u64>,
    /// Contract addresses created by pending deploys, visible to submit
    /// checks before sealing.
    pending_deploys: BTreeMap<Address, ContractKind>,
    receipts: HashMap<TxId, TxReceipt>,
    log: Option<ChainLog>,
}

impl NodeInner {
    fn rebuild_from_chain(&mut self) {
        let (world, receipts) = World::replay(&self.chain, self.chain.tip_height());
        self.world = world;
        self.receipts = receipts.into_iter().map(|r| (r.tx_id, r)).collect();
        // Pending transactions whose nonces no longer line up are dropped;
        // the rest stay queued for the next block.
        let still_valid: VecDeque<SignedTransaction> = {
            let mut expected = BTreeMap::new();
            self.pending
                .drain(..)
                .filter(|tx| {
                    let e = expected
                        .entry(tx.sender)
                        .or_insert_with(|| self.world.next_nonce(&tx.sender));
                    if tx.nonce == *e {
                        *e += 1;
                        true
                    } else {
                        false
                    }
                })
                .collect()
        };
        self.pending = still_valid;
        self.pending_next_nonce.clear();
        self.pending_deploys.clear();
        for tx in &self.pending {
            self.pending_next_nonce.insert(tx.sender, tx.nonce + 1);
            if tx.contract == Address::ZERO {
                if let Ok(ContractCall::Deploy { kind }) = ContractCall::decode(&tx.call) {
                    self.pending_deploys
                        .insert(derive_contract_address(&tx.sender, tx.nonce), kind);
                }
            }
        }
    }
}

/// One ledger node: chain storage, pending pool, sealer entry points and
/// read-side RPC surface. Submit and read calls are safe from any thread;
/// block application happens only inside the sealer path.
pub struct Node {
    inner: Mutex<NodeInner>,
    block_interval: Duration,
}

impl Node {
    pub fn new(block_interval: Duration) -> Self {
        Node {
            inner: Mutex::new(NodeInner {
                chain: Chain::with_genesis(),
                world: World::default(),
                pending: VecDeque::new(),
                pending_next_nonce: BTreeMap::new(),
                pending_deploys: BTreeMap::new(),
                receipts: HashMap::new(),
                log: None,
            }),
            block_interval,
        }
    }

    /// Opens (or creates) a node backed by an append-only chain log.
    pub fn open(path: &Path, block_interval: Duration) -> Result<Self, LedgerError> {
        let (mut log, mut blocks) = ChainLog::open(path)?;
        if blocks.is_empty() {
            let genesis = Block::genesis();
            log.append(&genesis)?;
            blocks.push(genesis);
        }
        let chain = Chain { blocks };
        chain.verify().map_err(LedgerError::InvalidChain)?;
        let node = Node {
            inner: Mutex::new(NodeInner {
                chain,
                world: World::default(),
                pending: VecDeque::new(),
                pending_next_nonce: BTreeMap::new(),
                pending_deploys: BTreeMap::new(),
                receipts: HashMap::new(),
                log: Some(log),
            }),
            block_interval,
        };
        node.inner.lock().unwrap().rebuild_from_chain();
        Ok(node)
    }

    pub fn block_interval(&self) -> Duration {
        self.block_interval
    }

    /// Validates and enqueues a transaction.
    pub fn submit_transaction(&self, tx: SignedTransaction) -> Result<TxId, LedgerError> {
        if !tx.verify() {
            return Err(LedgerError::BadSignature);
        }
        let mut inner = self.inner.lock().unwrap();
        let expected = inner
            .pending_next_nonce
            .get(&tx.sender)
            .copied()
            .unwrap_or_else(|| inner.world.next_nonce(&tx.sender));
        if tx.nonce != expected {
            return Err(LedgerError::BadNonce {
                expected,
                found: tx.nonce,
            });
        }

        let call = ContractCall::decode(&tx.call)?;
        if tx.contract == Address::ZERO {
            let ContractCall::Deploy { kind } = call else {
                return Err(LedgerError::UnknownContract(Address::ZERO));
            };
            let address = derive_contract_address(&tx.sender, tx.nonce);
            inner.pending_deploys.insert(address, kind);
        } else if !inner.world.contracts.contains_key(&tx.contract)
            && !inner.pending_deploys.contains_key(&tx.contract)
        {
            return Err(LedgerError::UnknownContract(tx.contract));
        }

        let id = tx.id();
        inner.pending_next_nonce.insert(tx.sender, tx.nonce + 1);
        inner.pending.push_back(tx);
        Ok(id)
    }

    /// Drains the pending queue in FIFO order into a new block and applies
    /// it. An empty block is legal.
    pub fn seal_block(&self, now_ms: u64) -> Result<Block, LedgerError> {
        let mut inner = self.inner.lock().unwrap();
        let transactions: Vec<SignedTransaction> = inner.pending.drain(..).collect();
        inner.pending_next_nonce.clear();
        inner.pending_deploys.clear();

        let height = inner.chain.tip_height() + 1;
        let prev_hash = inner.chain.tip_hash();
        let block = Block::seal(height, prev_hash, now_ms, transactions);

        let receipts = inner.world.apply_block(&block);
        for r in receipts {
            inner.receipts.insert(r.tx_id, r);
        }
        if let Some(log) = inner.log.as_mut() {
            log.append(&block)?;
        }
        inner.chain.blocks.push(block.clone());
        Ok(block)
    }

    /// Seals when the interval has elapsed since the tip block.
    pub fn seal_if_due(&self, now_ms: u64) -> Result<Option<Block>, LedgerError> {
        let due = {
            let inner = self.inner.lock().unwrap();
            let last_ts = inner.chain.blocks.last().map(|b| b.timestamp).unwrap_or(0);
            now_ms >= last_ts.saturating_add(self.block_interval.as_millis() as u64)
        };
        if due {
            self.seal_block(now_ms).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn chain_head(&self) -> (u64, Hash32) {
        let inner = self.inner.lock().unwrap();
        (inner.chain.tip_height(), inner.chain.tip_hash())
    }

    pub fn get_block(&self, height: u64) -> Option<Block> {
        let inner = self.inner.lock().unwrap();
        inner.chain.blocks.get(height as usize).cloned()
    }

    pub fn pending_len(&self) -> usize {
        self.inner.lock().unwrap().pending.len()
    }

    pub fn chain_snapshot(&self) -> Chain {
        self.inner.lock().unwrap().chain.clone()
    }

    pub fn receipt(&self, id: &TxId) -> Option<TxReceipt> {
        self.inner.lock().unwrap().receipts.get(id).cloned()
    }

    pub fn next_nonce(&self, sender: &Address) -> u64 {
        let inner = self.inner.lock().unwrap();
        inner
            .pending_next_nonce
            .get(sender)
            .copied()
            .unwrap_or_else(|| inner.world.next_nonce(sender))
    }

    /// Read-only snapshot of a contract at a height (default: tip).
    /// Historical queries replay the chain prefix.
    pub fn get_contract_state(
        &self,
        contract: Address,
        at_height: Option<u64>,
    ) -> Result<ContractSnapshot, LedgerError> {
        let inner = self.inner.lock().unwrap();
        let tip = inner.chain.tip_height();
        let at = at_height.unwrap_or(tip);
        if at > tip {
            return Err(LedgerError::HeightOutOfRange { requested: at, tip });
        }
        let snapshot = if at == tip {
            inner.world.snapshot(contract, at)
        } else {
            let (world, _) = World::replay(&inner.chain, at);
            world.snapshot(contract, at)
        };
        match snapshot {
            Some(s) if s.deployed_at <= at => Ok(s),
            _ => Err(LedgerError::UnknownContract(contract)),
        }
    }

    /// Longest-valid-chain sync: adopts the peer chain only when it
    /// verifies and is strictly longer; equal length keeps the local
    /// chain.
    pub fn sync(&self, peer_chain: &Chain) -> bool {
        {
            let inner = self.inner.lock().unwrap();
            if peer_chain.blocks.len() <= inner.chain.blocks.len() {
                return false;
            }
        }
        if peer_chain.verify().is_err() {
            return false;
        }
        let mut inner = self.inner.lock().unwrap();
        if peer_chain.blocks.len() <= inner.chain.blocks.len() {
            return false;
        }
        inner.chain = peer_chain.clone();
        inner.rebuild_from_chain();
        true
    }

    pub fn verify(&self) -> Result<(), ChainViolation> {
        self.inner.lock().unwrap().chain.verify()
    }
}

/// The read/write surface the gateway uses to talk to a node.
pub trait LedgerRpc: Send + Sync {
    fn submit_transaction(&self, tx: SignedTransaction) -> Result<TxId, LedgerError>;
    fn get_contract_state(
        &self,
        contract: Address,
        at_height: Option<u64>,
    ) -> Result<ContractSnapshot, LedgerError>;
    fn get_block(&self, height: u64) -> Option<Block>;
    fn chain_head(&self) -> (u64, Hash32);
}

impl LedgerRpc for Node {
    fn submit_transaction(&self, tx: SignedTransaction) -> Result<TxId, LedgerError> {
        Node::submit_transaction(self, tx)
    }

    fn get_contract_state(
        &self,
        contract: Address,
        at_height: Option<u64>,
    ) -> Result<ContractSnapshot, LedgerError> {
        Node::get_contract_state(self, contract, at_height)
    }

    fn get_block(&self, height: u64) -> Option<Block> {
        Node::get_block(self, height)
    }

    fn chain_head(&self) -> (u64, Hash32) {
        Node::chain_head(self)
    }
}

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Join-on-drop handle for the background tasks (sealer, sync, refresh).
pub struct TaskHandle {
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl TaskHandle {
    pub fn spawn<F: FnMut() + Send + 'static>(poll_every: Duration, mut tick: F) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let join = std::thread::spawn(move || {
            while !stop2.load(Ordering::Relaxed) {
                tick();
                std::thread::sleep(poll_every);
            }
        });
        TaskHandle {
            stop,
            join: Some(join),
        }
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

impl Drop for TaskHandle {
    fn drop(&mut self) {
        self.stop();
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

fn poll_interval(block_interval: Duration) -> Duration {
    (block_interval / 8).clamp(Duration::from_millis(5), Duration::from_millis(100))
}

/// Runs the interval sealer until the handle is dropped.
pub fn start_sealer(node: Arc<Node>) -> TaskHandle {
    let poll = poll_interval(node.block_interval());
    TaskHandle::spawn(poll, move || {
        let _ = node.seal_if_due(now_ms());
    })
}

/// Regularly pulls the peer chain and applies the longest-chain rule.
pub fn start_sync(node: Arc<Node>, peer: Arc<Node>, every: Duration) -> TaskHandle {
    TaskHandle::spawn(every, move || {
        let snapshot = peer.chain_snapshot();
        node.sync(&snapshot);
    })
}
