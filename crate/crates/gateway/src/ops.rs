//! Transaction plumbing shared by the CLI, the HTTP handlers and the
//! benchmark harness: build, submit, seal, inspect the receipt.

use std::sync::Arc;

use anyhow::{anyhow, bail, Result};

use blendcac::capcontract::{CallOutcome, ContractCall};
use blendcac::identity::derive_address;
use blendcac::ledger::{now_ms, ApplyError, TxReceipt};
use blendcac::{Address, KeyPair, Node};

/// Signs and submits `call` from `keypair`, using the node's next nonce.
pub fn submit(node: &Arc<Node>, keypair: &KeyPair, contract: Address, call: &ContractCall) -> Result<blendcac::Hash32> {
    let sender = derive_address(&keypair.public_key());
    let nonce = node.next_nonce(&sender);
    let tx = blendcac::SignedTransaction::sign(keypair, nonce, contract, call);
    node.submit_transaction(tx).map_err(|e| anyhow!(e))
}

/// Submit plus an immediate explicit seal; returns the receipt. The CLI
/// and the owner-side HTTP endpoints run in the sealing process, so their
/// mutating commands land on-chain synchronously.
pub fn submit_sealed(
    node: &Arc<Node>,
    keypair: &KeyPair,
    contract: Address,
    call: &ContractCall,
) -> Result<TxReceipt> {
    let id = submit(node, keypair, contract, call)?;
    node.seal_block(now_ms()).map_err(|e| anyhow!(e))?;
    node.receipt(&id)
        .ok_or_else(|| anyhow!("transaction {id} not sealed"))
}

/// Unwraps a receipt into its outcome, surfacing contract-level failures.
pub fn expect_outcome(receipt: TxReceipt) -> Result<CallOutcome> {
    match receipt.result {
        Ok(outcome) => Ok(outcome),
        Err(err) => bail!(ReceiptFailure(err)),
    }
}

/// Wrapper that keeps the typed apply error available for exit-code
/// mapping.
#[derive(Debug, thiserror::Error)]
#[error("transaction failed: {0}")]
pub struct ReceiptFailure(pub ApplyError);
