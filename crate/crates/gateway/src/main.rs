use clap::Parser;

use blendcac::capcontract::ContractError;
use blendcac::identity::IdentityError;
use blendcac::ledger::{ApplyError, LedgerError};
use blendcac_gateway::cli::{run, Cli, NotFoundError};
use blendcac_gateway::ops::ReceiptFailure;

/// Exit codes: 0 ok, 1 failure, 2 usage (clap), 3 unauthorized,
/// 4 not found, 5 delegation depth exhausted, 6 conflict.
fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<NotFoundError>().is_some() {
        return 4;
    }
    if let Some(ReceiptFailure(apply)) = err.downcast_ref::<ReceiptFailure>() {
        return match apply {
            ApplyError::Contract(ContractError::NotOwner) => 3,
            ApplyError::Contract(ContractError::NoToken)
            | ApplyError::Contract(ContractError::NotADelegatee)
            | ApplyError::UnknownContract(_) => 4,
            ApplyError::Contract(ContractError::DepthExhausted { .. }) => 5,
            ApplyError::Contract(ContractError::SubjectAlreadyHasToken)
            | ApplyError::Contract(ContractError::DuplicateDelegatee)
            | ApplyError::Contract(ContractError::SelfDelegation)
            | ApplyError::Contract(ContractError::TokenDisabled) => 6,
            _ => 1,
        };
    }
    if let Some(ledger) = err.downcast_ref::<LedgerError>() {
        return match ledger {
            LedgerError::BadSignature => 3,
            LedgerError::UnknownContract(_) | LedgerError::HeightOutOfRange { .. } => 4,
            LedgerError::BadNonce { .. } => 6,
            _ => 1,
        };
    }
    if let Some(identity) = err.downcast_ref::<IdentityError>() {
        return match identity {
            IdentityError::Unauthorized => 3,
            IdentityError::NotFound(_) => 4,
            IdentityError::AlreadyRegistered(_) => 6,
            _ => 1,
        };
    }
    1
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code_for(&err));
        }
    }
}
