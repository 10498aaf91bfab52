//! Replays every fuzz target's body over its checked-in corpus seeds, so
//! the seeds stay valid and the targets' roundtrip assertions hold on
//! stable-toolchain CI (running the fuzzers themselves needs cargo-fuzz).

use std::path::PathBuf;

use blendcac::authz::validate_token;
use blendcac::baselines::BaselineStore;
use blendcac::capcontract::{CapabilityToken, ContractCall, QueriedToken, TimeOfDay};
use blendcac::codec::{Reader, Writer};
use blendcac::identity::ProfileDb;
use blendcac::ledger::{verify_chain, Block, Chain, ChainLog, SignedTransaction};
use blendcac::PublicKey;
use blendcac_gateway::config::{parse_config, parse_context_arg, parse_policy_rules};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("corpus dir {} missing: {e}", dir.display()))
    {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        out.push((name, std::fs::read(&path).unwrap()));
    }
    assert!(!out.is_empty(), "no seeds for {target}");
    out.sort();
    out
}

#[test]
fn contract_call_seeds() {
    for (name, data) in seeds("contract_call") {
        let call = ContractCall::decode(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(call.encode(), data, "{name}: canonical re-encode");
    }
}

#[test]
fn block_decode_seeds() {
    for (name, data) in seeds("block_decode") {
        let block = Block::decode(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(block.encode(), data, "{name}: canonical re-encode");
    }
}

#[test]
fn transaction_decode_seeds() {
    for (name, data) in seeds("transaction_decode") {
        let mut reader = Reader::new(&data);
        let tx = SignedTransaction::decode(&mut reader).unwrap_or_else(|e| panic!("{name}: {e}"));
        reader.finish().unwrap();
        let mut w = Writer::new();
        tx.encode(&mut w);
        assert_eq!(w.finish(), data, "{name}: canonical re-encode");
        assert!(tx.verify(), "{name}: seed transactions carry real signatures");
    }
}

#[test]
fn chain_log_seeds() {
    for (name, data) in seeds("chain_log") {
        let blocks = ChainLog::decode_records(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(verify_chain(&Chain { blocks }), "{name}: seed chain verifies");
    }
}

#[test]
fn token_json_seeds() {
    for (name, data) in seeds("token_json") {
        let text = std::str::from_utf8(&data).unwrap();
        if name == "token" {
            let token: CapabilityToken = serde_json::from_str(text).unwrap();
            assert!(validate_token(&token), "{name}: seed token validates");
        } else {
            let queried: QueriedToken = serde_json::from_str(text).unwrap();
            assert!(validate_token(&queried.token));
        }
    }
}

#[test]
fn store_parse_seeds() {
    for (name, data) in seeds("store_parse") {
        let text = std::str::from_utf8(&data).unwrap();
        let store = BaselineStore::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(BaselineStore::parse(&store.render()).unwrap(), store);
    }
}

#[test]
fn profiles_json_seeds() {
    let owner = PublicKey([7u8; 32]);
    for (name, data) in seeds("profiles_json") {
        let text = std::str::from_utf8(&data).unwrap();
        let db = ProfileDb::import_json(owner, text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!db.is_empty());
    }
}

#[test]
fn time_of_day_seeds() {
    for (name, data) in seeds("time_of_day") {
        let text = std::str::from_utf8(&data).unwrap();
        let t: TimeOfDay = text.parse().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(t.to_string().parse::<TimeOfDay>().unwrap(), t);
    }
}

#[test]
fn config_parse_seeds() {
    for (name, data) in seeds("config_parse") {
        let text = std::str::from_utf8(&data).unwrap();
        // Each seed must be accepted by at least one of the parsers the
        // target exercises.
        let ok = parse_config(text).is_ok()
            || parse_policy_rules(text).map(|r| !r.is_empty()).unwrap_or(false)
            || parse_context_arg(text).is_ok();
        assert!(ok, "{name}: no parser accepts the seed");
    }
}
