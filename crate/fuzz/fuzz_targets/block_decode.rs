#![no_main]
use libfuzzer_sys::fuzz_target;

use blendcac::ledger::Block;

fuzz_target!(|data: &[u8]| {
    if let Ok(block) = Block::decode(data) {
        assert_eq!(block.encode(), data);
    }
});
