#![no_main]
use libfuzzer_sys::fuzz_target;

use blendcac::codec::Reader;
use blendcac::ledger::SignedTransaction;

fuzz_target!(|data: &[u8]| {
    let mut reader = Reader::new(data);
    if let Ok(tx) = SignedTransaction::decode(&mut reader) {
        if reader.finish().is_ok() {
            let mut w = blendcac::codec::Writer::new();
            tx.encode(&mut w);
            assert_eq!(w.finish(), data);
            // Verification on arbitrary bytes must never panic.
            let _ = tx.verify();
            let _ = tx.id();
        }
    }
});
