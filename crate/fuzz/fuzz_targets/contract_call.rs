#![no_main]
use libfuzzer_sys::fuzz_target;

use blendcac::capcontract::ContractCall;

fuzz_target!(|data: &[u8]| {
    if let Ok(call) = ContractCall::decode(data) {
        // Accepted inputs are in canonical form: re-encoding is bit-exact.
        let encoded = call.encode();
        assert_eq!(encoded, data);
        assert_eq!(ContractCall::decode(&encoded).unwrap(), call);
    }
});
