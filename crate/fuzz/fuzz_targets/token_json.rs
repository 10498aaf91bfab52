#![no_main]
use libfuzzer_sys::fuzz_target;

use blendcac::authz::validate_token;
use blendcac::capcontract::{CapabilityToken, QueriedToken};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(token) = serde_json::from_str::<CapabilityToken>(text) {
        // Parsed tokens round-trip and never panic validation.
        let json = serde_json::to_string(&token).unwrap();
        let again: CapabilityToken = serde_json::from_str(&json).unwrap();
        assert_eq!(again, token);
        let _ = validate_token(&token);
    }
    let _ = serde_json::from_str::<QueriedToken>(text);
});
