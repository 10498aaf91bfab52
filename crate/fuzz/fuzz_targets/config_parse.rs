#![no_main]
use libfuzzer_sys::fuzz_target;

use blendcac_gateway::config::{parse_config, parse_context_arg, parse_policy_rules};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_config(text);
    let _ = parse_policy_rules(text);
    let _ = parse_context_arg(text);
});
