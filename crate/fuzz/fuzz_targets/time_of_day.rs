#![no_main]
use libfuzzer_sys::fuzz_target;

use blendcac::capcontract::TimeOfDay;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = text.parse::<TimeOfDay>() {
        // Display form re-parses to the same time.
        let again: TimeOfDay = t.to_string().parse().unwrap();
        assert_eq!(again, t);
    }
});
