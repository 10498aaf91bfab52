#![no_main]
use libfuzzer_sys::fuzz_target;

use blendcac::baselines::BaselineStore;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(store) = BaselineStore::parse(text) {
        // Accepted stores re-render into a parseable equal store.
        let rendered = store.render();
        assert_eq!(BaselineStore::parse(&rendered).unwrap(), store);
    }
});
