#![no_main]
use libfuzzer_sys::fuzz_target;

use blendcac::identity::ProfileDb;
use blendcac::PublicKey;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let owner = PublicKey([7u8; 32]);
    if let Ok(db) = ProfileDb::import_json(owner, text) {
        let exported = db.export_json();
        let again = ProfileDb::import_json(owner, &exported).unwrap();
        assert_eq!(again.len(), db.len());
    }
});
