#![no_main]

use fbocc_core::geometry::{parse_rig, rig_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rig) = parse_rig(text) {
        let json = rig_to_json(&rig);
        let again = parse_rig(&json).expect("serialized rig parses");
        assert_eq!(rig_to_json(&again), json);
    }
});
