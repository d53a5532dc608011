#![no_main]

use fbocc_core::postprocess::{weights_from_json, weights_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((ids, w)) = weights_from_json(text) {
        let json = weights_to_json(&w, &ids, None).expect("parsed table serializes");
        let (ids2, w2) = weights_from_json(&json).expect("serialized table parses");
        assert_eq!(ids2, ids);
        assert_eq!(w2, w);
    }
});
