#![no_main]

use fbocc_core::container::TensorContainer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = TensorContainer::decode(data) {
        // compare encodings: payloads may hold NaNs
        let bytes = c.encode();
        let again = TensorContainer::decode(&bytes).expect("re-encoded container decodes");
        assert_eq!(again.encode(), bytes);
    }
});
