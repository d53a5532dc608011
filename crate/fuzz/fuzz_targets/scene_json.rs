#![no_main]

use fbocc_core::scene::SceneSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(scene) = SceneSpec::from_json(text) {
        let json = scene.to_json();
        let again = SceneSpec::from_json(&json).expect("serialized scene parses");
        assert_eq!(again.to_json(), json);
        for f in 0..scene.num_frames() {
            scene.pose(f).expect("trajectory pose");
        }
    }
});
