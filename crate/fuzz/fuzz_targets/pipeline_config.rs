#![no_main]

use fbocc_core::pipeline::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = PipelineConfig::from_json(text) {
        cfg.static_class_ids().expect("validated static classes");
        cfg.rig().expect("validated rig");
        let json = serde_json::to_string(&cfg).expect("config serializes");
        assert_eq!(PipelineConfig::from_json(&json).expect("serialized config parses"), cfg);
    }
});
