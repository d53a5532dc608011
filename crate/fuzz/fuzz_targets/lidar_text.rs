#![no_main]

use fbocc_core::geometry::LidarFrame;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(frame) = LidarFrame::parse_text(text) {
        assert!(frame.points().iter().all(|p| p.iter().all(|v| v.is_finite())));
        if let Some(labels) = frame.labels() {
            assert_eq!(labels.len(), frame.points().len());
            assert!(labels.iter().all(|&l| (l as usize) < fbocc_core::NUM_CLASSES));
        }
    }
});
