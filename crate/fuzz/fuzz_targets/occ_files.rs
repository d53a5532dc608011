#![no_main]

// Typed readers on top of the container: ground truth, predictions and
// model weights.
use fbocc_core::container::TensorContainer;
use fbocc_core::forward_vtm::EncoderConfig;
use fbocc_core::io::{occ_gt_to_container, prediction_from_container, read_occ_gt, ModelWeights};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(c) = TensorContainer::decode(data) else { return };
    if let Ok(gt) = read_occ_gt(&c) {
        let back = read_occ_gt(&occ_gt_to_container(&gt)).expect("written ground truth reads back");
        assert_eq!(back, gt);
    }
    if let Ok(pred) = prediction_from_container(&c) {
        assert!(pred.validate().is_ok());
    }
    let cfg = EncoderConfig {
        hidden_channels: 2,
        context_channels: 2,
        num_bins: 4,
        stride: 2,
    };
    let _ = ModelWeights::from_container(&c, &cfg);
});
