//! Decoders never panic on arbitrary or corrupted input; the fuzz targets
//! explore the same surface far more deeply.

use fbocc_core::container::{Tensor, TensorContainer, TensorData};
use fbocc_core::forward_vtm::EncoderConfig;
use fbocc_core::geometry::{parse_rig, LidarFrame};
use fbocc_core::io::{occ_gt_to_container, prediction_from_container, read_occ_gt, ModelWeights};
use fbocc_core::occ_head::OccupancyGrid;
use fbocc_core::pipeline::PipelineConfig;
use fbocc_core::postprocess::weights_from_json;
use fbocc_core::scene::SceneSpec;
use ndarray::Array3;
use proptest::prelude::*;

fn valid_container() -> Vec<u8> {
    let labels = Array3::from_shape_fn((3, 2, 2), |(x, y, z)| ((x + 2 * y + 5 * z) % 18) as u8);
    let mut c = occ_gt_to_container(&OccupancyGrid::all_visible(labels).unwrap());
    c.insert(Tensor::new("extra", vec![2], TensorData::F64(vec![0.5, -1.0])).unwrap());
    c.encode()
}

fn exercise(bytes: &[u8]) {
    if let Ok(c) = TensorContainer::decode(bytes) {
        let again = TensorContainer::decode(&c.encode()).unwrap();
        assert_eq!(again.encode(), c.encode());
        let _ = read_occ_gt(&c);
        let _ = prediction_from_container(&c);
        let _ = ModelWeights::from_container(&c, &EncoderConfig::default());
    }
    if let Ok(text) = std::str::from_utf8(bytes) {
        let _ = parse_rig(text);
        let _ = SceneSpec::from_json(text);
        let _ = LidarFrame::parse_text(text);
        let _ = weights_from_json(text);
        let _ = PipelineConfig::from_json(text);
    }
}

proptest! {
    #[test]
    fn arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        exercise(&bytes);
    }

    #[test]
    fn corrupted_container(edits in proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6),
                           cut in any::<prop::sample::Index>()) {
        let mut bytes = valid_container();
        for (at, value) in edits {
            let i = at.index(bytes.len());
            bytes[i] = value;
        }
        let keep = cut.index(bytes.len() + 1);
        exercise(&bytes[..keep]);
        exercise(&bytes);
    }

    #[test]
    fn arbitrary_text(text in "[0-9a-z\\[\\]{}:,.\" \\n#e+-]{0,200}") {
        exercise(text.as_bytes());
    }
}
