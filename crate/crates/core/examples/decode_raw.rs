//! Decode a raw prediction tensor, then decode it again after scaling by a
//! gate weight. Scaling the logits by 0.5 pulls scores toward 0.5 before the
//! sigmoid, which is what the mixture does to a down-weighted expert.

use moedet::decode::{decode_all, logit, AnchorConfig, AnchorLevel, RawPredictionTensor};
use moedet::gate::{apply_expert_weights, fixed_weight_output};

fn main() -> moedet::Result<()> {
    let cfg = AnchorConfig {
        image_size: [32, 32],
        class_count: 2,
        levels: vec![AnchorLevel {
            stride: 8,
            anchors: vec![[8.0, 8.0], [16.0, 12.0]],
        }],
    };
    let mut raw = RawPredictionTensor::zeros(&cfg, "img0", "daytime");
    // background everywhere
    for cell in raw.levels[0].data.chunks_mut(cfg.channels()) {
        cell[4] = -9.0;
    }
    // one confident object of class 1 centred in cell (1, 2), anchor 0
    let cell = raw.levels[0].cell_mut(0, 1, 2);
    cell.copy_from_slice(&[0.0, 0.0, logit(0.5) as f32, 0.0, 4.0, -3.0, 3.0]);

    for d in decode_all(&raw, &cfg, 0.001)? {
        println!("full weight   {d:?}");
    }
    let half = fixed_weight_output(&[0.5], 1)?;
    let weighted = apply_expert_weights(&[raw], &half, &cfg)?;
    for d in decode_all(&weighted[0], &cfg, 0.001)?.iter().take(3) {
        println!("weight 0.5    class {} score {:.4} box {:?}", d.class_id, d.score, d.bbox.to_array());
    }
    Ok(())
}
