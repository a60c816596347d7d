//! Per-subset mAP50 of each expert alone, decoded and suppressed with NMS.

use moedet::decode::decode_all;
use moedet::eval::{evaluate, EvalConfig};
use moedet::fusion::nms;
use moedet::io::synth::{synth_dataset, SynthSpec};

fn main() -> moedet::Result<()> {
    let data = synth_dataset(&SynthSpec {
        images_per_domain: 100,
        ambiguous_images: 30,
        seed: 3,
        ..SynthSpec::default()
    })?;
    let gts = data.ground_truth();
    let subsets = data.subsets();
    for (e, name) in data.expert_ids.iter().enumerate() {
        let mut dets = Vec::new();
        for im in &data.images {
            dets.extend(nms(&decode_all(&im.raws[e], &data.anchors, 0.001)?, 0.6));
        }
        let report = evaluate(&dets, &gts, &subsets, &EvalConfig::default())?;
        println!("== {name} ==\n{}", report.to_table());
    }
    Ok(())
}
