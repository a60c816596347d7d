//! Run every gate architecture in every mode on one feature map.

use moedet::gate::{gate_forward, Architecture, FeatureMap, GateMode, GateParams, GateSpec};

fn main() -> moedet::Result<()> {
    let (c, h, w) = (6, 5, 5);
    let features = FeatureMap {
        image_id: "img".into(),
        channels: c,
        height: h,
        width: w,
        data: (0..c * h * w).map(|i| ((i as f32) * 0.37).sin()).collect(),
        provenance: "example".into(),
        expert_ids: vec!["daytime".into(), "nighttime".into()],
    };
    for arch in Architecture::ALL {
        for mode in [GateMode::Single, GateMode::Spatial, GateMode::Classwise] {
            let mut spec = GateSpec::new(arch, mode, features.expert_ids.clone(), c);
            spec.hidden = 32;
            spec.conv_channels = 8;
            if mode == GateMode::Classwise {
                spec.class_count = Some(3);
            }
            let params = match GateParams::init(spec, 7) {
                Ok(p) => p,
                Err(e) => {
                    println!("{arch:<10} {mode:<10} unsupported: {e}");
                    continue;
                }
            };
            let out = gate_forward(&params, &features, false)?;
            let m = out.mean_weights();
            println!(
                "{arch:<10} {mode:<10} {:>6} params  rows {:>3}  mean weights [{:.3}, {:.3}]",
                params.values.len(),
                out.rows().len(),
                m[0],
                m[1]
            );
        }
    }
    Ok(())
}
