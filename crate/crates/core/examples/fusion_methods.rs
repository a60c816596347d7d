//! Compare the four fusion methods on two experts that see the same object.

use moedet::fusion::{fuse, FusionConfig, FusionMethod};
use moedet::geometry::{BBox, Detection};

fn det(score: f64, b: [f64; 4], source: &str) -> Detection {
    Detection::new("img", 0, score, BBox::new(b[0], b[1], b[2], b[3]).unwrap()).with_source(source)
}

fn main() -> moedet::Result<()> {
    let day = vec![det(0.9, [10.0, 10.0, 50.0, 50.0], "day"), det(0.4, [60.0, 60.0, 80.0, 90.0], "day")];
    let night = vec![det(0.7, [14.0, 12.0, 54.0, 52.0], "night"), det(0.3, [12.0, 8.0, 48.0, 50.0], "night")];

    for method in [FusionMethod::Nms, FusionMethod::SoftNms, FusionMethod::Wbf, FusionMethod::Nmw] {
        let fused = fuse(&[day.clone(), night.clone()], &FusionConfig::with_method(method))?;
        println!("{method}");
        for d in &fused {
            let b = d.bbox.to_array();
            println!("  score {:.4}  box [{:.2}, {:.2}, {:.2}, {:.2}]", d.score, b[0], b[1], b[2], b[3]);
        }
    }

    // pre-weight scores by each expert's validation mAP
    let cfg = FusionConfig {
        model_map_weights: Some([("day".to_string(), 0.6), ("night".to_string(), 0.3)].into()),
        ..FusionConfig::default()
    };
    let fused = fuse(&[day, night], &cfg)?;
    println!("nmw with mAP re-weighting: top score {:.4}", fused[0].score);
    Ok(())
}
