//! The whole file-based workflow: write a dataset, train a gate from its
//! manifest, then compare the gated mixture against fixed equal weights.

use moedet::eval::{evaluate, EvalConfig};
use moedet::io::gate_file::write_gate;
use moedet::io::jsonl::{read_ground_truth, read_subsets};
use moedet::io::manifest::{load_training_set, read_anchors, read_pipeline};
use moedet::io::synth::{synth_dataset, write_dataset, SynthSpec};
use moedet::gate::{Architecture, GateMode, GateParams, GateSpec};
use moedet::pipeline::run_pipeline;
use moedet::training::{train_gate, TrainConfig};

fn main() -> moedet::Result<()> {
    let root = std::env::temp_dir().join("moedet_end_to_end");
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    let spec = SynthSpec {
        images_per_domain: 120,
        ..SynthSpec::default()
    };
    write_dataset(&synth_dataset(&SynthSpec { seed: 10, ..spec.clone() })?, &train_dir)?;
    write_dataset(&synth_dataset(&SynthSpec { seed: 11, ambiguous_images: 40, ..spec })?, &test_dir)?;

    let (manifest, anchors, samples) = load_training_set(&train_dir.join("manifest.json"))?;
    let gspec = GateSpec::new(Architecture::ConvFc2, GateMode::Single, manifest.expert_ids, samples[0].features.channels);
    let cfg = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let (gate, _) = train_gate(&GateParams::init(gspec, 0)?, &samples, &cfg, Some(&anchors), |_| {})?;
    let gate_path = root.join("gate.json");
    write_gate(&gate_path, &gate)?;

    let gts = read_ground_truth(&test_dir.join("ground_truth.jsonl"))?;
    let subsets = read_subsets(&test_dir.join("subsets.jsonl"))?;
    let mut pipeline = read_pipeline(&test_dir.join("pipeline.json"))?;
    let anchors = read_anchors(&pipeline.anchors)?;
    for label in ["fixed 0.5/0.5", "gated"] {
        if label == "gated" {
            pipeline.gate = Some(gate_path.clone());
        }
        let dets: Vec<_> = run_pipeline(&pipeline, &anchors, None)?
            .into_iter()
            .flat_map(|r| r.detections)
            .collect();
        let report = evaluate(&dets, &gts, &subsets, &EvalConfig::default())?;
        let cols: Vec<String> = report
            .subsets
            .iter()
            .map(|s| format!("{} {:.4}", s.subset, s.map50.unwrap_or(f64::NAN)))
            .collect();
        println!("{label:<14} {}", cols.join("  "));
    }
    println!("files under {}", root.display());
    Ok(())
}
