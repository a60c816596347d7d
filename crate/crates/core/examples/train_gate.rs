//! Train a gate on a synthetic two-domain set with domain labels and the
//! sample-wise entropy balancing loss, then save it.

use moedet::gate::{Architecture, GateMode, GateParams, GateSpec};
use moedet::io::gate_file::write_gate;
use moedet::io::synth::{synth_dataset, SynthSpec};
use moedet::training::{routing_accuracy, train_gate, Balancing, LossMode, TrainConfig};

fn main() -> moedet::Result<()> {
    let data = synth_dataset(&SynthSpec {
        images_per_domain: 100,
        seed: 1,
        ..SynthSpec::default()
    })?;
    let samples = data.train_samples();
    let spec = GateSpec::new(
        Architecture::ConvFc2,
        GateMode::Single,
        data.expert_ids.clone(),
        samples[0].features.channels,
    );
    let cfg = TrainConfig {
        loss_mode: LossMode::DomainCe,
        balancing: Balancing::SampleEntropy,
        lambda: 0.1,
        epochs: 10,
        ..TrainConfig::default()
    };
    let init = GateParams::init(spec, cfg.seed)?;
    let (gate, _) = train_gate(&init, &samples, &cfg, Some(&data.anchors), |m| {
        println!(
            "epoch {:>2}  total {:.4}  task {:.4}  balance {:.4}  routing acc {:.3}",
            m.epoch,
            m.total_loss,
            m.task_loss,
            m.balancing_loss,
            m.routing_accuracy.unwrap_or(f64::NAN)
        );
    })?;

    let held_out = synth_dataset(&SynthSpec {
        images_per_domain: 50,
        seed: 2,
        ..SynthSpec::default()
    })?;
    println!("held-out routing accuracy {:?}", routing_accuracy(&gate, &held_out.train_samples())?);

    let path = std::env::temp_dir().join("moedet_example_gate.json");
    write_gate(&path, &gate)?;
    println!("saved gate to {}", path.display());
    Ok(())
}
