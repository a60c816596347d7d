//! Where does a trained gate send each subset? In-domain images should be
//! routed almost entirely to their expert; ambiguous images spread out.

use moedet::analysis::routing_summary;
use moedet::gate::{gate_forward, Architecture, GateMode, GateParams, GateSpec};
use moedet::io::synth::{synth_dataset, SynthSpec};
use moedet::training::{train_gate, TrainConfig};

fn main() -> moedet::Result<()> {
    let train = synth_dataset(&SynthSpec {
        images_per_domain: 100,
        seed: 4,
        ..SynthSpec::default()
    })?;
    let samples = train.train_samples();
    let spec = GateSpec::new(Architecture::Fc2, GateMode::Single, train.expert_ids.clone(), samples[0].features.channels);
    let cfg = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let (gate, _) = train_gate(&GateParams::init(spec, 0)?, &samples, &cfg, None, |_| {})?;

    let test = synth_dataset(&SynthSpec {
        images_per_domain: 60,
        ambiguous_images: 60,
        seed: 5,
        ..SynthSpec::default()
    })?;
    let outputs = test
        .images
        .iter()
        .map(|im| Ok((im.image_id.clone(), gate_forward(&gate, &im.features, false)?)))
        .collect::<moedet::Result<Vec<_>>>()?;
    let summary = routing_summary(&outputs, &test.subsets(), &test.expert_ids);
    for s in &summary.subsets {
        let e = &s.experts[0];
        println!(
            "{:<10} n={:<4} w({}) mean {:.3} std {:.3} median {:.3}  histogram {:?}",
            s.subset, s.samples, e.expert_id, e.mean, e.std, e.median, e.histogram
        );
    }
    Ok(())
}
