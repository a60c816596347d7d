//! Average per-image agreement categories between the two experts.

use std::collections::BTreeMap;

use moedet::analysis::{disagreement, disagreement_report};
use moedet::decode::decode_all;
use moedet::fusion::nms;
use moedet::io::synth::{synth_dataset, SynthSpec};

fn main() -> moedet::Result<()> {
    let data = synth_dataset(&SynthSpec {
        images_per_domain: 80,
        ambiguous_images: 40,
        seed: 6,
        ..SynthSpec::default()
    })?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for im in &data.images {
        a.extend(nms(&decode_all(&im.raws[0], &data.anchors, 0.25)?, 0.6));
        b.extend(nms(&decode_all(&im.raws[1], &data.anchors, 0.25)?, 0.6));
    }
    let mut counts = disagreement(&a, &b, 0.5);
    let subsets = data.subsets();
    for id in subsets.keys() {
        counts.entry(id.clone()).or_default();
    }
    let report = disagreement_report(&counts, &subsets, "daytime", "nighttime", 0.5);
    print!("{}", report.to_csv());

    let totals: BTreeMap<&str, usize> = [
        ("full_agreement", counts.values().map(|c| c.full_agreement).sum()),
        ("only_daytime", counts.values().map(|c| c.only_a).sum()),
        ("only_nighttime", counts.values().map(|c| c.only_b).sum()),
    ]
    .into();
    println!("totals {totals:?}");
    Ok(())
}
