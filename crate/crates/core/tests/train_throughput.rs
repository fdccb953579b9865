//! Manual throughput probe for the training loop (run with --release and
//! --ignored). Not part of the normal suite.

use std::time::Instant;

use noisyseg_core::losses::LossConfig;
use noisyseg_core::model::{train, TrainConfig};
use noisyseg_core::softlabel::{build_soft_labels, SoftLabelParams};
use noisyseg_core::synth::{
    full_image_template, generate_volume, simulate_raters, PhantomSpec, RaterNoiseSpec,
};
use noisyseg_core::tensor::{stack_25d, SampleRecord};

#[test]
#[ignore]
fn epoch_throughput() {
    let mut samples = Vec::new();
    for v in 0..16u64 {
        let spec = PhantomSpec {
            seed: v,
            ..PhantomSpec::default()
        };
        let vol = generate_volume(&spec).unwrap();
        let template = full_image_template(64, 64, 8);
        let noise = RaterNoiseSpec {
            seed: v + 100,
            ..RaterNoiseSpec::default()
        };
        let grids = simulate_raters(&vol, &template, &noise).unwrap();
        let soft = build_soft_labels(
            &grids,
            3,
            &vol.bone,
            &vol.intensities,
            &SoftLabelParams::default(),
        )
        .unwrap();
        for s in 0..12 {
            samples.push(SampleRecord {
                volume_id: format!("v{v}"),
                slice_index: s,
                input: stack_25d(&vol.intensities, s).unwrap(),
                soft: soft[s].clone(),
                gt: None,
                bone: vol.bone[s].clone(),
            });
        }
    }
    let config = TrainConfig {
        loss: LossConfig::new(1.0, 1.0, 1.0, true),
        epochs: 3,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&samples, &config).unwrap();
    let elapsed = start.elapsed();
    println!(
        "3 epochs over {} samples: {:?} ({:.1} ms/epoch), final loss {:.4}",
        samples.len(),
        elapsed,
        elapsed.as_secs_f64() * 1000.0 / 3.0,
        out.loss_curve.last().unwrap()
    );
}
