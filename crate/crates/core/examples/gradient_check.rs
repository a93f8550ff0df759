//! Checks the hand-written backward pass against central finite
//! differences on a micro configuration, for each ablation mode.
//!
//!     cargo run --release --example gradient_check

use hmic::dsp::LogMelSpectrogram;
use hmic::model::{gradient_check, Ablation, LabelledInput, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn main() -> hmic::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<LogMelSpectrogram> = (0..4)
        .map(|_| LogMelSpectrogram::new(12, 10, (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<hmic::Result<_>>()?;
    let batch: Vec<LabelledInput> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| LabelledInput { x, l_id: i % 2, l_ag: i % 3 })
        .collect();

    for ablation in [Ablation::Hmic, Ablation::DomainOnly, Ablation::AttributeOnly] {
        let cfg = ModelConfig {
            n_mels: 12,
            n_frames: 10,
            backbone_channels: vec![3, 4],
            head_channels: 5,
            block_gain: 2.0,
            n_sections: 2,
            n_groups: 3,
            lambda: 0.3,
            ablation,
        };
        let params = ModelParams::init(cfg, &mut rng)?;
        let report = gradient_check(&params, &batch, 1e-5)?;
        println!("{ablation:?}: {} parameters, max relative error {:.2e}", report.n_checked, report.max_rel_error);
        for (name, err) in &report.per_tensor {
            println!("  {name:<22} {err:.2e}");
        }
    }
    Ok(())
}
