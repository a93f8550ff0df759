//! Log-Mel front end on a synthetic tone: frame count, per-frame peak band
//! and the effect of per-clip standardization.
//!
//!     cargo run --release --example log_mel

use std::f64::consts::PI;

use hmic::dsp::{mel_band_centres, DspConfig, LogMelExtractor, Waveform};

pub fn main() -> hmic::Result<()> {
    let cfg = DspConfig::default();
    let extractor = LogMelExtractor::new(cfg.clone())?;
    let centres = mel_band_centres(cfg.n_mels, cfg.f_min_hz, cfg.f_max_hz);

    for freq in [250.0, 1000.0, 3000.0, 6500.0] {
        let samples = (0..160_000).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16_000.0).sin()).collect();
        let wave = Waveform::new(samples, cfg.sample_rate_hz)?;
        let lm = extractor.log_mel(&wave)?;
        let band = lm.argmax_band(lm.n_frames / 2);
        println!(
            "{freq:>6} Hz tone: {} x {} log-Mel, peak band {band} (centre {:.1} Hz), peak {:.2}",
            lm.n_mels,
            lm.n_frames,
            centres[band],
            lm.get(band, lm.n_frames / 2)
        );
    }

    let noise: Vec<f64> = (0..32_000).map(|i| ((i * 7919 % 1013) as f64 / 1013.0) - 0.5).collect();
    let feats = extractor.features(&Waveform::new(noise, cfg.sample_rate_hz)?)?;
    let n = feats.values.len() as f64;
    let mean = feats.values.iter().sum::<f64>() / n;
    let var = feats.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    println!("standardized features: {} frames, mean {mean:.2e}, variance {var:.6}", feats.n_frames);
    Ok(())
}
