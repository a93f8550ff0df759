use super::{batch_gradient, batch_loss_weighted, LabelledInput, ModelParams};
use crate::error::Result;

/// Worst disagreement between backprop and central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Per tensor: `(name, max relative error)`.
    pub per_tensor: Vec<(String, f64)>,
    pub n_checked: usize,
}

/// Relative error with a floor of `1e-6` on the denominator so entries
/// whose true gradient is ~0 are judged by absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the batch objective against central
/// finite differences `(L(θ+ε) − L(θ−ε)) / 2ε` for every parameter.
/// Intended for micro configurations.
pub fn gradient_check(
    params: &ModelParams,
    batch: &[LabelledInput<'_>],
    eps: f64,
) -> Result<GradCheckReport> {
    let (w_id, w_ag) = params.config().head_weights();
    let (_, analytic) = batch_gradient(batch, params, w_id, w_ag)?;
    let mut probe = params.clone();
    let mut per_tensor = Vec::new();
    let mut worst: f64 = 0.0;
    for spec in params.specs().to_vec() {
        let mut tensor_worst: f64 = 0.0;
        for j in spec.offset..spec.offset + spec.len() {
            let orig = probe.as_slice()[j];
            probe.as_mut_slice()[j] = orig + eps;
            let plus = batch_loss_weighted(batch, &probe, w_id, w_ag)?.loss_total;
            probe.as_mut_slice()[j] = orig - eps;
            let minus = batch_loss_weighted(batch, &probe, w_id, w_ag)?.loss_total;
            probe.as_mut_slice()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            tensor_worst = tensor_worst.max(relative_error(analytic[j], numeric));
        }
        worst = worst.max(tensor_worst);
        per_tensor.push((spec.name.clone(), tensor_worst));
    }
    Ok(GradCheckReport { max_rel_error: worst, per_tensor, n_checked: analytic.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::LogMelSpectrogram;
    use crate::model::{Ablation, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams, Vec<LogMelSpectrogram>) {
        let cfg = ModelConfig {
            n_mels: 8,
            n_frames: 9,
            backbone_channels: vec![2, 3],
            head_channels: 3,
            block_gain: 2.0,
            n_sections: 2,
            n_groups: 3,
            lambda: 0.4,
            ablation: Ablation::Hmic,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = ModelParams::init(cfg, &mut rng).unwrap();
        let xs = (0..3)
            .map(|_| {
                LogMelSpectrogram::new(8, 9, (0..72).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        (p, xs)
    }

    #[test]
    fn micro_config_passes() {
        let (p, xs) = setup();
        let batch: Vec<LabelledInput> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| LabelledInput { x, l_id: i % 2, l_ag: i % 3 })
            .collect();
        let report = gradient_check(&p, &batch, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.per_tensor.len(), 10);
    }

    #[test]
    fn objective_gradient_is_linear_in_lambda() {
        let (p, xs) = setup();
        let batch: Vec<LabelledInput> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| LabelledInput { x, l_id: (i + 1) % 2, l_ag: i % 3 })
            .collect();
        let (_, g_id) = batch_gradient(&batch, &p, 1.0, 0.0).unwrap();
        let (_, g_ag) = batch_gradient(&batch, &p, 0.0, 1.0).unwrap();
        for lambda in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let (_, g) = batch_gradient(&batch, &p, lambda, 1.0 - lambda).unwrap();
            for ((a, i), g) in g.iter().zip(&g_id).zip(&g_ag) {
                let combo = lambda * i + (1.0 - lambda) * g;
                assert!((a - combo).abs() <= 1e-14 * (1.0 + a.abs()), "lambda {lambda}");
            }
        }
    }
}
