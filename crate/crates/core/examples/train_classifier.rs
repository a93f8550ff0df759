//! Trains the dual-head classifier on a small synthetic corpus and shows
//! the loss breakdown per epoch and the section / attribute-group accuracy
//! of the trained heads.
//!
//!     cargo run --release --example train_classifier

use hmic::datagen::{plan_corpus, synthesize, ClipCounts, SynthSpec};
use hmic::dsp::{DspConfig, LogMelExtractor};
use hmic::metadata::{build_label_space, Split};
use hmic::model::{classify, forward_features, train, ModelConfig, TrainConfig, TrainingSample, Ablation};

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

pub fn main() -> hmic::Result<()> {
    let mut spec = SynthSpec::default_corpus(5);
    spec.duration_s = 2.0;
    for s in &mut spec.machines[0].sections {
        s.counts = ClipCounts { train_source: 12, train_target: 4, test_normal: 1, test_anomalous: 1 };
    }
    let extractor = LogMelExtractor::new(DspConfig::default())?;
    let plans: Vec<_> = plan_corpus(&spec)?.into_iter().filter(|p| p.meta.split == Split::Train).collect();
    let feats = plans
        .iter()
        .map(|p| extractor.features(&synthesize(&spec, p)?))
        .collect::<hmic::Result<Vec<_>>>()?;
    let metas: Vec<_> = plans.iter().map(|p| p.meta.clone()).collect();
    let space = build_label_space(&metas, "synthfan")?;
    let labels = metas.iter().map(|m| space.assign_labels(m)).collect::<hmic::Result<Vec<_>>>()?;
    let samples: Vec<TrainingSample> =
        feats.iter().zip(&labels).map(|(x, &(l_id, l_ag))| TrainingSample { x, l_id, l_ag }).collect();

    let model = ModelConfig {
        n_mels: 128,
        n_frames: feats[0].n_frames,
        backbone_channels: vec![4, 8, 16],
        head_channels: 16,
        block_gain: 6f64.sqrt(),
        n_sections: space.n_sections(),
        n_groups: space.n_groups(),
        lambda: 0.5,
        ablation: Ablation::Hmic,
    };
    let config = TrainConfig { epochs: 60, batch_size: 8, lr: 3e-3, lr_min: 1e-4, seed: 1, ..TrainConfig::default() };
    println!("{} clips, {} sections, {} attribute groups", samples.len(), model.n_sections, model.n_groups);
    let (params, _log) = train(&samples, &model, &config, |e| {
        println!(
            "epoch {:>2}  loss_id {:.3}  loss_ag {:.3}  total {:.3}  lr {:.1e}",
            e.epoch, e.loss_id, e.loss_ag, e.loss_total, e.lr
        )
    })?;

    let (mut id_ok, mut ag_ok) = (0, 0);
    for s in &samples {
        let (zi, za) = classify(&forward_features(s.x, &params)?, &params)?;
        id_ok += (argmax(&zi) == s.l_id) as usize;
        ag_ok += (argmax(&za) == s.l_ag) as usize;
    }
    println!("training accuracy: section ID {id_ok}/{n}, attribute group {ag_ok}/{n}", n = samples.len());
    Ok(())
}
