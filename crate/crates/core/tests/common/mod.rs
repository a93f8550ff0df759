#![allow(dead_code)]

use std::path::Path;

use hmic::config::RunConfig;
use hmic::datagen::{ClipCounts, SynthSpec};

/// A corpus small enough to train in a second or two.
pub fn tiny_spec(seed: u64) -> SynthSpec {
    let mut spec = SynthSpec::default_corpus(seed);
    spec.duration_s = 1.0;
    for s in &mut spec.machines[0].sections {
        s.counts = ClipCounts { train_source: 9, train_target: 3, test_normal: 4, test_anomalous: 4 };
    }
    spec
}

pub fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.corpus = root.join("corpus");
    cfg.paths.synth_spec = Some(root.join("spec.toml"));
    cfg.paths.checkpoint = root.join("model.ckpt");
    cfg.paths.train_logs = root.join("logs");
    cfg.paths.scores = root.join("scores.csv");
    cfg.paths.report = root.join("report.json");
    cfg.model.backbone_channels = vec![2, 4, 8];
    cfg.model.head_channels = 8;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 8;
    cfg.train.lr = 1e-3;
    cfg
}

/// Writes the tiny spec and config under `root`; returns the config path.
pub fn write_tiny_setup(root: &Path) -> std::path::PathBuf {
    std::fs::write(root.join("spec.toml"), tiny_spec(3).to_toml_string()).unwrap();
    let path = root.join("config.toml");
    std::fs::write(&path, tiny_config(root).to_toml_string()).unwrap();
    path
}
