//! Generates the default synthetic corpus, trains, scores with attribute-group
//! and domain centres, and prints both reports.
//!
//!     cargo run --release --example end_to_end [-- <work dir>]

use std::path::PathBuf;
use std::time::Instant;

use hmic::config::{RunConfig, ScoringMode};
use hmic::evaluation::EvalReport;
use hmic::pipeline::{cmd_eval, cmd_pipeline, cmd_score};

fn print_report(name: &str, r: &EvalReport) {
    println!("{name}");
    for c in &r.cells {
        println!(
            "  {} section {:02} {:<6}  AUC {:.3}  pAUC {:.3}",
            c.machine_type, c.section, c.domain, c.auc, c.pauc
        );
    }
    for m in &r.machines {
        for s in &m.sections {
            println!("  {} section {:02} pooled  AUC {:.3}  pAUC {:.3}", m.machine_type, s.section, s.auc, s.pauc);
        }
    }
    let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    println!("  Total  AUC {}  pAUC {}", fmt(r.total.auc), fmt(r.total.pauc));
}

fn main() -> hmic::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("hmic-run"));
    let mut cfg = RunConfig::default();
    cfg.paths.corpus = root.join("corpus");
    cfg.paths.checkpoint = root.join("model.ckpt");
    cfg.paths.train_logs = root.join("logs");
    cfg.paths.scores = root.join("scores_agc.csv");
    cfg.paths.report = root.join("report_agc.json");

    let start = Instant::now();
    let out = cmd_pipeline(&cfg, None, |machine, ep| {
        println!(
            "{machine} epoch {:>2}  loss_id {:.4}  loss_ag {:.4}  total {:.4}  lr {:.2e}",
            ep.epoch, ep.loss_id, ep.loss_ag, ep.loss_total, ep.lr
        );
    })?;
    print_report("HMIC-AGC", &out.report);

    let mut dc = cfg.clone();
    dc.scoring.mode = ScoringMode::Dc;
    dc.paths.scores = root.join("scores_dc.csv");
    dc.paths.report = root.join("report_dc.json");
    cmd_score(&dc)?;
    print_report("HMIC-DC", &cmd_eval(&dc)?);
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
