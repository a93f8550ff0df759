//! AUC, partial AUC and the harmonic-mean report on hand-made scores.
//!
//!     cargo run --example evaluate_scores

use hmic::evaluation::{auc_from_scores, evaluate, harmonic_total, pauc_from_scores, roc_points, ScoredClip, Truth};
use hmic::metadata::Domain;

pub fn main() -> hmic::Result<()> {
    let normal = [1.0, 2.0];
    let anomalous = [1.5, 3.0];
    println!("ROC staircase (false positives, true positives): {:?}", roc_points(&normal, &anomalous));
    println!("AUC {}", auc_from_scores(&normal, &anomalous)?);
    for p in [0.1, 0.5, 1.0] {
        println!("pAUC(p = {p}) {}", pauc_from_scores(&normal, &anomalous, p)?);
    }
    println!("harmonic mean of 0.5 and 1.0: {}", harmonic_total(&[0.5, 1.0])?);

    let mut clips = Vec::new();
    for (section, domain, shift) in [(0, Domain::Source, 2.0), (0, Domain::Target, 0.5), (1, Domain::Source, 1.0)] {
        for i in 0..10 {
            let base = (i * 37 % 10) as f64 / 10.0;
            for (truth, s) in [(Truth::Normal, base), (Truth::Anomalous, base + shift)] {
                clips.push(ScoredClip {
                    clip_id: format!("m/{section}_{domain}_{truth}_{i}"),
                    machine_type: "m".into(),
                    section,
                    domain,
                    truth,
                    score: s,
                });
            }
        }
    }
    let report = evaluate(&clips, 0.1)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    print!("\n{}", String::from_utf8_lossy(&csv));
    Ok(())
}
