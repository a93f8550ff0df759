//! Attribute-group centres versus domain centres on a toy embedding space
//! where the source domain holds two well-separated attribute groups.
//!
//!     cargo run --example agc_scoring

use hmic::metadata::Domain;
use hmic::scoring::{fit_agc, fit_dc, CovarianceMode, GroupedFeature, Shrinkage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn main() -> hmic::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut point = |cx: f64, cy: f64| vec![cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)];

    // group 0 around (-3, 0), group 1 around (3, 0); group 2 (target) around (0, 4)
    let mut train = Vec::new();
    for _ in 0..40 {
        train.push((point(-3.0, 0.0), 0, Domain::Source));
        train.push((point(3.0, 0.0), 1, Domain::Source));
    }
    for _ in 0..8 {
        train.push((point(0.0, 4.0), 2, Domain::Target));
    }
    let grouped: Vec<GroupedFeature> =
        train.iter().map(|(f, g, _)| GroupedFeature { feature: f, group: *g, section: 0 }).collect();
    let by_domain: Vec<(&[f64], Domain, u32)> = train.iter().map(|(f, _, d)| (f.as_slice(), *d, 0)).collect();
    let agc = fit_agc(&grouped, Shrinkage::default(), CovarianceMode::PerGroup)?;
    let dc = fit_dc(&by_domain, Shrinkage::default(), CovarianceMode::PerGroup)?;

    for g in agc.groups(0).unwrap() {
        println!("AG {}: centre ({:+.2}, {:+.2}) from {} clips", g.label, g.centre[0], g.centre[1], g.n_clips);
    }
    println!();
    for (name, f) in [
        ("normal, group 0", vec![-3.1, 0.2]),
        ("normal, target ", vec![0.1, 3.8]),
        ("anomaly between source groups", vec![0.0, 0.0]),
        ("anomaly off axis", vec![-3.0, 2.0]),
    ] {
        let a = agc.score("clip", &f, 0)?;
        let d = dc.score("clip", &f, 0)?;
        println!("{name:<30} AGC {:>7.2} (group {})   DC {:>7.2} (domain {})", a.score, a.argmin_group, d.score, d.argmin_group);
    }
    Ok(())
}
