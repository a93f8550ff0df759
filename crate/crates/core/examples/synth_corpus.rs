//! Writes the default synthetic corpus, prints its spec as TOML and
//! summarizes the manifest.
//!
//!     cargo run --release --example synth_corpus [-- <out dir>]

use std::collections::BTreeMap;
use std::path::PathBuf;

use hmic::datagen::{generate, SynthSpec};
use hmic::metadata::{build_label_space, Split};

fn main() -> hmic::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("synth-corpus"));
    let spec = SynthSpec::default_corpus(42);
    println!("{}", spec.to_toml_string());

    let entries = generate(&spec, &out)?;
    let mut counts: BTreeMap<(u32, String, String, String), usize> = BTreeMap::new();
    for e in &entries {
        let m = &e.meta;
        *counts
            .entry((m.section_id, m.domain.to_string(), m.split.to_string(), m.condition.to_string()))
            .or_default() += 1;
    }
    for ((section, domain, split, condition), n) in &counts {
        println!("section {section:02} {domain:<6} {split:<5} {condition:<9} {n:>3} clips");
    }
    let train: Vec<_> = entries.iter().filter(|e| e.meta.split == Split::Train).map(|e| e.meta.clone()).collect();
    let space = build_label_space(&train, "synthfan")?;
    println!("{} attribute groups; manifest at {}", space.n_groups(), out.join("manifest.csv").display());
    Ok(())
}
