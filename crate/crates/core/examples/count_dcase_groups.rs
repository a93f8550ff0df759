//! Counts attribute groups per section in a DCASE 2022 file listing (one
//! filename per line, e.g. the output of `ls dev_data/ToyCar/train`).
//!
//!     cargo run --example count_dcase_groups -- listing.txt

fn main() -> hmic::Result<()> {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: count_dcase_groups <listing.txt>");
        std::process::exit(2);
    };
    let listing = std::fs::read_to_string(path)?;
    let counts = hmic::metadata::count_groups_in_listing(&listing)?;
    for (section, n) in &counts {
        println!("section {section:02}: {n} attribute groups");
    }
    println!("total: {}", counts.values().sum::<usize>());
    Ok(())
}
