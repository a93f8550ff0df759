//! Parses DCASE-style filenames and prints the section / attribute-group
//! tree with the integer labels assigned to each level.
//!
//!     cargo run --example metadata_tree

use hmic::metadata::{build_label_space, parse_dcase_path};

pub fn main() -> hmic::Result<()> {
    let files = [
        "ToyCar/train/section_00_source_train_normal_0000_car_A1_spd_28V_mic_1.wav",
        "ToyCar/train/section_00_source_train_normal_0001_car_A1_spd_31V_mic_1.wav",
        "ToyCar/train/section_00_source_train_normal_0002_car_A2_spd_28V_mic_1.wav",
        "ToyCar/train/section_00_target_train_normal_0000_car_B1_spd_28V_mic_1.wav",
        "ToyCar/train/section_01_source_train_normal_0000_car_C1_spd_28V_mic_2.wav",
        "ToyCar/train/section_01_source_train_normal_0001_mic_2_car_C1_spd_28V.wav",
    ];
    let clips = files.iter().map(|f| parse_dcase_path(f)).collect::<hmic::Result<Vec<_>>>()?;
    let space = build_label_space(&clips, "ToyCar")?;

    println!("{} ({} sections, {} attribute groups)", space.machine_type, space.n_sections(), space.n_groups());
    for (section, l_id) in &space.id_labels {
        println!("  section {section:02}  l_ID = {l_id}");
        for &l_ag in &space.ag_by_section[section] {
            println!("    l_AG = {l_ag}  {}", space.group_key(l_ag).unwrap());
        }
    }

    // attribute order in the filename does not change the group
    let (a, b) = (&clips[4], &clips[5]);
    println!("\n{} -> {:?}", a.clip_id, space.assign_labels(a)?);
    println!("{} -> {:?}", b.clip_id, space.assign_labels(b)?);

    match parse_dcase_path("ToyCar/train/section_00_source_train_normal_0000_car.wav") {
        Err(e) => println!("\nrejected: {e}"),
        Ok(_) => unreachable!("odd attribute tokens are malformed"),
    }
    Ok(())
}
