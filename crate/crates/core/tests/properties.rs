use std::collections::{BTreeMap, HashMap};

use hmic::datagen::{plan_corpus, SynthSpec};
use hmic::dsp::{DspConfig, LogMelExtractor, Waveform};
use hmic::linalg::Matrix;
use hmic::metadata::{build_label_space, parse_dcase_filename, parse_dcase_path, ClipMeta, Condition, Domain, Split};
use hmic::model::{cross_entropy, loss, softmax};
use hmic::scoring::{CentreGroup, CentreModel, Shrinkage};
use proptest::prelude::*;

fn clip_strategy() -> impl Strategy<Value = ClipMeta> {
    (
        0u32..4,
        any::<bool>(),
        prop::collection::btree_map(prop::sample::select(vec!["spd", "mic", "car", "noise"]), prop::sample::select(vec!["a1", "b2", "7"]), 0..3),
    )
        .prop_map(|(section, target, attrs)| ClipMeta {
            clip_id: String::new(),
            machine_type: "m".into(),
            section_id: section,
            domain: if target { Domain::Target } else { Domain::Source },
            split: Split::Train,
            condition: Condition::Normal,
            attributes: attrs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        })
}

fn corpus_strategy() -> impl Strategy<Value = Vec<ClipMeta>> {
    prop::collection::vec(clip_strategy(), 1..40).prop_map(|clips| {
        clips
            .into_iter()
            .enumerate()
            .map(|(i, mut c)| {
                c.clip_id = format!("m/{}", c.dcase_filename(i).trim_end_matches(".wav"));
                c
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn label_space_partitions_like_a_hash_set(clips in corpus_strategy()) {
        let space = build_label_space(&clips, "m").unwrap();
        let leaves: usize = space.ag_by_section.values().map(Vec::len).sum();
        prop_assert_eq!(leaves, space.n_groups());

        let mut oracle: HashMap<(u32, Vec<(String, String)>), usize> = HashMap::new();
        for c in &clips {
            let next = oracle.len();
            oracle.entry((c.section_id, c.attributes.clone().into_iter().collect())).or_insert(next);
        }
        prop_assert_eq!(oracle.len(), space.n_groups());
        let labels: Vec<_> = clips.iter().map(|c| space.assign_labels(c).unwrap()).collect();
        for (i, a) in clips.iter().enumerate() {
            for (j, b) in clips.iter().enumerate() {
                let same = a.section_id == b.section_id && a.attributes == b.attributes;
                prop_assert_eq!(same, labels[i].1 == labels[j].1);
                prop_assert_eq!(a.section_id == b.section_id, labels[i].0 == labels[j].0);
            }
        }
    }

    #[test]
    fn label_space_ignores_clip_order(clips in corpus_strategy(), seed in any::<u64>()) {
        let mut shuffled = clips.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(build_label_space(&clips, "m").unwrap(), build_label_space(&shuffled, "m").unwrap());
    }

    #[test]
    fn attribute_token_order_does_not_matter(clip in clip_strategy(), rot in 0usize..3) {
        let pairs: Vec<_> = clip.attributes.iter().collect();
        let mut rotated = pairs.clone();
        if !rotated.is_empty() {
            let k = rot % rotated.len();
            rotated.rotate_left(k);
        }
        let head = format!("section_{:02}_{}_train_normal_0003", clip.section_id, clip.domain);
        let name = |ps: &[(&String, &String)]| {
            let mut s = head.clone();
            for (k, v) in ps {
                s.push_str(&format!("_{k}_{v}"));
            }
            s + ".wav"
        };
        let a = parse_dcase_filename(&name(&pairs)).unwrap();
        let b = parse_dcase_filename(&name(&rotated)).unwrap();
        prop_assert_eq!(a.group_key(), b.group_key());
        prop_assert_eq!(a.group_key(), clip.group_key());
    }

    #[test]
    fn generated_paths_roundtrip(seed in any::<u64>()) {
        let mut spec = SynthSpec::default_corpus(seed);
        for s in &mut spec.machines[0].sections {
            s.counts.train_source = 4;
            s.counts.test_normal = 2;
            s.counts.test_anomalous = 2;
        }
        for plan in plan_corpus(&spec).unwrap() {
            prop_assert_eq!(parse_dcase_path(&plan.path).unwrap(), plan.meta);
        }
    }
}

fn noise(seed: u64, n: usize) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gain_shifts_log_mel(seed in any::<u64>(), a in prop_oneof![0.01f64..0.9, -4.0f64..-1.1]) {
        let cfg = DspConfig::default();
        let ex = LogMelExtractor::new(cfg.clone()).unwrap();
        let x = noise(seed, 6000);
        let base = ex.log_mel(&Waveform::new(x.clone(), 16_000).unwrap()).unwrap();
        let scaled = ex.log_mel(&Waveform::new(x.iter().map(|v| a * v).collect(), 16_000).unwrap()).unwrap();
        let shift = 2.0 * a.abs().ln();
        let floor = cfg.floor_epsilon.ln() + 1.0;
        for (p, q) in base.values.iter().zip(&scaled.values) {
            if *p > floor && *q > floor {
                prop_assert!((q - p - shift).abs() < 1e-9, "{} vs {}", q - p, shift);
            }
        }
    }

    #[test]
    fn one_hop_delay_moves_one_frame(seed in any::<u64>()) {
        let cfg = DspConfig { standardize: false, ..DspConfig::default() };
        let ex = LogMelExtractor::new(cfg.clone()).unwrap();
        let x = noise(seed, 8 * cfg.hop);
        let mut delayed = vec![0.0; cfg.hop];
        delayed.extend_from_slice(&x);
        let a = ex.log_mel(&Waveform::new(x, 16_000).unwrap()).unwrap();
        let b = ex.log_mel(&Waveform::new(delayed, 16_000).unwrap()).unwrap();
        prop_assert_eq!(b.n_frames, a.n_frames + 1);
        // the last frame of `a` is zero-padded past the end of the signal
        for t in 0..a.n_frames - 1 {
            for m in 0..a.n_mels {
                prop_assert_eq!(a.get(m, t), b.get(m, t + 1));
            }
        }
    }

    #[test]
    fn log_mel_is_finite(samples in prop::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0], 1..3000)) {
        let ex = LogMelExtractor::new(DspConfig::default()).unwrap();
        let w = Waveform::new(samples, 16_000).unwrap();
        prop_assert!(ex.log_mel(&w).unwrap().values.iter().all(|v| v.is_finite()));
        prop_assert!(ex.features(&w).unwrap().values.iter().all(|v| v.is_finite()));
    }
}

fn logits(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn total_loss_lies_between_head_losses(zi in logits(2..6), za in logits(2..12), lambda in 0.0f64..=1.0, li in 0usize..2, la in 0usize..2) {
        let l = loss(&zi, &za, li, la, lambda).unwrap();
        prop_assert!(l.loss_id >= 0.0 && l.loss_ag >= 0.0);
        let (lo, hi) = (l.loss_id.min(l.loss_ag), l.loss_id.max(l.loss_ag));
        let slack = 4.0 * f64::EPSILON * hi.max(1.0);
        prop_assert!(l.loss_total >= lo - slack && l.loss_total <= hi + slack);
    }

    #[test]
    fn softmax_sums_to_one(z in logits(1..40)) {
        let s: f64 = softmax(&z).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_margin_gives_near_zero_loss(z in logits(2..10), label in 0usize..2, margin in 15.0f64..50.0) {
        let mut z = z;
        let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        z[label] = top + margin;
        let ce = cross_entropy(&z, label).unwrap();
        prop_assert!((0.0..1e-6).contains(&ce), "{ce}");
    }
}

fn group_strategy(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-3.0f64..3.0, d), prop::collection::vec(-1.0f64..1.0, d * d))
}

fn make_group(label: usize, centre: Vec<f64>, b: &[f64], eps: f64) -> CentreGroup {
    let d = centre.len();
    let cov: Vec<f64> =
        (0..d * d).map(|ij| (0..d).map(|k| b[(ij / d) * d + k] * b[(ij % d) * d + k]).sum()).collect();
    CentreGroup::from_parts(label, centre, Matrix::from_vec(d, d, cov).unwrap(), eps, 5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn score_is_min_over_groups(raw in prop::collection::vec(group_strategy(3), 1..6), f in prop::collection::vec(-4.0f64..4.0, 3)) {
        let groups: Vec<_> = raw.iter().enumerate().map(|(i, (c, b))| make_group(i, c.clone(), b, 1e-2)).collect();
        let model = CentreModel::from_groups(3, BTreeMap::from([(0, groups.clone())])).unwrap();
        let rec = model.score("x", &f, 0).unwrap();
        prop_assert!(rec.score >= 0.0);
        for g in &groups {
            prop_assert!(rec.score <= g.distance(&f).unwrap());
            prop_assert_eq!(g.distance(&g.centre).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_covariance_scores_scale_with_distance(c in prop::collection::vec(-3.0f64..3.0, 4), dir in prop::collection::vec(-1.0f64..1.0, 4), t in 0.1f64..10.0, eps in 1e-4f64..1.0) {
        let g = CentreGroup::from_parts(0, c.clone(), Matrix::zeros(4, 4), eps, 1).unwrap();
        let at = |s: f64| -> Vec<f64> { c.iter().zip(&dir).map(|(a, v)| a + s * v).collect() };
        let d1 = g.distance(&at(1.0)).unwrap();
        let dt = g.distance(&at(t)).unwrap();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((d1 - norm / eps.sqrt()).abs() <= 1e-9 * d1.max(1.0));
        prop_assert!((dt - t * d1).abs() <= 1e-9 * dt.max(1.0));
    }

    #[test]
    fn common_translation_leaves_scores_unchanged(raw in prop::collection::vec(group_strategy(2), 1..4), f in prop::collection::vec(-4.0f64..4.0, 2), shift in prop::collection::vec(-50.0f64..50.0, 2)) {
        let moved = |v: &[f64]| -> Vec<f64> { v.iter().zip(&shift).map(|(a, s)| a + s).collect() };
        let a: Vec<_> = raw.iter().enumerate().map(|(i, (c, b))| make_group(i, c.clone(), b, 1e-2)).collect();
        let b: Vec<_> = raw.iter().enumerate().map(|(i, (c, b))| make_group(i, moved(c), b, 1e-2)).collect();
        let ma = CentreModel::from_groups(2, BTreeMap::from([(0, a)])).unwrap();
        let mb = CentreModel::from_groups(2, BTreeMap::from([(0, b)])).unwrap();
        let (ra, rb) = (ma.score("x", &f, 0).unwrap(), mb.score("x", &moved(&f), 0).unwrap());
        prop_assert!((ra.score - rb.score).abs() <= 1e-8 * ra.score.max(1.0));
    }

    #[test]
    fn relative_shrinkage_tracks_trace(scale in 1e-8f64..1e4, d in 1usize..6) {
        let m = Matrix::from_diag(&vec![scale; d]);
        let eps = Shrinkage::default().epsilon(&m);
        prop_assert!((eps - (1e-3 * scale).max(1e-6)).abs() <= 1e-15 * eps.max(1.0));
    }
}
