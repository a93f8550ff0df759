//! Seeded synthetic corpus with attribute-driven tones and a domain shift.
//!
//! A clip is a section-specific harmonic base tone, one amplitude-modulated
//! tone per attribute value, and white noise whose level depends on the
//! domain. The target domain swaps in a different value set for selected
//! attributes and raises the noise floor. Anomalous test clips detune every
//! tone and add decaying clicks.
//!
//! Every clip is seeded from `(seed, clip_id)` alone, so the output does not
//! depend on generation order or thread count.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{write_wav, Waveform};
use crate::error::{HmicError, Result};
use crate::metadata::{write_manifest, ClipMeta, Condition, Domain, ManifestEntry, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: u32,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    pub anomaly: AnomalySpec,
    pub machines: Vec<SynthMachine>,
}

fn default_rate() -> u32 {
    16_000
}

fn default_duration() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    /// Standard deviation of a per-clip pitch shift applied to every clip,
    /// normal or not, in cents.
    #[serde(default)]
    pub pitch_jitter_cents: f64,
    /// Pitch shift applied to every tone of an anomalous clip, in cents.
    pub detune_cents: f64,
    /// Mean click count per second.
    pub click_rate_hz: f64,
    pub click_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthMachine {
    pub name: String,
    pub sections: Vec<SynthSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub id: u32,
    pub base_hz: f64,
    pub noise: DomainNoise,
    pub counts: ClipCounts,
    pub attributes: Vec<SynthAttribute>,
}

/// Standard deviation of the white noise floor per domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainNoise {
    pub source: f64,
    pub target: f64,
}

/// Test counts are per domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipCounts {
    pub train_source: usize,
    pub train_target: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthAttribute {
    pub name: String,
    pub values: Vec<AttributeValue>,
    /// Value set used in the target domain; the source set when absent.
    #[serde(default)]
    pub target_values: Option<Vec<AttributeValue>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeValue {
    pub value: String,
    pub tone_hz: f64,
    /// Amplitude-modulation rate; 0 for a steady tone.
    #[serde(default)]
    pub am_hz: f64,
}

impl SynthSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("synth spec is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        let bad = |msg: String| Err(HmicError::Config(msg));
        if self.sample_rate_hz == 0 || !(self.duration_s > 0.0) {
            return bad("sample rate and duration must be positive".into());
        }
        if self.machines.is_empty() {
            return bad("spec has no machines".into());
        }
        let detune = 2f64.powf(self.anomaly.detune_cents.abs() / 1200.0);
        if self.anomaly.click_rate_hz < 0.0 || self.anomaly.click_amplitude < 0.0 || self.anomaly.pitch_jitter_cents < 0.0 {
            return bad("anomaly click and jitter settings must be non-negative".into());
        }
        let token_ok = |s: &str| !s.is_empty() && !s.contains(['_', '/', '\\', ';', '=', ',']);
        for m in &self.machines {
            if !token_ok(&m.name) {
                return bad(format!("machine name `{}` must be a plain token", m.name));
            }
            if m.sections.is_empty() {
                return bad(format!("machine `{}` has no sections", m.name));
            }
            let mut ids: Vec<u32> = m.sections.iter().map(|s| s.id).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != m.sections.len() {
                return bad(format!("machine `{}` repeats a section id", m.name));
            }
            for s in &m.sections {
                let c = s.counts;
                if c.train_source == 0 || c.train_target == 0 || c.test_normal == 0 || c.test_anomalous == 0 {
                    return bad(format!("section {} of `{}` needs positive clip counts", s.id, m.name));
                }
                if s.noise.source < 0.0 || s.noise.target < 0.0 {
                    return bad("noise levels must be non-negative".into());
                }
                let mut freqs = vec![s.base_hz * 3.0];
                let mut names: Vec<&str> = Vec::new();
                for a in &s.attributes {
                    if !token_ok(&a.name) || names.contains(&a.name.as_str()) {
                        return bad(format!("attribute name `{}` is invalid or repeated", a.name));
                    }
                    names.push(&a.name);
                    let target = a.target_values.as_deref().unwrap_or(&[]);
                    if a.values.is_empty() || a.target_values.as_ref().is_some_and(Vec::is_empty) {
                        return bad(format!("attribute `{}` has an empty value set", a.name));
                    }
                    for v in a.values.iter().chain(target) {
                        if !token_ok(&v.value) {
                            return bad(format!("attribute value `{}` must be a plain token", v.value));
                        }
                        freqs.push(v.tone_hz);
                    }
                }
                if let Some(f) = freqs.iter().find(|&&f| !(f > 0.0 && f * detune < nyquist)) {
                    return bad(format!("tone {f} Hz (after detune) is not below nyquist {nyquist} Hz"));
                }
            }
        }
        Ok(())
    }

    /// Desk-scale corpus used by the examples and the acceptance suite:
    /// one machine, three sections, one three-valued attribute per section
    /// whose value set is replaced by a new value in the target domain.
    pub fn default_corpus(seed: u64) -> Self {
        let av = |value: &str, tone_hz: f64, am_hz: f64| AttributeValue { value: value.into(), tone_hz, am_hz };
        let counts = ClipCounts { train_source: 50, train_target: 10, test_normal: 20, test_anomalous: 20 };
        let noise = DomainNoise { source: 0.01, target: 0.03 };
        let section = |id: u32, base_hz: f64, attrs: Vec<SynthAttribute>| SynthSection {
            id,
            base_hz,
            noise,
            counts,
            attributes: attrs,
        };
        let attr = |name: &str, values: Vec<AttributeValue>, target: Option<Vec<AttributeValue>>| SynthAttribute {
            name: name.into(),
            values,
            target_values: target,
        };
        SynthSpec {
            seed,
            sample_rate_hz: 16_000,
            duration_s: 10.0,
            anomaly: AnomalySpec { pitch_jitter_cents: 25.0, detune_cents: 100.0, click_rate_hz: 0.5, click_amplitude: 0.05 },
            machines: vec![SynthMachine {
                name: "synthfan".into(),
                sections: vec![
                    section(
                        0,
                        150.0,
                        vec![attr(
                            "spd",
                            vec![av("A", 520.0, 3.0), av("B", 780.0, 7.0), av("C", 1150.0, 12.0)],
                            Some(vec![av("D", 1700.0, 5.0)]),
                        )],
                    ),
                    section(
                        1,
                        210.0,
                        vec![attr(
                            "vel",
                            vec![av("6", 610.0, 5.0), av("9", 930.0, 9.0), av("12", 1400.0, 0.0)],
                            Some(vec![av("15", 2300.0, 3.0)]),
                        )],
                    ),
                    section(
                        2,
                        270.0,
                        vec![attr(
                            "volt",
                            vec![av("1.0", 450.0, 2.0), av("1.5", 1350.0, 6.0), av("2.0", 2100.0, 10.0)],
                            Some(vec![av("2.5", 3100.0, 0.0)]),
                        )],
                    ),
                ],
            }],
        }
    }
}

/// One clip to synthesize.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPlan {
    pub meta: ClipMeta,
    /// Path relative to the corpus root.
    pub path: String,
    /// `(tone Hz, AM Hz)` for every attribute value of the clip.
    pub tones: Vec<(f64, f64)>,
    pub base_hz: f64,
    pub noise_std: f64,
}

fn combinations(attrs: &[SynthAttribute], domain: Domain) -> Vec<Vec<(String, &AttributeValue)>> {
    let mut combos: Vec<Vec<(String, &AttributeValue)>> = vec![Vec::new()];
    for a in attrs {
        let values = match (domain, &a.target_values) {
            (Domain::Target, Some(t)) => t,
            _ => &a.values,
        };
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push((a.name.clone(), v));
                    next
                })
            })
            .collect();
    }
    combos
}

/// Enumerates every clip of the corpus, in a fixed order.
pub fn plan_corpus(spec: &SynthSpec) -> Result<Vec<ClipPlan>> {
    spec.validate()?;
    let mut plans = Vec::new();
    for machine in &spec.machines {
        for section in &machine.sections {
            let c = section.counts;
            for domain in [Domain::Source, Domain::Target] {
                let combos = combinations(&section.attributes, domain);
                let noise_std = match domain {
                    Domain::Target => section.noise.target,
                    _ => section.noise.source,
                };
                let n_train = if domain == Domain::Source { c.train_source } else { c.train_target };
                let batches = [
                    (Split::Train, Condition::Normal, n_train),
                    (Split::Test, Condition::Normal, c.test_normal),
                    (Split::Test, Condition::Anomalous, c.test_anomalous),
                ];
                for (split, condition, count) in batches {
                    for i in 0..count {
                        let combo = &combos[i % combos.len()];
                        let attributes: BTreeMap<String, String> =
                            combo.iter().map(|(n, v)| (n.clone(), v.value.clone())).collect();
                        // DCASE-style token order follows the declared attribute order
                        let mut stem = format!(
                            "section_{:02}_{}_{}_{}_{:04}",
                            section.id,
                            domain,
                            split,
                            condition.filename_token(),
                            i
                        );
                        for (n, v) in combo {
                            stem.push_str(&format!("_{n}_{}", v.value));
                        }
                        let path = format!("{}/{}/{stem}.wav", machine.name, split);
                        plans.push(ClipPlan {
                            meta: ClipMeta {
                                clip_id: format!("{}/{stem}", machine.name),
                                machine_type: machine.name.clone(),
                                section_id: section.id,
                                domain,
                                split,
                                condition,
                                attributes,
                            },
                            path,
                            tones: combo.iter().map(|(_, v)| (v.tone_hz, v.am_hz)).collect(),
                            base_hz: section.base_hz,
                            noise_std,
                        });
                    }
                }
            }
        }
    }
    Ok(plans)
}

/// Per-clip seed: first 8 bytes of `SHA-256(seed_le ‖ clip_id)`.
pub fn clip_seed(seed: u64, clip_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(clip_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Renders one clip. Deterministic in `(spec.seed, plan.meta.clip_id)`.
pub fn synthesize(spec: &SynthSpec, plan: &ClipPlan) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(spec.seed, &plan.meta.clip_id));
    let rate = spec.sample_rate_hz as f64;
    let n = (spec.duration_s * rate).round() as usize;
    let anomalous = plan.meta.condition == Condition::Anomalous;
    let jitter = Normal::new(0.0, spec.anomaly.pitch_jitter_cents)
        .map_err(|e| HmicError::Config(format!("pitch jitter: {e}")))?
        .sample(&mut rng);
    let detune = if anomalous { spec.anomaly.detune_cents } else { 0.0 };
    let pitch = 2f64.powf((detune + jitter) / 1200.0);

    struct Partial {
        freq: f64,
        amp: f64,
        phase: f64,
        am_hz: f64,
        am_phase: f64,
    }
    let mut partials = Vec::new();
    for k in 1..=3 {
        partials.push(Partial {
            freq: plan.base_hz * k as f64 * pitch,
            amp: 0.12 / k as f64 * rng.random_range(0.9..1.1),
            phase: rng.random_range(0.0..2.0 * PI),
            am_hz: 0.0,
            am_phase: 0.0,
        });
    }
    for &(tone, am) in &plan.tones {
        partials.push(Partial {
            freq: tone * pitch,
            amp: 0.1 * rng.random_range(0.9..1.1),
            phase: rng.random_range(0.0..2.0 * PI),
            am_hz: am,
            am_phase: rng.random_range(0.0..2.0 * PI),
        });
    }

    let mut samples = vec![0.0; n];
    for p in &partials {
        let w = 2.0 * PI * p.freq / rate;
        let wa = 2.0 * PI * p.am_hz / rate;
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64;
            let env = if p.am_hz > 0.0 { 1.0 + 0.8 * (wa * t + p.am_phase).sin() } else { 1.0 };
            *s += p.amp * env * (w * t + p.phase).sin();
        }
    }
    if plan.noise_std > 0.0 {
        let normal = Normal::new(0.0, plan.noise_std).expect("noise std is finite and non-negative");
        for s in &mut samples {
            *s += normal.sample(&mut rng);
        }
    }
    if anomalous && spec.anomaly.click_rate_hz > 0.0 && spec.anomaly.click_amplitude > 0.0 {
        let expected = spec.anomaly.click_rate_hz * spec.duration_s;
        let count = Poisson::new(expected).expect("positive click rate").sample(&mut rng) as usize;
        // at least one click so every anomalous clip carries the transient cue
        let count = count.max(1);
        let decay = 0.002 * rate;
        let len = (0.015 * rate) as usize;
        for _ in 0..count {
            let start = rng.random_range(0..n);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for j in 0..len.min(n - start) {
                let jitter: f64 = rng.random_range(-1.0..1.0);
                samples[start + j] += sign * spec.anomaly.click_amplitude * (-(j as f64) / decay).exp() * jitter;
            }
        }
    }
    for s in &mut samples {
        *s = s.clamp(-0.999, 0.999);
    }
    Waveform::new(samples, spec.sample_rate_hz)
}

/// Writes the corpus under `out_dir` and returns its manifest, which is
/// also saved as `out_dir/manifest.csv`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let plans = plan_corpus(spec)?;
    for machine in &spec.machines {
        for split in ["train", "test"] {
            std::fs::create_dir_all(out_dir.join(&machine.name).join(split))?;
        }
    }
    plans
        .par_iter()
        .map(|plan| {
            let wave = synthesize(spec, plan)?;
            write_wav(&out_dir.join(&plan.path), &wave)
        })
        .collect::<Result<Vec<()>>>()?;
    let entries: Vec<ManifestEntry> = plans
        .into_iter()
        .map(|p| ManifestEntry { path: p.path, meta: p.meta })
        .collect();
    let file = std::fs::File::create(manifest_path(out_dir))?;
    write_manifest(std::io::BufWriter::new(file), &entries)?;
    Ok(entries)
}

pub fn manifest_path(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join("manifest.csv")
}
