//! Pipeline stages: generate, train, score, eval, and all of them in order.
//!
//! Every stage reads its inputs from the paths in [`RunConfig`] and writes
//! its outputs there. Stage outputs carry the config digest; a later stage
//! run under a different training configuration stops with
//! [`HmicError::DigestMismatch`].

use std::collections::{BTreeMap, HashMap};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{file_digest, Checkpoint, MachineModel};
use crate::config::{RunConfig, ScoringMode};
use crate::datagen::{generate, SynthSpec};
use crate::dsp::{read_feature_cache, read_wav, write_feature_cache, LogMelExtractor, LogMelSpectrogram};
use crate::error::{HmicError, Result};
use crate::evaluation::{evaluate, EvalReport, ScoredClip, Truth};
use crate::metadata::{build_label_space, read_manifest_file, ManifestEntry, Split};
use crate::model::{forward_features, train, EpochLog, TrainLog, TrainingSample};
use crate::scoring::{fit_agc, fit_dc, GroupedFeature, ScoreRecord};

/// Runs `f` on a pool of `jobs` threads, or on the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HmicError::Config(format!("cannot start {n} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Log-Mel features for manifest entries, optionally cached on disk.
///
/// Cache entries are keyed by the SHA-256 of the DSP settings and the WAV
/// bytes. Features are stored as f32 and computed features are quantized
/// the same way, so a cache hit returns exactly what a miss computes.
static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

pub struct FeatureSource {
    extractor: LogMelExtractor,
    corpus: PathBuf,
    cache: Option<PathBuf>,
    settings: Vec<u8>,
}

impl FeatureSource {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let cache = cfg.paths.cache_dir();
        if let Some(dir) = &cache {
            std::fs::create_dir_all(dir)?;
        }
        Ok(FeatureSource {
            extractor: LogMelExtractor::new(cfg.dsp.clone())?,
            corpus: cfg.paths.corpus.clone(),
            cache,
            settings: serde_json::to_vec(&cfg.dsp)?,
        })
    }

    pub fn clip_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.corpus.join(&entry.path)
    }

    pub fn features(&self, entry: &ManifestEntry) -> Result<LogMelSpectrogram> {
        let path = self.clip_path(entry);
        let Some(dir) = &self.cache else {
            return self.extractor.features(&read_wav(&path)?);
        };
        let bytes = std::fs::read(&path)?;
        let mut h = Sha256::new();
        h.update(&self.settings);
        h.update(&bytes);
        let cached = dir.join(format!("{}.lmel", hex::encode(h.finalize())));
        if let Ok(file) = std::fs::File::open(&cached) {
            if let Ok(spec) = read_feature_cache(std::io::BufReader::new(file)) {
                return Ok(spec);
            }
        }
        let spec = self.extractor.features(&read_wav(&path)?)?;
        // write to a unique temporary name, then rename into place
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = cached.with_extension(format!("tmp{}.{n}", std::process::id()));
        write_feature_cache(BufWriter::new(std::fs::File::create(&tmp)?), &spec)?;
        std::fs::rename(&tmp, &cached)?;
        Ok(spec)
    }
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.is_file() {
        return Err(HmicError::Config(format!("manifest {} does not exist", path.display())));
    }
    read_manifest_file(path)
}

/// Writes the synthetic corpus and its manifest to `paths.corpus`.
/// Uses `spec` when given, otherwise the default corpus seeded by the
/// run seed.
pub fn cmd_generate(cfg: &RunConfig, spec: Option<SynthSpec>) -> Result<Vec<ManifestEntry>> {
    let spec = spec.unwrap_or_else(|| SynthSpec::default_corpus(cfg.seed));
    spec.validate()?;
    if spec.sample_rate_hz != cfg.dsp.sample_rate_hz {
        return Err(HmicError::Config(format!(
            "corpus sample rate {} Hz differs from the front end's {} Hz",
            spec.sample_rate_hz, cfg.dsp.sample_rate_hz
        )));
    }
    with_jobs(cfg.jobs, || generate(&spec, &cfg.paths.corpus))?
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: BTreeMap<String, TrainLog>,
}

/// Trains one model per machine type on the manifest's training clips, fits
/// attribute-group and domain centres on their `f_h`, and writes the
/// checkpoint and per-machine training logs.
pub fn cmd_train(cfg: &RunConfig, mut on_epoch: impl FnMut(&str, &EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let entries = read_manifest(&cfg.paths.manifest())?;
    let mut by_machine: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
    for e in entries.into_iter().filter(|e| e.meta.split == Split::Train) {
        by_machine.entry(e.meta.machine_type.clone()).or_default().push(e);
    }
    if by_machine.is_empty() {
        return Err(HmicError::Config("manifest has no training clips".into()));
    }
    let source = FeatureSource::new(cfg)?;
    let mut machines = Vec::new();
    let mut logs = BTreeMap::new();
    for (machine, clips) in &by_machine {
        let metas: Vec<_> = clips.iter().map(|e| e.meta.clone()).collect();
        let labels = build_label_space(&metas, machine)?;
        let feats = with_jobs(cfg.jobs, || {
            clips.par_iter().map(|e| source.features(e)).collect::<Result<Vec<_>>>()
        })??;
        let n_frames = feats[0].n_frames;
        if let Some((e, f)) = clips.iter().zip(&feats).find(|(_, f)| f.n_frames != n_frames) {
            return Err(HmicError::shape(format!(
                "{} has {} frames, other training clips have {n_frames}",
                e.meta.clip_id, f.n_frames
            )));
        }
        let model_cfg = cfg.model_config(machine, labels.n_sections(), labels.n_groups(), n_frames);
        let mut samples = Vec::with_capacity(clips.len());
        let mut group_labels = Vec::with_capacity(clips.len());
        for (e, x) in clips.iter().zip(&feats) {
            let (l_id, l_ag) = labels.assign_labels(&e.meta)?;
            samples.push(TrainingSample { x, l_id, l_ag });
            group_labels.push(l_ag);
        }
        let (params, log) = train(&samples, &model_cfg, &cfg.train_config(), |ep| on_epoch(machine, ep))?;

        let embeddings = with_jobs(cfg.jobs, || {
            feats
                .par_iter()
                .map(|x| forward_features(x, &params).map(|fp| fp.f_high))
                .collect::<Result<Vec<_>>>()
        })??;
        let grouped: Vec<GroupedFeature> = embeddings
            .iter()
            .zip(clips)
            .zip(&group_labels)
            .map(|((f, e), &g)| GroupedFeature { feature: f, group: g, section: e.meta.section_id })
            .collect();
        let agc = fit_agc(&grouped, cfg.scoring.shrinkage, cfg.scoring.covariance)?;
        let by_domain: Vec<(&[f64], _, u32)> = embeddings
            .iter()
            .zip(clips)
            .map(|(f, e)| (f.as_slice(), e.meta.domain, e.meta.section_id))
            .collect();
        let dc = fit_dc(&by_domain, cfg.scoring.shrinkage, cfg.scoring.covariance)?;
        machines.push(MachineModel { labels, params, agc, dc });
        logs.insert(machine.clone(), log);
    }

    let checkpoint = Checkpoint { config_digest: cfg.digest(), config: cfg.training_view(), machines };
    checkpoint.save(&cfg.paths.checkpoint)?;
    std::fs::create_dir_all(&cfg.paths.train_logs)?;
    for (machine, log) in &logs {
        let file = std::fs::File::create(cfg.paths.train_logs.join(format!("{machine}.csv")))?;
        log.write_csv(BufWriter::new(file))?;
    }
    Ok(TrainOutcome { checkpoint, logs })
}

/// Loads the checkpoint and checks it was trained under `cfg`.
pub fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = &cfg.paths.checkpoint;
    if !path.is_file() {
        return Err(HmicError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    if ck.config_digest != cfg.digest() {
        return Err(HmicError::DigestMismatch { expected: cfg.digest_hex(), found: ck.digest_hex() });
    }
    Ok(ck)
}

/// Outcome for one clip; failed clips keep their error message.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub clip_id: String,
    pub section: u32,
    pub result: std::result::Result<ScoreRecord, String>,
}

/// Scores `entries` with the checkpoint's centres. Per-clip failures such
/// as an unknown machine type or section become error rows.
pub fn score_entries(
    cfg: &RunConfig,
    checkpoint: &Checkpoint,
    entries: &[ManifestEntry],
    mode: ScoringMode,
) -> Result<Vec<ScoreRow>> {
    let source = FeatureSource::new(cfg)?;
    let score_one = |e: &ManifestEntry| -> Result<ScoreRecord> {
        let m = checkpoint.machine(&e.meta.machine_type).ok_or_else(|| {
            HmicError::UnknownLabel(format!("machine type `{}` is not in the checkpoint", e.meta.machine_type))
        })?;
        let centres = match mode {
            ScoringMode::Agc => &m.agc,
            ScoringMode::Dc => &m.dc,
        };
        if centres.groups(e.meta.section_id).is_none() {
            return Err(HmicError::UnknownLabel(format!("section {:02} has no fitted centres", e.meta.section_id)));
        }
        let x = source.features(e)?;
        let f = forward_features(&x, &m.params)?.f_high;
        centres.score(&e.meta.clip_id, &f, e.meta.section_id)
    };
    with_jobs(cfg.jobs, || {
        entries
            .par_iter()
            .map(|e| ScoreRow {
                clip_id: e.meta.clip_id.clone(),
                section: e.meta.section_id,
                result: score_one(e).map_err(|err| err.to_string()),
            })
            .collect()
    })
}

/// Provenance written next to a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresMeta {
    pub config_digest: String,
    pub checkpoint_sha256: String,
    pub scoring: ScoringMode,
    pub n_clips: usize,
    /// `(clip_id, message)` for every clip that could not be scored.
    pub errors: Vec<(String, String)>,
}

/// Writes `clip_id,section,score,argmin_group`; error rows leave the last
/// two cells empty.
pub fn write_score_rows(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(std::fs::File::create(path)?));
    w.write_record(["clip_id", "section", "score", "argmin_group"])?;
    for r in rows {
        let section = r.section.to_string();
        match &r.result {
            Ok(rec) => w.write_record([&r.clip_id, &section, &rec.score.to_string(), &rec.argmin_group.to_string()])?,
            Err(_) => w.write_record([r.clip_id.as_str(), &section, "", ""])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a scores file; `None` marks an error row.
pub fn read_score_rows(path: &Path) -> Result<Vec<(String, u32, Option<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let section = field(1)
            .parse()
            .map_err(|_| HmicError::invalid(format!("bad section `{}` in {}", field(1), path.display())))?;
        let score = match field(2) {
            "" => None,
            s => Some(s.parse().map_err(|_| HmicError::invalid(format!("bad score `{s}` in {}", path.display())))?),
        };
        out.push((field(0).to_string(), section, score));
    }
    Ok(out)
}

pub struct ScoreOutcome {
    pub rows: Vec<ScoreRow>,
    pub meta: ScoresMeta,
}

impl ScoreOutcome {
    pub fn n_failed(&self) -> usize {
        self.meta.errors.len()
    }
}

/// Scores every test clip of the manifest and writes the scores file and
/// its sidecar.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreOutcome> {
    cfg.validate()?;
    let checkpoint = load_checkpoint(cfg)?;
    let entries: Vec<ManifestEntry> =
        read_manifest(&cfg.paths.manifest())?.into_iter().filter(|e| e.meta.split == Split::Test).collect();
    let rows = score_entries(cfg, &checkpoint, &entries, cfg.scoring.mode)?;
    write_score_rows(&cfg.paths.scores, &rows)?;
    let meta = ScoresMeta {
        config_digest: checkpoint.digest_hex(),
        checkpoint_sha256: file_digest(&cfg.paths.checkpoint)?,
        scoring: cfg.scoring.mode,
        n_clips: rows.len(),
        errors: rows
            .iter()
            .filter_map(|r| r.result.as_ref().err().map(|m| (r.clip_id.clone(), m.clone())))
            .collect(),
    };
    std::fs::write(cfg.paths.scores_meta(), serde_json::to_string_pretty(&meta)?)?;
    Ok(ScoreOutcome { rows, meta })
}

/// Joins the scores file with the manifest's ground truth and writes the
/// JSON report and its CSV export. Unscored test clips are left out.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let meta_path = cfg.paths.scores_meta();
    let digest = if meta_path.is_file() {
        let meta: ScoresMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        if meta.config_digest != cfg.digest_hex() {
            return Err(HmicError::DigestMismatch { expected: cfg.digest_hex(), found: meta.config_digest });
        }
        meta.config_digest
    } else {
        cfg.digest_hex()
    };
    if !cfg.paths.scores.is_file() {
        return Err(HmicError::Config(format!("scores file {} does not exist", cfg.paths.scores.display())));
    }
    let truth: HashMap<String, ManifestEntry> = read_manifest(&cfg.paths.manifest())?
        .into_iter()
        .filter(|e| e.meta.split == Split::Test)
        .map(|e| (e.meta.clip_id.clone(), e))
        .collect();
    let mut clips = Vec::new();
    for (clip_id, section, score) in read_score_rows(&cfg.paths.scores)? {
        let e = truth
            .get(&clip_id)
            .ok_or_else(|| HmicError::invalid(format!("scored clip `{clip_id}` is not a test clip of the manifest")))?;
        if e.meta.section_id != section {
            return Err(HmicError::invalid(format!("clip `{clip_id}` has section {section} in the scores file")));
        }
        if let Some(score) = score {
            clips.push(ScoredClip {
                clip_id,
                machine_type: e.meta.machine_type.clone(),
                section,
                domain: e.meta.domain,
                truth: Truth::try_from(e.meta.condition)?,
                score,
            });
        }
    }
    let mut report = evaluate(&clips, cfg.eval.pauc_p)?;
    report.config_digest = Some(digest);
    write_report(cfg, &report)?;
    Ok(report)
}

pub fn write_report(cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    if let Some(dir) = cfg.paths.report.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&cfg.paths.report, report.to_json())?;
    report.write_csv(BufWriter::new(std::fs::File::create(cfg.paths.report_csv())?))
}

pub struct PipelineOutcome {
    pub train: TrainOutcome,
    pub score: ScoreOutcome,
    pub report: EvalReport,
}

/// Runs generate, train, score and eval in sequence.
pub fn cmd_pipeline(
    cfg: &RunConfig,
    spec: Option<SynthSpec>,
    on_epoch: impl FnMut(&str, &EpochLog),
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    cmd_generate(cfg, spec)?;
    let train = cmd_train(cfg, on_epoch)?;
    let score = cmd_score(cfg)?;
    let report = cmd_eval(cfg)?;
    Ok(PipelineOutcome { train, score, report })
}
