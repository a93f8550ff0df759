//! Clip metadata and the per-machine label tree.
//!
//! Each machine type owns a two-level tree: section IDs are the inner nodes
//! and attribute groups (clips of one section sharing an identical
//! attribute name/value combination) are the leaves. Section nodes supply
//! the low-level label `l_id`, leaves supply the high-level label `l_ag`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HmicError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Anomalous,
    Unknown,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::Unknown => "unknown",
        }
    }
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Anomalous => "anomalous",
            Condition::Unknown => "unknown",
        }
    }

    /// Token used in DCASE filenames (`anomaly` rather than `anomalous`).
    pub fn filename_token(&self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Anomalous => "anomaly",
            Condition::Unknown => "unknown",
        }
    }
}

macro_rules! display_as_str {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    )*};
}
display_as_str!(Domain, Split, Condition);

impl FromStr for Domain {
    type Err = HmicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            "unknown" => Ok(Domain::Unknown),
            other => Err(HmicError::invalid(format!("unknown domain `{other}`"))),
        }
    }
}

impl FromStr for Split {
    type Err = HmicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(HmicError::invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl FromStr for Condition {
    type Err = HmicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Condition::Normal),
            "anomalous" | "anomaly" => Ok(Condition::Anomalous),
            "unknown" => Ok(Condition::Unknown),
            other => Err(HmicError::invalid(format!("unknown condition `{other}`"))),
        }
    }
}

/// Identity of one audio clip.
///
/// `attributes` is a `BTreeMap`, so iteration is always key-sorted and two
/// clips with the same pairs compare equal regardless of token order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: String,
    pub machine_type: String,
    pub section_id: u32,
    pub domain: Domain,
    pub split: Split,
    pub condition: Condition,
    pub attributes: BTreeMap<String, String>,
}

impl ClipMeta {
    /// Checks the training-implies-normal invariant.
    pub fn validate(&self) -> Result<()> {
        if self.split == Split::Train && self.condition != Condition::Normal {
            return Err(HmicError::invalid(format!(
                "clip `{}` is in the training split but not normal",
                self.clip_id
            )));
        }
        Ok(())
    }

    pub fn group_key(&self) -> AttributeGroupKey {
        AttributeGroupKey {
            section_id: self.section_id,
            attribute_pairs: self
                .attributes
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// The DCASE-style filename this clip would carry, with `index` as the
    /// running clip number. Attribute tokens are emitted in sorted order.
    pub fn dcase_filename(&self, index: usize) -> String {
        let mut name = format!(
            "section_{:02}_{}_{}_{}_{:04}",
            self.section_id,
            self.domain,
            self.split,
            self.condition.filename_token(),
            index
        );
        for (k, v) in &self.attributes {
            name.push('_');
            name.push_str(k);
            name.push('_');
            name.push_str(v);
        }
        name.push_str(".wav");
        name
    }
}

/// Leaf identity in the label tree: a section plus the canonical sorted
/// attribute pairs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributeGroupKey {
    pub section_id: u32,
    pub attribute_pairs: Vec<(String, String)>,
}

impl fmt::Display for AttributeGroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "section {:02} {{", self.section_id)?;
        for (i, (k, v)) in self.attribute_pairs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}: {v}")?;
        }
        f.write_str("}")
    }
}

fn filename_error(filename: &str, reason: impl Into<String>) -> HmicError {
    HmicError::Filename {
        filename: filename.to_string(),
        reason: reason.into(),
    }
}

/// Parses a DCASE 2022 Task 2 filename of the form
/// `section_<SS>_<domain>_<split>_<condition>_<idx>_<attr>_<val>_..._.wav`.
///
/// Only the final path component is inspected. `clip_id` is the file stem
/// and `machine_type` is left empty; use [`parse_dcase_path`] to also pick
/// up the machine directory.
pub fn parse_dcase_filename(filename: &str) -> Result<ClipMeta> {
    let name = Path::new(filename)
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| filename_error(filename, "no file name component"))?;
    let stem = name
        .strip_suffix(".wav")
        .ok_or_else(|| filename_error(filename, "missing `.wav` extension"))?;
    let tokens: Vec<&str> = stem.split('_').collect();
    if tokens.len() < 6 {
        return Err(filename_error(
            filename,
            format!("expected at least 6 `_`-separated tokens, found {}", tokens.len()),
        ));
    }
    if tokens[0] != "section" {
        return Err(filename_error(
            filename,
            format!("offending token `{}`: expected `section`", tokens[0]),
        ));
    }
    let section_id: u32 = tokens[1].parse().map_err(|_| {
        filename_error(filename, format!("offending token `{}`: section is not an integer", tokens[1]))
    })?;
    let domain = match tokens[2] {
        "source" => Domain::Source,
        "target" => Domain::Target,
        t => return Err(filename_error(filename, format!("offending token `{t}`: unknown domain"))),
    };
    let split = match tokens[3] {
        "train" => Split::Train,
        "test" => Split::Test,
        t => return Err(filename_error(filename, format!("offending token `{t}`: unknown split"))),
    };
    let condition = match tokens[4] {
        "normal" => Condition::Normal,
        "anomaly" => Condition::Anomalous,
        t => return Err(filename_error(filename, format!("offending token `{t}`: unknown condition"))),
    };
    if tokens[5].is_empty() || !tokens[5].bytes().all(|b| b.is_ascii_digit()) {
        return Err(filename_error(
            filename,
            format!("offending token `{}`: clip index is not numeric", tokens[5]),
        ));
    }

    let attr_tokens = &tokens[6..];
    if attr_tokens.len() % 2 != 0 {
        return Err(filename_error(
            filename,
            format!(
                "offending token `{}`: attribute tokens must come in name/value pairs",
                attr_tokens[attr_tokens.len() - 1]
            ),
        ));
    }
    let mut attributes = BTreeMap::new();
    for pair in attr_tokens.chunks(2) {
        if pair[0].is_empty() || pair[1].is_empty() {
            return Err(filename_error(filename, "empty attribute token"));
        }
        if attributes.insert(pair[0].to_string(), pair[1].to_string()).is_some() {
            return Err(filename_error(
                filename,
                format!("offending token `{}`: duplicate attribute name", pair[0]),
            ));
        }
    }

    let meta = ClipMeta {
        clip_id: stem.to_string(),
        machine_type: String::new(),
        section_id,
        domain,
        split,
        condition,
        attributes,
    };
    meta.validate()
        .map_err(|e| filename_error(filename, e.to_string()))?;
    Ok(meta)
}

/// Like [`parse_dcase_filename`], but for a `<machine>/<split>/<file>.wav`
/// path: the machine type is taken from the directory two levels up and the
/// clip id becomes `<machine>/<stem>` so it stays unique across machines.
pub fn parse_dcase_path(path: &str) -> Result<ClipMeta> {
    let mut meta = parse_dcase_filename(path)?;
    let machine = Path::new(path)
        .parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .and_then(|n| n.to_str())
        .filter(|n| !n.is_empty());
    if let Some(machine) = machine {
        meta.machine_type = machine.to_string();
        meta.clip_id = format!("{machine}/{}", meta.clip_id);
    }
    Ok(meta)
}

/// The per-machine label tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub machine_type: String,
    /// section id -> `l_id` in `[0, S)`
    pub id_labels: BTreeMap<u32, usize>,
    /// group key -> `l_ag` in `[0, M_total)`
    #[serde(with = "group_map")]
    pub ag_labels: BTreeMap<AttributeGroupKey, usize>,
    /// section id -> the `l_ag` leaves under it, ascending
    pub ag_by_section: BTreeMap<u32, Vec<usize>>,
}

// JSON object keys must be strings, so the group map is stored as a list.
mod group_map {
    use super::AttributeGroupKey;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        key: AttributeGroupKey,
        label: usize,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<AttributeGroupKey, usize>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(k, v)| Entry { key: k.clone(), label: *v })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<AttributeGroupKey, usize>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.key, e.label)).collect())
    }
}

impl LabelSpace {
    pub fn n_sections(&self) -> usize {
        self.id_labels.len()
    }

    pub fn n_groups(&self) -> usize {
        self.ag_labels.len()
    }

    /// Returns `(l_id, l_ag)` for a clip whose section and attribute
    /// combination were seen at construction time.
    pub fn assign_labels(&self, clip: &ClipMeta) -> Result<(usize, usize)> {
        let l_id = *self.id_labels.get(&clip.section_id).ok_or_else(|| {
            HmicError::UnknownLabel(format!(
                "section {:02} of clip `{}` is not in the label space",
                clip.section_id, clip.clip_id
            ))
        })?;
        let key = clip.group_key();
        let l_ag = *self.ag_labels.get(&key).ok_or_else(|| {
            HmicError::UnknownLabel(format!(
                "attribute group {key} of clip `{}` is not in the label space",
                clip.clip_id
            ))
        })?;
        Ok((l_id, l_ag))
    }

    /// Key of the group carrying label `l_ag`.
    pub fn group_key(&self, l_ag: usize) -> Option<&AttributeGroupKey> {
        self.ag_labels.iter().find(|(_, &v)| v == l_ag).map(|(k, _)| k)
    }

    pub fn section_of_group(&self, l_ag: usize) -> Option<u32> {
        self.group_key(l_ag).map(|k| k.section_id)
    }
}

/// Builds the label tree for one machine type from its training clips.
///
/// Labels are assigned in sorted order (section first, then canonical
/// attribute pairs), so the result does not depend on clip order.
pub fn build_label_space(clips: &[ClipMeta], machine_type: &str) -> Result<LabelSpace> {
    if clips.is_empty() {
        return Err(HmicError::invalid("cannot build a label space from zero clips"));
    }
    let mut sections = BTreeSet::new();
    let mut groups = BTreeSet::new();
    for clip in clips {
        if clip.machine_type != machine_type {
            return Err(HmicError::invalid(format!(
                "clip `{}` has machine type `{}`, expected `{machine_type}`",
                clip.clip_id, clip.machine_type
            )));
        }
        if clip.split != Split::Train {
            return Err(HmicError::invalid(format!(
                "clip `{}` is not a training clip",
                clip.clip_id
            )));
        }
        clip.validate()?;
        sections.insert(clip.section_id);
        groups.insert(clip.group_key());
    }

    let id_labels: BTreeMap<u32, usize> =
        sections.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut ag_labels = BTreeMap::new();
    let mut ag_by_section: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (label, key) in groups.into_iter().enumerate() {
        ag_by_section.entry(key.section_id).or_default().push(label);
        ag_labels.insert(key, label);
    }
    Ok(LabelSpace {
        machine_type: machine_type.to_string(),
        id_labels,
        ag_labels,
        ag_by_section,
    })
}

/// Number of attribute groups per section found in a list of DCASE
/// filenames (one per line; blank lines and lines that are not training
/// clips are skipped).
pub fn count_groups_in_listing(listing: &str) -> Result<BTreeMap<u32, usize>> {
    let mut groups: BTreeSet<AttributeGroupKey> = BTreeSet::new();
    for line in listing.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let meta = parse_dcase_filename(line)?;
        if meta.split == Split::Train {
            groups.insert(meta.group_key());
        }
    }
    let mut counts = BTreeMap::new();
    for key in groups {
        *counts.entry(key.section_id).or_insert(0) += 1;
    }
    Ok(counts)
}

/// One manifest row: a clip and the path to its audio, relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub meta: ClipMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    clip_id: String,
    path: String,
    machine_type: String,
    section: u32,
    domain: String,
    split: String,
    condition: String,
    attributes: String,
}

/// Formats attributes as `name=value;name=value` with sorted names.
pub fn format_attributes(attributes: &BTreeMap<String, String>) -> String {
    attributes
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_attributes(s: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for item in s.split(';').filter(|i| !i.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| HmicError::invalid(format!("attribute `{item}` is not `name=value`")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(HmicError::invalid(format!("duplicate attribute `{k}`")));
        }
    }
    Ok(out)
}

pub fn write_manifest<W: std::io::Write>(writer: W, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in entries {
        let m = &e.meta;
        w.serialize(ManifestRecord {
            clip_id: m.clip_id.clone(),
            path: e.path.clone(),
            machine_type: m.machine_type.clone(),
            section: m.section_id,
            domain: m.domain.to_string(),
            split: m.split.to_string(),
            condition: m.condition.to_string(),
            attributes: format_attributes(&m.attributes),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: std::io::Read>(reader: R) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: ManifestRecord = rec?;
        let meta = ClipMeta {
            clip_id: rec.clip_id,
            machine_type: rec.machine_type,
            section_id: rec.section,
            domain: rec.domain.parse()?,
            split: rec.split.parse()?,
            condition: rec.condition.parse()?,
            attributes: parse_attributes(&rec.attributes)?,
        };
        meta.validate()?;
        out.push(ManifestEntry { path: rec.path, meta });
    }
    Ok(out)
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| {
        HmicError::Config(format!("cannot open manifest {}: {e}", path.display()))
    })?;
    read_manifest(std::io::BufReader::new(file))
}
