//! AUC, partial AUC and harmonic-mean aggregation over report cells.
//!
//! AUC and the full-range ROC area are computed from integer counts, so the
//! Mann–Whitney form and the trapezoid form agree bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HmicError, Result};
use crate::metadata::{Condition, Domain};

pub const DEFAULT_PAUC_P: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Normal,
    Anomalous,
}

impl TryFrom<Condition> for Truth {
    type Error = HmicError;

    fn try_from(c: Condition) -> Result<Self> {
        match c {
            Condition::Normal => Ok(Truth::Normal),
            Condition::Anomalous => Ok(Truth::Anomalous),
            Condition::Unknown => Err(HmicError::invalid("clip has no ground-truth condition")),
        }
    }
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Truth::Normal => "normal",
            Truth::Anomalous => "anomalous",
        })
    }
}

impl FromStr for Truth {
    type Err = HmicError;

    fn from_str(s: &str) -> Result<Self> {
        Truth::try_from(s.parse::<Condition>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub clip_id: String,
    pub machine_type: String,
    pub section: u32,
    pub domain: Domain,
    pub truth: Truth,
    pub score: f64,
}

fn split_scores<I>(clips: I) -> Result<(Vec<f64>, Vec<f64>)>
where
    I: IntoIterator<Item = (Truth, f64)>,
{
    let mut normal = Vec::new();
    let mut anomalous = Vec::new();
    for (t, s) in clips {
        if !s.is_finite() {
            return Err(HmicError::invalid(format!("non-finite score {s}")));
        }
        match t {
            Truth::Normal => normal.push(s),
            Truth::Anomalous => anomalous.push(s),
        }
    }
    if normal.is_empty() || anomalous.is_empty() {
        return Err(HmicError::UndefinedMetric(format!(
            "need both classes, got {} normal and {} anomalous",
            normal.len(),
            anomalous.len()
        )));
    }
    Ok((normal, anomalous))
}

/// `2U`, twice the Mann–Whitney count: pairs with the anomaly scored higher
/// count 2, ties count 1.
fn mann_whitney_twice(normal: &[f64], anomalous: &[f64]) -> u64 {
    let mut sorted = normal.to_vec();
    sorted.sort_by(f64::total_cmp);
    anomalous
        .iter()
        .map(|&a| {
            let below = sorted.partition_point(|&n| n < a) as u64;
            let not_above = sorted.partition_point(|&n| n <= a) as u64;
            2 * below + (not_above - below)
        })
        .sum()
}

/// AUC from plain score lists. Higher scores mean more anomalous.
pub fn auc_from_scores(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    let (normal, anomalous) = split_scores(
        normal
            .iter()
            .map(|&s| (Truth::Normal, s))
            .chain(anomalous.iter().map(|&s| (Truth::Anomalous, s))),
    )?;
    let pairs = 2 * normal.len() as u64 * anomalous.len() as u64;
    Ok(mann_whitney_twice(&normal, &anomalous) as f64 / pairs as f64)
}

pub fn auc(clips: &[ScoredClip]) -> Result<f64> {
    let (normal, anomalous) = split_scores(clips.iter().map(|c| (c.truth, c.score)))?;
    auc_from_scores(&normal, &anomalous)
}

/// ROC staircase as integer `(false positives, true positives)` points,
/// from `(0, 0)` to `(n_normal, n_anomalous)`, one step per distinct score.
pub fn roc_points(normal: &[f64], anomalous: &[f64]) -> Vec<(u64, u64)> {
    let mut all: Vec<(f64, Truth)> = normal
        .iter()
        .map(|&s| (s, Truth::Normal))
        .chain(anomalous.iter().map(|&s| (s, Truth::Anomalous)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0, 0)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0 == threshold {
            match all[i].1 {
                Truth::Normal => fp += 1,
                Truth::Anomalous => tp += 1,
            }
            i += 1;
        }
        points.push((fp, tp));
    }
    points
}

/// Area under the ROC curve for FPR in `[0, p]`, divided by `p`.
pub fn pauc_from_scores(normal: &[f64], anomalous: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(HmicError::invalid(format!("pAUC range {p} is outside (0, 1]")));
    }
    let (normal, anomalous) = split_scores(
        normal
            .iter()
            .map(|&s| (Truth::Normal, s))
            .chain(anomalous.iter().map(|&s| (Truth::Anomalous, s))),
    )?;
    let n_neg = normal.len() as u64;
    let n_pos = anomalous.len() as u64;
    let limit = p * n_neg as f64;
    // full trapezoids are summed as exact integers (twice the area)
    let mut twice_area: u64 = 0;
    let mut partial = 0.0;
    for w in roc_points(&normal, &anomalous).windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x1 as f64 <= limit {
            twice_area += (x1 - x0) * (y0 + y1);
        } else {
            if (x0 as f64) < limit {
                let dx = limit - x0 as f64;
                let y_cut = y0 as f64 + (y1 - y0) as f64 * dx / (x1 - x0) as f64;
                partial = dx * (y0 as f64 + y_cut) / 2.0;
            }
            break;
        }
    }
    // normalizing by the cut-off in count units keeps p = 1 identical to
    // the Mann–Whitney ratio and perfect separation exactly 1
    let area = (twice_area as f64 / 2.0 + partial) / (limit * n_pos as f64);
    Ok(area.min(1.0))
}

pub fn pauc(clips: &[ScoredClip], p: f64) -> Result<f64> {
    let (normal, anomalous) = split_scores(clips.iter().map(|c| (c.truth, c.score)))?;
    pauc_from_scores(&normal, &anomalous, p)
}

/// Harmonic mean `n / Σ 1/xᵢ`; undefined for an empty list or any cell
/// that is not strictly positive.
pub fn harmonic_total(cells: &[f64]) -> Result<f64> {
    if cells.is_empty() {
        return Err(HmicError::UndefinedMetric("harmonic mean of no cells".into()));
    }
    if let Some(x) = cells.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
        return Err(HmicError::UndefinedMetric(format!("harmonic mean with cell value {x}")));
    }
    Ok(cells.len() as f64 / cells.iter().map(|x| 1.0 / x).sum::<f64>())
}

/// One report cell: a machine type, section and domain slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub machine_type: String,
    pub section: u32,
    pub domain: Domain,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub auc: f64,
    pub pauc: f64,
}

/// AUC and pAUC of one section with both domains pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionSummary {
    pub section: u32,
    pub auc: f64,
    pub pauc: f64,
}

/// Harmonic means; `None` when a cell is zero and the mean is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicPair {
    pub auc: Option<f64>,
    pub pauc: Option<f64>,
}

impl HarmonicPair {
    fn of(cells: &[&EvalCell]) -> Self {
        let aucs: Vec<f64> = cells.iter().map(|c| c.auc).collect();
        let paucs: Vec<f64> = cells.iter().map(|c| c.pauc).collect();
        HarmonicPair { auc: harmonic_total(&aucs).ok(), pauc: harmonic_total(&paucs).ok() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSummary {
    pub machine_type: String,
    pub harmonic: HarmonicPair,
    pub sections: Vec<SectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pauc_p: f64,
    #[serde(default)]
    pub config_digest: Option<String>,
    pub cells: Vec<EvalCell>,
    pub machines: Vec<MachineSummary>,
    /// Harmonic means over every cell of every machine type.
    pub total: HarmonicPair,
}

/// Builds the report: one cell per `(machine type, section, domain)`,
/// pooled per-section figures, per-machine and overall harmonic means.
pub fn evaluate(clips: &[ScoredClip], p: f64) -> Result<EvalReport> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(HmicError::invalid(format!("pAUC range {p} is outside (0, 1]")));
    }
    let mut slices: BTreeMap<(&str, u32, Domain), Vec<&ScoredClip>> = BTreeMap::new();
    for c in clips {
        slices.entry((&c.machine_type, c.section, c.domain)).or_default().push(c);
    }
    if slices.is_empty() {
        return Err(HmicError::UndefinedMetric("no scored clips".into()));
    }
    let mut cells = Vec::new();
    for ((machine, section, domain), members) in &slices {
        let (normal, anomalous) = split_scores(members.iter().map(|c| (c.truth, c.score))).map_err(|e| {
            HmicError::UndefinedMetric(format!("{machine} section {section:02} {domain}: {e}"))
        })?;
        cells.push(EvalCell {
            machine_type: machine.to_string(),
            section: *section,
            domain: *domain,
            n_normal: normal.len(),
            n_anomalous: anomalous.len(),
            auc: auc_from_scores(&normal, &anomalous)?,
            pauc: pauc_from_scores(&normal, &anomalous, p)?,
        });
    }

    let mut by_section: BTreeMap<(&str, u32), Vec<&ScoredClip>> = BTreeMap::new();
    for c in clips {
        by_section.entry((&c.machine_type, c.section)).or_default().push(c);
    }
    let mut machines: Vec<MachineSummary> = Vec::new();
    for ((machine, section), members) in &by_section {
        let (normal, anomalous) = split_scores(members.iter().map(|c| (c.truth, c.score)))?;
        let summary = SectionSummary {
            section: *section,
            auc: auc_from_scores(&normal, &anomalous)?,
            pauc: pauc_from_scores(&normal, &anomalous, p)?,
        };
        match machines.last_mut() {
            Some(m) if m.machine_type == *machine => m.sections.push(summary),
            _ => machines.push(MachineSummary {
                machine_type: machine.to_string(),
                harmonic: HarmonicPair { auc: None, pauc: None },
                sections: vec![summary],
            }),
        }
    }
    for m in &mut machines {
        let own: Vec<&EvalCell> = cells.iter().filter(|c| c.machine_type == m.machine_type).collect();
        m.harmonic = HarmonicPair::of(&own);
    }
    let total = HarmonicPair::of(&cells.iter().collect::<Vec<_>>());
    Ok(EvalReport { pauc_p: p, config_digest: None, cells, machines, total })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Flat export with header `scope,machine_type,section,domain,auc,pauc`.
    /// Scope is `cell`, `section`, `machine` or `total`; undefined harmonic
    /// means are left empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scope", "machine_type", "section", "domain", "auc", "pauc"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.cells {
            out.write_record([
                "cell",
                &c.machine_type,
                &format!("{:02}", c.section),
                c.domain.as_str(),
                &c.auc.to_string(),
                &c.pauc.to_string(),
            ])?;
        }
        for m in &self.machines {
            for s in &m.sections {
                out.write_record([
                    "section",
                    &m.machine_type,
                    &format!("{:02}", s.section),
                    "",
                    &s.auc.to_string(),
                    &s.pauc.to_string(),
                ])?;
            }
            out.write_record(["machine", &m.machine_type, "", "", &opt(m.harmonic.auc), &opt(m.harmonic.pauc)])?;
        }
        out.write_record(["total", "", "", "", &opt(self.total.auc), &opt(self.total.pauc)])?;
        out.flush()?;
        Ok(())
    }
}
