//! Centre-based anomaly scoring.
//!
//! Each attribute group of a section gets a centre (the mean of its
//! training embeddings) and a shrunk covariance. A test clip's score is the
//! smallest Mahalanobis distance from its embedding to any centre of its
//! section. The domain-centre variant is the same machinery with one group
//! per domain instead of per attribute group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HmicError, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::metadata::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// One covariance per group.
    #[default]
    PerGroup,
    /// Every group of a section shares the pooled within-group covariance.
    PerSectionPooled,
}

impl std::str::FromStr for CovarianceMode {
    type Err = HmicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_group" => Ok(CovarianceMode::PerGroup),
            "per_section_pooled" => Ok(CovarianceMode::PerSectionPooled),
            other => Err(HmicError::Config(format!("unknown covariance mode `{other}`"))),
        }
    }
}

/// Diagonal loading added to a covariance before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    /// `max(factor · trace(Σ) / d, floor)`.
    Relative { factor: f64, floor: f64 },
    Fixed(f64),
}

impl Default for Shrinkage {
    fn default() -> Self {
        Shrinkage::Relative { factor: 1e-3, floor: 1e-6 }
    }
}

impl Shrinkage {
    pub fn epsilon(&self, cov: &Matrix) -> f64 {
        match *self {
            Shrinkage::Relative { factor, floor } => {
                (factor * cov.trace() / cov.rows() as f64).max(floor)
            }
            Shrinkage::Fixed(eps) => eps,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shrinkage::Relative { factor, floor } => factor >= 0.0 && floor > 0.0,
            Shrinkage::Fixed(eps) => eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(HmicError::Config(format!("shrinkage {self:?} must be strictly positive")))
        }
    }
}

/// One centre with its covariance and the factor of `Σ + εI`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentreGroup {
    pub label: usize,
    pub centre: Vec<f64>,
    /// Population covariance before shrinkage.
    pub covariance: Matrix,
    pub epsilon: f64,
    pub n_clips: usize,
    factor: Cholesky,
}

impl CentreGroup {
    /// Rebuilds a group from stored parts, refactorizing `Σ + εI`.
    pub fn from_parts(
        label: usize,
        centre: Vec<f64>,
        covariance: Matrix,
        epsilon: f64,
        n_clips: usize,
    ) -> Result<Self> {
        let d = centre.len();
        if covariance.rows() != d || covariance.cols() != d {
            return Err(HmicError::shape(format!(
                "covariance is {}x{}, centre has dim {d}",
                covariance.rows(),
                covariance.cols()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(HmicError::invalid("shrinkage epsilon must be positive"));
        }
        let mut shrunk = covariance.clone();
        shrunk.add_diagonal(epsilon);
        let factor = Cholesky::factor(&shrunk)?;
        Ok(CentreGroup { label, centre, covariance, epsilon, n_clips, factor })
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    /// `Σ + εI`.
    pub fn shrunk_covariance(&self) -> Matrix {
        let mut m = self.covariance.clone();
        m.add_diagonal(self.epsilon);
        m
    }

    pub fn distance(&self, f: &[f64]) -> Result<f64> {
        mahalanobis(f, &self.centre, &self.factor)
    }
}

/// Centres grouped by section. Used for both attribute-group centres and
/// domain centres.
#[derive(Debug, Clone, PartialEq)]
pub struct CentreModel {
    dim: usize,
    sections: BTreeMap<u32, Vec<CentreGroup>>,
}

pub type AgcModel = CentreModel;
pub type DcModel = CentreModel;

/// A training embedding with its group label and section.
#[derive(Debug, Clone, Copy)]
pub struct GroupedFeature<'a> {
    pub feature: &'a [f64],
    pub group: usize,
    pub section: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub clip_id: String,
    pub section: u32,
    pub score: f64,
    pub argmin_group: usize,
}

/// `√((f−c)ᵀ (Σ+εI)⁻¹ (f−c))` through the Cholesky factor.
pub fn mahalanobis(f: &[f64], c: &[f64], factor: &Cholesky) -> Result<f64> {
    if f.len() != c.len() || f.len() != factor.dim() {
        return Err(HmicError::shape(format!(
            "feature dim {}, centre dim {}, covariance dim {}",
            f.len(),
            c.len(),
            factor.dim()
        )));
    }
    let diff: Vec<f64> = f.iter().zip(c).map(|(a, b)| a - b).collect();
    Ok(factor.quadratic_form(&diff).sqrt())
}

fn mean_and_covariance(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Matrix) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix::zeros(dim, dim);
    for r in rows {
        let d: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

impl CentreModel {
    /// Fits one centre per `(section, group)`. Members of a group are sorted
    /// before summation, so the result is independent of input order.
    pub fn fit(
        features: &[GroupedFeature<'_>],
        shrinkage: Shrinkage,
        mode: CovarianceMode,
    ) -> Result<Self> {
        shrinkage.validate()?;
        let first = features
            .first()
            .ok_or_else(|| HmicError::invalid("cannot fit centres without features"))?;
        let dim = first.feature.len();
        if dim == 0 {
            return Err(HmicError::invalid("features must be non-empty vectors"));
        }
        let mut members: BTreeMap<(u32, usize), Vec<&[f64]>> = BTreeMap::new();
        let mut group_section: BTreeMap<usize, u32> = BTreeMap::new();
        for f in features {
            if f.feature.len() != dim {
                return Err(HmicError::shape(format!(
                    "feature dims differ: {} vs {dim}",
                    f.feature.len()
                )));
            }
            if f.feature.iter().any(|v| !v.is_finite()) {
                return Err(HmicError::invalid(format!(
                    "non-finite feature in group {} of section {}",
                    f.group, f.section
                )));
            }
            if let Some(&s) = group_section.get(&f.group) {
                if s != f.section {
                    return Err(HmicError::invalid(format!(
                        "group {} appears in sections {s} and {}",
                        f.group, f.section
                    )));
                }
            }
            group_section.insert(f.group, f.section);
            members.entry((f.section, f.group)).or_default().push(f.feature);
        }

        let mut stats: BTreeMap<u32, Vec<(usize, Vec<f64>, Matrix, usize)>> = BTreeMap::new();
        for ((section, group), rows) in &members {
            // sort for order independence of floating-point sums
            let mut rows = rows.clone();
            rows.sort_by(|a, b| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let (mean, cov) = mean_and_covariance(&rows, dim);
            stats.entry(*section).or_default().push((*group, mean, cov, rows.len()));
        }

        let mut sections = BTreeMap::new();
        for (section, groups) in stats {
            let pooled = match mode {
                CovarianceMode::PerGroup => None,
                CovarianceMode::PerSectionPooled => {
                    let total: usize = groups.iter().map(|g| g.3).sum();
                    let mut p = Matrix::zeros(dim, dim);
                    for (_, _, cov, n) in &groups {
                        let w = *n as f64 / total as f64;
                        for (a, b) in p.as_mut_slice().iter_mut().zip(cov.as_slice()) {
                            *a += w * b;
                        }
                    }
                    Some(p)
                }
            };
            let mut built = Vec::with_capacity(groups.len());
            for (label, centre, cov, n) in groups {
                let cov = pooled.clone().unwrap_or(cov);
                let eps = shrinkage.epsilon(&cov);
                built.push(CentreGroup::from_parts(label, centre, cov, eps, n)?);
            }
            sections.insert(section, built);
        }
        Ok(CentreModel { dim, sections })
    }

    /// Assembles a model from already-built groups (e.g. a checkpoint).
    pub fn from_groups(dim: usize, mut sections: BTreeMap<u32, Vec<CentreGroup>>) -> Result<Self> {
        for groups in sections.values() {
            for g in groups {
                if g.centre.len() != dim {
                    return Err(HmicError::shape(format!(
                        "group {} has dim {}, expected {dim}",
                        g.label,
                        g.centre.len()
                    )));
                }
            }
        }
        for groups in sections.values_mut() {
            groups.sort_by_key(|g| g.label);
        }
        Ok(CentreModel { dim, sections })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sections(&self) -> &BTreeMap<u32, Vec<CentreGroup>> {
        &self.sections
    }

    pub fn groups(&self, section: u32) -> Option<&[CentreGroup]> {
        self.sections.get(&section).map(Vec::as_slice)
    }

    /// Minimum distance over the section's centres; ties go to the lowest
    /// label.
    pub fn score(&self, clip_id: &str, f: &[f64], section: u32) -> Result<ScoreRecord> {
        let groups = self.sections.get(&section).ok_or_else(|| {
            HmicError::UnknownLabel(format!("section {section:02} has no fitted centres"))
        })?;
        let mut best: Option<(f64, usize)> = None;
        for g in groups {
            let d = g.distance(f)?;
            if best.is_none_or(|(b, _)| d < b) {
                best = Some((d, g.label));
            }
        }
        let (score, argmin_group) =
            best.ok_or_else(|| HmicError::invalid(format!("section {section:02} has no centres")))?;
        Ok(ScoreRecord { clip_id: clip_id.to_string(), section, score, argmin_group })
    }
}

/// Attribute-group centres from `(f_h, l_ag, section)` triples.
pub fn fit_agc(
    features: &[GroupedFeature<'_>],
    shrinkage: Shrinkage,
    mode: CovarianceMode,
) -> Result<AgcModel> {
    CentreModel::fit(features, shrinkage, mode)
}

/// Group index used for a domain centre.
pub fn domain_group(domain: Domain) -> Result<usize> {
    match domain {
        Domain::Source => Ok(0),
        Domain::Target => Ok(1),
        Domain::Unknown => Err(HmicError::invalid("domain centres need a known domain")),
    }
}

/// Domain centres from `(f_h, domain, section)` triples.
pub fn fit_dc(
    features: &[(&[f64], Domain, u32)],
    shrinkage: Shrinkage,
    mode: CovarianceMode,
) -> Result<DcModel> {
    let grouped = features
        .iter()
        .map(|&(feature, domain, section)| {
            Ok(GroupedFeature { feature, group: domain_group(domain)?, section })
        })
        .collect::<Result<Vec<_>>>()?;
    // domain groups 0/1 repeat across sections, so fit each section alone
    let mut sections = BTreeMap::new();
    let mut dim = 0;
    let mut by_section: BTreeMap<u32, Vec<GroupedFeature>> = BTreeMap::new();
    for g in grouped {
        by_section.entry(g.section).or_default().push(g);
    }
    for feats in by_section.values() {
        let m = CentreModel::fit(feats, shrinkage, mode)?;
        dim = m.dim;
        sections.extend(m.sections);
    }
    if sections.is_empty() {
        return Err(HmicError::invalid("cannot fit centres without features"));
    }
    Ok(CentreModel { dim, sections })
}

pub fn score_agc(clip_id: &str, f: &[f64], model: &AgcModel, section: u32) -> Result<ScoreRecord> {
    model.score(clip_id, f, section)
}

pub fn score_dc(clip_id: &str, f: &[f64], model: &DcModel, section: u32) -> Result<ScoreRecord> {
    model.score(clip_id, f, section)
}

pub fn write_scores_csv<W: std::io::Write>(w: W, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gf(feature: &[f64], group: usize, section: u32) -> GroupedFeature<'_> {
        GroupedFeature { feature, group, section }
    }

    #[test]
    fn single_clip_group() {
        let f = [0.5, -1.0, 2.0];
        let m = fit_agc(&[gf(&f, 0, 0)], Shrinkage::Fixed(0.01), CovarianceMode::PerGroup).unwrap();
        let g = &m.groups(0).unwrap()[0];
        assert_eq!(g.centre, f.to_vec());
        assert!(g.covariance.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(g.shrunk_covariance(), Matrix::from_diag(&[0.01; 3]));
        assert_eq!(g.n_clips, 1);
    }

    #[test]
    fn two_clip_covariance_by_hand() {
        let (a, b) = ([1.0, 0.0], [-1.0, 0.0]);
        let eps = 0.05;
        let m = fit_agc(&[gf(&a, 3, 1), gf(&b, 3, 1)], Shrinkage::Fixed(eps), CovarianceMode::PerGroup)
            .unwrap();
        let g = &m.groups(1).unwrap()[0];
        assert_eq!(g.centre, vec![0.0, 0.0]);
        assert_eq!(g.covariance, Matrix::from_diag(&[1.0, 0.0]));
        assert_eq!(g.shrunk_covariance(), Matrix::from_diag(&[1.0 + eps, eps]));
        // default relative shrinkage: 1e-3 * trace / d = 5e-4
        let m = fit_agc(&[gf(&a, 3, 1), gf(&b, 3, 1)], Shrinkage::default(), CovarianceMode::PerGroup)
            .unwrap();
        assert_eq!(m.groups(1).unwrap()[0].epsilon, 5e-4);
    }

    #[test]
    fn shrinkage_floor() {
        let f = [0.0, 0.0];
        let m = fit_agc(&[gf(&f, 0, 0)], Shrinkage::default(), CovarianceMode::PerGroup).unwrap();
        assert_eq!(m.groups(0).unwrap()[0].epsilon, 1e-6);
    }

    #[test]
    fn permutation_invariant_fit() {
        let data: Vec<[f64; 2]> = vec![[0.1, 0.7], [1.3, -0.2], [0.4, 0.4], [2.0, 1.0], [-0.3, 0.9]];
        let fwd: Vec<GroupedFeature> = data.iter().enumerate().map(|(i, d)| gf(d, i % 2, 0)).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let a = fit_agc(&fwd, Shrinkage::default(), CovarianceMode::PerGroup).unwrap();
        let b = fit_agc(&rev, Shrinkage::default(), CovarianceMode::PerGroup).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_errors() {
        assert!(fit_agc(&[], Shrinkage::default(), CovarianceMode::PerGroup).is_err());
        let nan = [f64::NAN, 0.0];
        assert!(fit_agc(&[gf(&nan, 0, 0)], Shrinkage::default(), CovarianceMode::PerGroup).is_err());
        let (a, b) = ([0.0, 0.0], [1.0, 1.0]);
        assert!(fit_agc(&[gf(&a, 0, 0), gf(&b, 0, 1)], Shrinkage::default(), CovarianceMode::PerGroup)
            .is_err());
        let c = [1.0];
        assert!(fit_agc(&[gf(&a, 0, 0), gf(&c, 1, 0)], Shrinkage::default(), CovarianceMode::PerGroup)
            .is_err());
        assert!(fit_agc(&[gf(&a, 0, 0)], Shrinkage::Fixed(0.0), CovarianceMode::PerGroup).is_err());
    }

    #[test]
    fn mahalanobis_cases() {
        let eye = Cholesky::factor(&Matrix::identity(2)).unwrap();
        assert!((mahalanobis(&[3.0, 4.0], &[0.0, 0.0], &eye).unwrap() - 5.0).abs() < 1e-15);
        assert_eq!(mahalanobis(&[1.5, -2.0], &[1.5, -2.0], &eye).unwrap(), 0.0);
        let diag = Cholesky::factor(&Matrix::from_diag(&[4.0, 1.0])).unwrap();
        let d = mahalanobis(&[2.0, 3.0], &[0.0, 0.0], &diag).unwrap();
        assert!((d - 10f64.sqrt()).abs() < 1e-15);
        assert!(mahalanobis(&[1.0], &[0.0, 0.0], &eye).is_err());
    }

    fn three_groups() -> CentreModel {
        let groups = vec![
            CentreGroup::from_parts(0, vec![0.0, 0.0], Matrix::from_diag(&[1.0, 1.0]), 1e-6, 4).unwrap(),
            CentreGroup::from_parts(1, vec![4.0, 0.0], Matrix::from_diag(&[4.0, 0.25]), 1e-6, 4).unwrap(),
            CentreGroup::from_parts(
                2,
                vec![0.0, 5.0],
                Matrix::from_vec(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap(),
                1e-6,
                4,
            )
            .unwrap(),
        ];
        CentreModel::from_groups(2, BTreeMap::from([(0, groups)])).unwrap()
    }

    #[test]
    fn min_over_groups_by_enumeration() {
        let m = three_groups();
        for f in [[0.3, 0.2], [3.0, 0.1], [0.2, 4.0], [2.0, 2.5], [-5.0, 9.0]] {
            let dists: Vec<f64> = m.groups(0).unwrap().iter().map(|g| g.distance(&f).unwrap()).collect();
            let (best_i, best_d) = dists
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bd), (i, &d)| if d < bd { (i, d) } else { (bi, bd) });
            let r = score_agc("x", &f, &m, 0).unwrap();
            assert_eq!(r.score, best_d);
            assert_eq!(r.argmin_group, best_i);
            for d in dists {
                assert!(r.score <= d);
            }
        }
    }

    #[test]
    fn score_at_centre_and_unknown_section() {
        let m = three_groups();
        let r = score_agc("x", &[4.0, 0.0], &m, 0).unwrap();
        assert_eq!((r.score, r.argmin_group), (0.0, 1));
        assert!(matches!(score_agc("x", &[0.0, 0.0], &m, 7), Err(HmicError::UnknownLabel(_))));
    }

    #[test]
    fn single_group_equals_plain_distance() {
        let (a, b, c) = ([1.0, 2.0], [2.0, 0.0], [0.0, 1.0]);
        let m = fit_agc(&[gf(&a, 0, 0), gf(&b, 0, 0), gf(&c, 0, 0)], Shrinkage::default(), CovarianceMode::PerGroup)
            .unwrap();
        let g = &m.groups(0).unwrap()[0];
        let f = [3.0, -1.0];
        assert_eq!(score_agc("x", &f, &m, 0).unwrap().score, mahalanobis(&f, &g.centre, g.factor()).unwrap());
    }

    #[test]
    fn ties_go_to_lowest_label() {
        let groups = vec![
            CentreGroup::from_parts(5, vec![1.0, 0.0], Matrix::identity(2), 1e-6, 1).unwrap(),
            CentreGroup::from_parts(2, vec![-1.0, 0.0], Matrix::identity(2), 1e-6, 1).unwrap(),
        ];
        let m = CentreModel::from_groups(2, BTreeMap::from([(0, groups)])).unwrap();
        assert_eq!(m.score("x", &[0.0, 3.0], 0).unwrap().argmin_group, 2);
    }

    #[test]
    fn domain_centres() {
        let src = [[0.0, 0.0], [0.2, 0.0], [0.0, 0.2]];
        let tgt = [[5.0, 5.0], [5.2, 5.0]];
        let mut feats: Vec<(&[f64], Domain, u32)> = Vec::new();
        for s in &src {
            feats.push((s, Domain::Source, 0));
        }
        for t in &tgt {
            feats.push((t, Domain::Target, 0));
        }
        let dc = fit_dc(&feats, Shrinkage::Fixed(0.1), CovarianceMode::PerGroup).unwrap();
        assert_eq!(score_dc("x", &[4.9, 5.1], &dc, 0).unwrap().argmin_group, 1);
        assert_eq!(score_dc("x", &[0.1, 0.1], &dc, 0).unwrap().argmin_group, 0);

        // identical features in both domains: equal distances, tie -> source
        let same = [[1.0, 1.0], [2.0, 0.0]];
        let feats: Vec<(&[f64], Domain, u32)> = same
            .iter()
            .flat_map(|f| [(&f[..], Domain::Source, 0), (&f[..], Domain::Target, 0)])
            .collect();
        let dc = fit_dc(&feats, Shrinkage::default(), CovarianceMode::PerGroup).unwrap();
        let r = score_dc("x", &[7.0, -3.0], &dc, 0).unwrap();
        assert_eq!(r.argmin_group, 0);
        let g = dc.groups(0).unwrap();
        assert_eq!(g[0].distance(&[7.0, -3.0]).unwrap(), g[1].distance(&[7.0, -3.0]).unwrap());
    }

    #[test]
    fn single_domain_dc_equals_one_group_agc() {
        let pts = [[0.3, 1.0], [1.0, -0.5], [0.0, 0.0], [2.0, 2.0]];
        let dc_feats: Vec<(&[f64], Domain, u32)> = pts.iter().map(|p| (&p[..], Domain::Source, 2)).collect();
        let agc_feats: Vec<GroupedFeature> = pts.iter().map(|p| gf(p, 0, 2)).collect();
        let dc = fit_dc(&dc_feats, Shrinkage::default(), CovarianceMode::PerGroup).unwrap();
        let agc = fit_agc(&agc_feats, Shrinkage::default(), CovarianceMode::PerGroup).unwrap();
        assert_eq!(dc, agc);
    }

    #[test]
    fn pooled_covariance_is_shared() {
        let pts = [[0.0, 0.0], [2.0, 0.0], [10.0, 10.0], [10.0, 14.0]];
        let feats = [gf(&pts[0], 0, 0), gf(&pts[1], 0, 0), gf(&pts[2], 1, 0), gf(&pts[3], 1, 0)];
        let m = fit_agc(&feats, Shrinkage::Fixed(1e-3), CovarianceMode::PerSectionPooled).unwrap();
        let g = m.groups(0).unwrap();
        // group covariances diag(1, 0) and diag(0, 4), equal weights
        assert_eq!(g[0].covariance, Matrix::from_diag(&[0.5, 2.0]));
        assert_eq!(g[0].covariance, g[1].covariance);
        assert_eq!("per_section_pooled".parse::<CovarianceMode>().unwrap(), CovarianceMode::PerSectionPooled);
    }

    #[test]
    fn scores_csv_header() {
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &[ScoreRecord { clip_id: "a".into(), section: 1, score: 0.5, argmin_group: 3 }])
            .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "clip_id,section,score,argmin_group\na,1,0.5,3\n");
    }
}
