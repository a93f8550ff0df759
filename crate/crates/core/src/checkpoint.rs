//! Versioned binary checkpoint holding trained parameters and fitted centres.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "HMICCKPT" | u32 version | 32-byte config digest
//! u64 json length | JSON block (config, label spaces, model configs)
//! u32 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims, f64 data
//! ```
//!
//! Tensor names are prefixed with the machine type, e.g.
//! `fan/backbone/0/weight`, `fan/agc/00/3/centre`, `fan/dc/01/0/cov`.
//! Each centre group also stores `meta = [epsilon, n_clips]`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HmicError, Result};
use crate::linalg::Matrix;
use crate::metadata::LabelSpace;
use crate::model::{ModelConfig, ModelParams};
use crate::scoring::{CentreGroup, CentreModel};

pub const MAGIC: &[u8; 8] = b"HMICCKPT";
pub const VERSION: u32 = 1;

/// Everything trained for one machine type.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineModel {
    pub labels: LabelSpace,
    pub params: ModelParams,
    pub agc: CentreModel,
    pub dc: CentreModel,
}

impl MachineModel {
    pub fn machine_type(&self) -> &str {
        &self.labels.machine_type
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    /// Training-relevant configuration, stored for auditability.
    pub config: serde_json::Value,
    pub machines: Vec<MachineModel>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_digest: String,
    config: serde_json::Value,
    machines: Vec<MachineHeader>,
}

#[derive(Serialize, Deserialize)]
struct MachineHeader {
    labels: LabelSpace,
    model: ModelConfig,
}

type Tensor = (String, Vec<usize>, Vec<f64>);

fn corrupt(msg: impl Into<String>) -> HmicError {
    HmicError::Checkpoint(msg.into())
}

fn centre_tensors(prefix: &str, model: &CentreModel, out: &mut Vec<Tensor>) {
    let d = model.dim();
    for (section, groups) in model.sections() {
        for g in groups {
            let base = format!("{prefix}/{section:02}/{}", g.label);
            out.push((format!("{base}/centre"), vec![d], g.centre.clone()));
            out.push((format!("{base}/cov"), vec![d, d], g.covariance.as_slice().to_vec()));
            out.push((format!("{base}/meta"), vec![2], vec![g.epsilon, g.n_clips as f64]));
        }
    }
}

fn centres_from_tensors(prefix: &str, dim: usize, tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<CentreModel> {
    let mut sections: BTreeMap<u32, Vec<CentreGroup>> = BTreeMap::new();
    let pre = format!("{prefix}/");
    for (name, (_, centre)) in tensors.range(pre.clone()..) {
        let Some(rest) = name.strip_prefix(&pre) else { break };
        let Some(key) = rest.strip_suffix("/centre") else { continue };
        let (section, label) = key
            .split_once('/')
            .and_then(|(s, l)| Some((s.parse::<u32>().ok()?, l.parse::<usize>().ok()?)))
            .ok_or_else(|| corrupt(format!("bad centre tensor name `{name}`")))?;
        let fetch = |suffix: &str| {
            tensors
                .get(&format!("{pre}{key}/{suffix}"))
                .ok_or_else(|| corrupt(format!("missing `{pre}{key}/{suffix}`")))
        };
        let (cov_shape, cov) = fetch("cov")?;
        let (_, meta) = fetch("meta")?;
        if cov_shape != &[dim, dim] || centre.len() != dim || meta.len() != 2 {
            return Err(corrupt(format!("centre group `{pre}{key}` has the wrong shape")));
        }
        let group = CentreGroup::from_parts(
            label,
            centre.clone(),
            Matrix::from_vec(dim, dim, cov.clone())?,
            meta[0],
            meta[1] as usize,
        )?;
        sections.entry(section).or_default().push(group);
    }
    CentreModel::from_groups(dim, sections)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads exactly `n` bytes without trusting `n` for an up-front allocation.
fn read_bytes<R: Read>(r: &mut R, n: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n).read_to_end(&mut buf)?;
    if buf.len() as u64 != n {
        return Err(corrupt("unexpected end of file"));
    }
    Ok(buf)
}

impl Checkpoint {
    pub fn digest_hex(&self) -> String {
        hex::encode(self.config_digest)
    }

    pub fn machine(&self, machine_type: &str) -> Option<&MachineModel> {
        self.machines.iter().find(|m| m.machine_type() == machine_type)
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for m in &self.machines {
            let mt = m.machine_type();
            for (name, shape, data) in m.params.named_tensors() {
                out.push((format!("{mt}/{name}"), shape.to_vec(), data.to_vec()));
            }
            centre_tensors(&format!("{mt}/agc"), &m.agc, &mut out);
            centre_tensors(&format!("{mt}/dc"), &m.dc, &mut out);
        }
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            config_digest: self.digest_hex(),
            config: self.config.clone(),
            machines: self
                .machines
                .iter()
                .map(|m| MachineHeader { labels: m.labels.clone(), model: m.params.config().clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_digest)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let mut config_digest = [0u8; 32];
        r.read_exact(&mut config_digest)?;
        let json_len = read_u64(&mut r)?;
        let header: Header = serde_json::from_slice(&read_bytes(&mut r, json_len)?)?;
        if header.config_digest != hex::encode(config_digest) {
            return Err(corrupt("header digest disagrees with the JSON block"));
        }

        let count = read_u32(&mut r)?;
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)?;
            let name = String::from_utf8(read_bytes(&mut r, name_len as u64)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)?;
            let mut shape = Vec::with_capacity(rank.min(8) as usize);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| corrupt(format!("tensor `{name}` is too large")))?;
            let raw = read_bytes(&mut r, n as u64)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(corrupt("trailing bytes after the last tensor"));
        }

        let mut machines = Vec::new();
        for mh in header.machines {
            let mt = mh.labels.machine_type.clone();
            let own: BTreeMap<String, (Vec<usize>, Vec<f64>)> = tensors
                .iter()
                .filter_map(|(k, v)| Some((k.strip_prefix(&format!("{mt}/"))?.to_string(), v.clone())))
                .collect();
            let params_list: Vec<Tensor> = own
                .iter()
                .filter(|(k, _)| !k.starts_with("agc/") && !k.starts_with("dc/"))
                .map(|(k, (s, d))| (k.clone(), s.clone(), d.clone()))
                .collect();
            let dim = mh.model.d_high();
            let params = ModelParams::from_tensors(mh.model, &params_list)?;
            if params.specs().len() != params_list.len() {
                return Err(corrupt(format!("machine `{mt}` has unexpected parameter tensors")));
            }
            let agc = centres_from_tensors("agc", dim, &own)?;
            let dc = centres_from_tensors("dc", dim, &own)?;
            machines.push(MachineModel { labels: mh.labels, params, agc, dc });
        }
        Ok(Checkpoint { config_digest, config: header.config, machines })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::{build_label_space, parse_dcase_filename};
    use crate::model::Ablation;
    use crate::scoring::{fit_agc, fit_dc, CovarianceMode, GroupedFeature, Shrinkage};
    use crate::metadata::Domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut clips = Vec::new();
        for name in [
            "section_00_source_train_normal_0000_a_1.wav",
            "section_00_source_train_normal_0001_a_2.wav",
            "section_01_target_train_normal_0000_a_1.wav",
        ] {
            let mut c = parse_dcase_filename(name).unwrap();
            c.machine_type = "fan".into();
            clips.push(c);
        }
        let labels = build_label_space(&clips, "fan").unwrap();
        let cfg = ModelConfig {
            n_mels: 8,
            n_frames: 8,
            backbone_channels: vec![2],
            head_channels: 3,
            block_gain: 1.5,
            n_sections: 2,
            n_groups: 3,
            lambda: 0.5,
            ablation: Ablation::Hmic,
        };
        let params = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let feats = [[0.1, 0.2, 0.3], [0.5, -0.2, 0.0], [1.0, 1.0, 2.0], [0.9, 1.2, 2.1]];
        let agc = fit_agc(
            &[
                GroupedFeature { feature: &feats[0], group: 0, section: 0 },
                GroupedFeature { feature: &feats[1], group: 1, section: 0 },
                GroupedFeature { feature: &feats[2], group: 2, section: 1 },
                GroupedFeature { feature: &feats[3], group: 2, section: 1 },
            ],
            Shrinkage::default(),
            CovarianceMode::PerGroup,
        )
        .unwrap();
        let dc = fit_dc(
            &[(&feats[0][..], Domain::Source, 0), (&feats[2][..], Domain::Target, 1)],
            Shrinkage::default(),
            CovarianceMode::PerGroup,
        )
        .unwrap();
        Checkpoint {
            config_digest: [7; 32],
            config: serde_json::json!({"seed": 3}),
            machines: vec![MachineModel { labels, params, agc, dc }],
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.machine("fan").is_some());
    }

    #[test]
    fn tensor_names_are_machine_prefixed() {
        let names: Vec<String> = sample().tensors().into_iter().map(|t| t.0).collect();
        assert!(names.contains(&"fan/backbone/0/weight".to_string()));
        assert!(names.contains(&"fan/agc/01/2/cov".to_string()));
        assert!(names.contains(&"fan/dc/01/1/meta".to_string()));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read(bad.as_slice()).is_err());
        assert!(Checkpoint::read(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read(extra.as_slice()).is_err());
        let mut digest = bytes.clone();
        digest[12] ^= 1;
        assert!(Checkpoint::read(digest.as_slice()).is_err());
    }
}
