//! Binary checkpoint container for classifiers and projectors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ULCK" | format_version u32 | role u8 (0 classifier, 1 projector)
//! config_len u32 | config TOML bytes
//! weight_digest [32]
//! frozen_model_digest [32]           -- projector role only
//! log_len u32 | train log JSON bytes -- classifier role only
//! blob_count u32, then per blob:
//!   name_len u32 | name bytes | value_count u64 | values f64-LE
//! ```
//!
//! On load the weight digest is recomputed from the parameter blobs and
//! must match the header; any mismatch, truncation, or trailing garbage is
//! reported as corruption. A version other than 1 is refused with an error
//! naming both versions.

use std::fs;
use std::io::Read as _;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearn_core::classifier::{Backbone, EpochRecord, InitScheme, ModelConfig, ModelState};
use unlearn_core::dataset::Geometry;
use unlearn_core::forge::ProjectorState;

use crate::error::{LabError, Result};

const MAGIC: &[u8; 4] = b"ULCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointRole {
    Classifier,
    Projector,
}

pub enum LoadedCheckpoint {
    Classifier(ModelState),
    Projector(ProjectorState),
}

#[derive(Serialize, Deserialize)]
struct ClassifierConfigRepr {
    backbone: String,
    height: usize,
    width: usize,
    channels: usize,
    conv_channels: Vec<usize>,
    head_widths: Vec<usize>,
    dropout_rate: f64,
    init_scheme: String,
}

impl ClassifierConfigRepr {
    fn from_config(c: &ModelConfig) -> Self {
        ClassifierConfigRepr {
            backbone: c.backbone.as_str().to_string(),
            height: c.geometry.h,
            width: c.geometry.w,
            channels: c.geometry.c,
            conv_channels: c.conv_channels.clone(),
            head_widths: c.head_widths.clone(),
            dropout_rate: c.dropout_rate,
            init_scheme: c.init_scheme.as_str().to_string(),
        }
    }

    fn into_config(self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: Backbone::parse(&self.backbone)
                .ok_or_else(|| LabError::Config(format!("unknown backbone {:?}", self.backbone)))?,
            geometry: Geometry::new(self.height, self.width, self.channels),
            conv_channels: self.conv_channels,
            head_widths: self.head_widths,
            dropout_rate: self.dropout_rate,
            init_scheme: InitScheme::parse(&self.init_scheme).ok_or_else(|| {
                LabError::Config(format!("unknown init scheme {:?}", self.init_scheme))
            })?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ProjectorConfigRepr {
    noise_dim: usize,
    hidden_width: usize,
    num_classes: usize,
    height: usize,
    width: usize,
    channels: usize,
    classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct EpochRecordRepr {
    epoch: usize,
    iterations: usize,
    loss: f64,
    val_acc: Option<f64>,
    class_counts: Vec<u64>,
}

fn log_to_json(log: &[EpochRecord]) -> Vec<u8> {
    let repr: Vec<EpochRecordRepr> = log
        .iter()
        .map(|r| EpochRecordRepr {
            epoch: r.epoch,
            iterations: r.iterations,
            loss: r.loss,
            val_acc: r.val_acc,
            class_counts: r.class_counts.clone(),
        })
        .collect();
    serde_json::to_vec(&repr).expect("train log serializes")
}

fn log_from_json(bytes: &[u8], path: &Path) -> Result<Vec<EpochRecord>> {
    let repr: Vec<EpochRecordRepr> =
        serde_json::from_slice(bytes).map_err(|e| LabError::Corrupt {
            path: path.into(),
            reason: format!("train log: {e}"),
        })?;
    Ok(repr
        .into_iter()
        .map(|r| EpochRecord {
            epoch: r.epoch,
            iterations: r.iterations,
            loss: r.loss,
            val_acc: r.val_acc,
            class_counts: r.class_counts,
        })
        .collect())
}

/// Same construction as the in-memory classifier weight digest: sha256 over
/// (name, value count, f64-LE bytes) per blob in order.
fn digest_blobs(blobs: &[(String, Vec<f64>)]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, values) in blobs {
        hasher.update(name.as_bytes());
        hasher.update((values.len() as u64).to_le_bytes());
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

fn write_blobs(buf: &mut Vec<u8>, blobs: &[(String, &[f64])]) {
    buf.write_u32::<LittleEndian>(blobs.len() as u32).unwrap();
    for (name, values) in blobs {
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u64::<LittleEndian>(values.len() as u64).unwrap();
        for v in *values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_classifier(path: &Path, model: &ModelState) -> Result<()> {
    let config = toml::to_string(&ClassifierConfigRepr::from_config(model.config()))
        .expect("config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.push(0);
    buf.write_u32::<LittleEndian>(config.len() as u32).unwrap();
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&model.weight_digest());
    let log = log_to_json(model.train_log());
    buf.write_u32::<LittleEndian>(log.len() as u32).unwrap();
    buf.extend_from_slice(&log);
    write_blobs(&mut buf, &model.named_params());
    fs::write(path, buf).map_err(|e| LabError::io(path, e))
}

pub fn save_projector(path: &Path, p: &ProjectorState) -> Result<()> {
    let config = toml::to_string(&ProjectorConfigRepr {
        noise_dim: p.noise_dim,
        hidden_width: p.hidden_width,
        num_classes: p.num_classes,
        height: p.geometry.h,
        width: p.geometry.w,
        channels: p.geometry.c,
        classes: p.classes.iter().copied().collect(),
    })
    .expect("config serializes");
    let blobs: Vec<(String, &[f64])> = vec![
        ("w1".into(), &p.w1[..]),
        ("b1".into(), &p.b1[..]),
        ("w2".into(), &p.w2[..]),
        ("b2".into(), &p.b2[..]),
    ];
    let owned: Vec<(String, Vec<f64>)> = blobs
        .iter()
        .map(|(n, v)| (n.clone(), v.to_vec()))
        .collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.push(1);
    buf.write_u32::<LittleEndian>(config.len() as u32).unwrap();
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&digest_blobs(&owned));
    buf.extend_from_slice(&p.frozen_model_digest);
    write_blobs(&mut buf, &blobs);
    fs::write(path, buf).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let corrupt = |reason: String| LabError::Corrupt {
        path: path.into(),
        reason,
    };
    let data = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let mut cur = std::io::Cursor::new(&data[..]);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| corrupt("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("truncated header".into()))?;
    if version != FORMAT_VERSION {
        return Err(LabError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let role = cur.read_u8().map_err(|_| corrupt("truncated header".into()))?;
    let config_len = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("truncated header".into()))? as usize;
    let mut config_bytes = vec![0u8; config_len];
    cur.read_exact(&mut config_bytes)
        .map_err(|_| corrupt("truncated config".into()))?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| corrupt("config is not valid UTF-8".into()))?;
    let mut stored_digest = [0u8; 32];
    cur.read_exact(&mut stored_digest)
        .map_err(|_| corrupt("truncated digest".into()))?;

    match role {
        0 => {
            let mut log_len_buf = [0u8; 4];
            cur.read_exact(&mut log_len_buf)
                .map_err(|_| corrupt("truncated train log".into()))?;
            let log_len = u32::from_le_bytes(log_len_buf) as usize;
            let mut log_bytes = vec![0u8; log_len];
            cur.read_exact(&mut log_bytes)
                .map_err(|_| corrupt("truncated train log".into()))?;
            let blobs = read_blobs(&mut cur, &data, path)?;
            if digest_blobs(&blobs) != stored_digest {
                return Err(corrupt("weight digest mismatch".into()));
            }
            let repr: ClassifierConfigRepr = toml::from_str(&config_text)
                .map_err(|e| corrupt(format!("classifier config: {e}")))?;
            let config = repr.into_config()?;
            let train_log = log_from_json(&log_bytes, path)?;
            let model = ModelState::from_parts(config, &blobs, train_log)?;
            // from_parts recomputes its digest from the loaded tensors;
            // it must agree with the header for the file to be intact.
            if model.weight_digest() != stored_digest {
                return Err(corrupt("weight digest mismatch after rebuild".into()));
            }
            Ok(LoadedCheckpoint::Classifier(model))
        }
        1 => {
            let mut frozen = [0u8; 32];
            cur.read_exact(&mut frozen)
                .map_err(|_| corrupt("truncated frozen-model digest".into()))?;
            let blobs = read_blobs(&mut cur, &data, path)?;
            if digest_blobs(&blobs) != stored_digest {
                return Err(corrupt("weight digest mismatch".into()));
            }
            let repr: ProjectorConfigRepr = toml::from_str(&config_text)
                .map_err(|e| corrupt(format!("projector config: {e}")))?;
            let mut by_name: std::collections::BTreeMap<String, Vec<f64>> =
                blobs.into_iter().collect();
            let mut take = |name: &str| {
                by_name
                    .remove(name)
                    .ok_or_else(|| corrupt(format!("missing tensor {name:?}")))
            };
            let p = ProjectorState {
                noise_dim: repr.noise_dim,
                hidden_width: repr.hidden_width,
                num_classes: repr.num_classes,
                geometry: Geometry::new(repr.height, repr.width, repr.channels),
                classes: repr.classes.into_iter().collect(),
                w1: take("w1")?,
                b1: take("b1")?,
                w2: take("w2")?,
                b2: take("b2")?,
                frozen_model_digest: frozen,
            };
            let in_dim = p.num_classes + p.noise_dim;
            if p.w1.len() != in_dim * p.hidden_width
                || p.b1.len() != p.hidden_width
                || p.w2.len() != p.hidden_width * p.geometry.len()
                || p.b2.len() != p.geometry.len()
            {
                return Err(corrupt("projector tensor shapes disagree with config".into()));
            }
            Ok(LoadedCheckpoint::Projector(p))
        }
        other => Err(corrupt(format!("unknown role byte {other}"))),
    }
}

fn read_blobs(
    cur: &mut std::io::Cursor<&[u8]>,
    data: &[u8],
    path: &Path,
) -> Result<Vec<(String, Vec<f64>)>> {
    let corrupt = |reason: String| LabError::Corrupt {
        path: path.into(),
        reason,
    };
    let count = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("truncated blob table".into()))? as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| corrupt("truncated blob name".into()))? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)
            .map_err(|_| corrupt("truncated blob name".into()))?;
        let name =
            String::from_utf8(name).map_err(|_| corrupt("blob name is not UTF-8".into()))?;
        let value_count = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| corrupt("truncated blob".into()))? as usize;
        let mut values = Vec::with_capacity(value_count);
        for _ in 0..value_count {
            values.push(
                cur.read_f64::<LittleEndian>()
                    .map_err(|_| corrupt(format!("truncated tensor {name:?}")))?,
            );
        }
        blobs.push((name, values));
    }
    if cur.position() != data.len() as u64 {
        return Err(corrupt("trailing bytes after last tensor".into()));
    }
    Ok(blobs)
}

pub fn load_classifier(path: &Path) -> Result<ModelState> {
    match load_checkpoint(path)? {
        LoadedCheckpoint::Classifier(m) => Ok(m),
        LoadedCheckpoint::Projector(_) => Err(LabError::Load {
            path: path.into(),
            reason: "expected a classifier checkpoint, found a projector".into(),
        }),
    }
}

pub fn load_projector(path: &Path) -> Result<ProjectorState> {
    match load_checkpoint(path)? {
        LoadedCheckpoint::Projector(p) => Ok(p),
        LoadedCheckpoint::Classifier(_) => Err(LabError::Load {
            path: path.into(),
            reason: "expected a projector checkpoint, found a classifier".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use unlearn_core::classifier::build_model;
    use unlearn_core::forge::{train_projector, GeneratorConfig};

    fn tiny_model() -> ModelState {
        let config = ModelConfig {
            backbone: Backbone::SmallConv,
            geometry: Geometry::new(8, 8, 1),
            conv_channels: vec![2],
            head_widths: vec![8, 3],
            dropout_rate: 0.0,
            init_scheme: InitScheme::KaimingLike,
        };
        build_model(&config, 5).unwrap()
    }

    #[test]
    fn classifier_round_trip_preserves_digest_and_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model();
        save_classifier(&path, &model).unwrap();
        let back = load_classifier(&path).unwrap();
        assert_eq!(back.weight_digest(), model.weight_digest());
        assert_eq!(back.param_count(), model.param_count());
        assert_eq!(back.config(), model.config());
        // Re-saving gives byte-identical files.
        let first = fs::read(&path).unwrap();
        save_classifier(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_classifier(&path, &tiny_model()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        let err = load_classifier(&path).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }

    #[test]
    fn flipped_weight_byte_fails_digest_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_classifier(&path, &tiny_model()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 4] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = load_classifier(&path).unwrap_err();
        assert!(matches!(err, LabError::Corrupt { .. }), "{err}");
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_classifier(&path, &tiny_model()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        let err = load_classifier(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn projector_round_trip_keeps_frozen_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let model = tiny_model();
        let mut cfg = GeneratorConfig::desk(3);
        cfg.noise_dim = 4;
        cfg.hidden_width = 8;
        cfg.steps = 40;
        cfg.batch = 4;
        let classes = [0usize].into_iter().collect();
        let projector = train_projector(&model, &classes, &cfg).unwrap();
        save_projector(&path, &projector).unwrap();
        let back = load_projector(&path).unwrap();
        assert_eq!(back.frozen_model_digest, model.weight_digest());
        assert_eq!(back.w1, projector.w1);
        assert_eq!(back.b2, projector.b2);
        assert_eq!(back.classes, projector.classes);
    }

    #[test]
    fn role_mismatch_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_classifier(&path, &tiny_model()).unwrap();
        let err = load_projector(&path).unwrap_err();
        assert!(matches!(err, LabError::Load { .. }), "{err}");
    }
}
