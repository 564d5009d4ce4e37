//! Dataset specs and loaders.
//!
//! A dataset spec is a small TOML file naming the source and how to split
//! it. Three source kinds are understood:
//!
//! - `synthetic:tenclass:<per_class>` — the built-in procedural corpus;
//! - a directory of per-class image folders (one subdirectory per class,
//!   PNG/grayscale images inside);
//! - a packed `.imgpack` archive with a text sidecar manifest.
//!
//! Split tags come either from `split_ratios` (deterministic per-class
//! assignment driven by the spec seed) or from explicit `split_files`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Deserialize;
use unlearn_core::dataset::{Geometry, LabeledImageDataset, Split};
use unlearn_core::rng;

use crate::error::{LabError, Result};
use crate::synthdata;

/// Parsed form of a dataset spec file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source_path: String,
    /// [height, width].
    pub image_size: [usize; 2],
    pub channels: usize,
    /// Train/val/test fractions; must sum to 1 (within 1e-9).
    pub split_ratios: Option<[f64; 3]>,
    /// Alternative to ratios: files listing sample indices per split.
    pub split_files: Option<SplitFiles>,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

impl DatasetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DatasetSpec =
            toml::from_str(text).map_err(|e| LabError::Config(format!("dataset spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.image_size[0], self.image_size[1], self.channels)
    }

    fn validate(&self) -> Result<()> {
        if self.image_size[0] == 0 || self.image_size[1] == 0 || self.channels == 0 {
            return Err(LabError::Config("image_size and channels must be positive".into()));
        }
        if self.channels > 3 {
            return Err(LabError::Config("at most 3 channels supported".into()));
        }
        match (&self.split_ratios, &self.split_files) {
            (Some(r), None) => {
                if r.iter().any(|&v| v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(LabError::Config(format!(
                        "split_ratios {r:?} must be nonnegative and sum to 1"
                    )));
                }
                if r[0] <= 0.0 {
                    return Err(LabError::Config("train ratio must be positive".into()));
                }
                Ok(())
            }
            (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => Err(LabError::Config(
                "give split_ratios or split_files, not both".into(),
            )),
            (None, None) => Err(LabError::Config(
                "spec needs split_ratios or split_files".into(),
            )),
        }
    }
}

/// Load the dataset a spec describes, with split tags assigned.
pub fn load_dataset(spec: &DatasetSpec) -> Result<LabeledImageDataset> {
    let geometry = spec.geometry();
    let (id, pixels, labels, class_names) = if let Some(rest) =
        spec.source_path.strip_prefix("synthetic:tenclass:")
    {
        let per_class: usize = rest
            .parse()
            .map_err(|_| LabError::Config(format!("bad per-class count in {:?}", spec.source_path)))?;
        if per_class == 0 {
            return Err(LabError::Config("per-class count must be positive".into()));
        }
        let (pixels, labels) = synthdata::generate(geometry, per_class, spec.seed);
        let names = synthdata::CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        (
            format!("tenclass-{per_class}x{}-s{}", geometry.h, spec.seed),
            pixels,
            labels,
            names,
        )
    } else {
        let path = Path::new(&spec.source_path);
        if path.extension().is_some_and(|e| e == "imgpack") {
            load_archive(path, geometry)?
        } else {
            load_class_folders(path, geometry)?
        }
    };

    let splits = match (&spec.split_ratios, &spec.split_files) {
        (Some(ratios), None) => assign_splits(&labels, *ratios, spec.seed),
        (None, Some(files)) => read_split_files(files, labels.len())?,
        _ => unreachable!("spec validated on construction"),
    };

    let num_classes = class_names.len();
    LabeledImageDataset::new(id, geometry, pixels, labels, splits, num_classes, Some(class_names))
        .map_err(LabError::from)
}

/// Deterministic per-class split assignment by largest remainder:
/// each class's samples are shuffled (seeded) and divided so that split
/// sizes are as close to the requested ratios as integer counts allow.
fn assign_splits(labels: &[usize], ratios: [f64; 3], seed: u64) -> Vec<Split> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut splits = vec![Split::Train; labels.len()];
    for (class, mut members) in by_class {
        let mut r = rng::substream(seed, 0x5917_0000 + class as u64);
        rng::shuffle(&mut r, &mut members);
        let n = members.len();
        // Largest-remainder apportionment of n among the three ratios.
        let exact: Vec<f64> = ratios.iter().map(|&p| p * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
        let mut leftover = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &slot in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            counts[slot] += 1;
            leftover -= 1;
        }
        let tags = [Split::Train, Split::Val, Split::Test];
        let mut cursor = 0;
        for (slot, &count) in counts.iter().enumerate() {
            for &idx in &members[cursor..cursor + count] {
                splits[idx] = tags[slot];
            }
            cursor += count;
        }
    }
    splits
}

fn read_split_files(files: &SplitFiles, n: usize) -> Result<Vec<Split>> {
    let mut splits = vec![None; n];
    for (path, tag) in [
        (&files.train, Split::Train),
        (&files.val, Split::Val),
        (&files.test, Split::Test),
    ] {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let idx: usize = line.trim().parse().map_err(|_| LabError::Load {
                path: path.clone(),
                reason: format!("bad sample index {line:?}"),
            })?;
            if idx >= n {
                return Err(LabError::Load {
                    path: path.clone(),
                    reason: format!("index {idx} out of range for {n} samples"),
                });
            }
            if splits[idx].replace(tag).is_some() {
                return Err(LabError::Load {
                    path: path.clone(),
                    reason: format!("index {idx} assigned to more than one split"),
                });
            }
        }
    }
    splits
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| LabError::Config(format!("sample {i} missing from all split files")))
        })
        .collect()
}

/// Raw loader output: dataset id, pixel buffer, labels, class names.
type LoadedSource = (String, Vec<f64>, Vec<usize>, Vec<String>);

/// Load a directory with one subdirectory per class, images inside.
/// Class indices follow lexicographic subdirectory order.
fn load_class_folders(root: &Path, geometry: Geometry) -> Result<LoadedSource> {
    let entries = fs::read_dir(root).map_err(|e| LabError::io(root, e))?;
    let mut class_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(LabError::Load {
            path: root.into(),
            reason: "no class subdirectories found".into(),
        });
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| class.to_string()),
        );
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| LabError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file).map_err(|e| LabError::Load {
                path: file.clone(),
                reason: e.to_string(),
            })?;
            append_image(&img, geometry, &mut pixels, &file)?;
            labels.push(class);
        }
    }
    if labels.is_empty() {
        return Err(LabError::Load {
            path: root.into(),
            reason: "class directories contain no images".into(),
        });
    }
    let id = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "folders".into());
    Ok((id, pixels, labels, class_names))
}

fn append_image(
    img: &image::DynamicImage,
    geometry: Geometry,
    pixels: &mut Vec<f64>,
    path: &Path,
) -> Result<()> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if h != geometry.h || w != geometry.w {
        return Err(LabError::Shape(format!(
            "{}: image is {h}x{w}, spec says {}x{} (no silent resize)",
            path.display(),
            geometry.h,
            geometry.w
        )));
    }
    match geometry.c {
        1 => {
            let gray = img.to_luma8();
            pixels.extend(gray.pixels().map(|p| p.0[0] as f64 / 255.0));
        }
        3 => {
            let rgb = img.to_rgb8();
            // Channel-interleaved (h, w, c), matching the in-memory layout.
            pixels.extend(rgb.pixels().flat_map(|p| p.0).map(|v| v as f64 / 255.0));
        }
        c => {
            return Err(LabError::Shape(format!("unsupported channel count {c}")));
        }
    }
    Ok(())
}

const ARCHIVE_MAGIC: &[u8; 4] = b"IMPK";

/// Write a packed archive plus its text sidecar manifest
/// (`<path>.manifest`, lines of `class_name,count`).
pub fn write_archive(
    path: &Path,
    geometry: Geometry,
    pixels: &[f64],
    labels: &[usize],
    class_names: &[String],
) -> Result<()> {
    let stride = geometry.len();
    assert_eq!(pixels.len(), labels.len() * stride);
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.write_u32::<LittleEndian>(1).unwrap();
    buf.write_u32::<LittleEndian>(geometry.h as u32).unwrap();
    buf.write_u32::<LittleEndian>(geometry.w as u32).unwrap();
    buf.write_u32::<LittleEndian>(geometry.c as u32).unwrap();
    buf.write_u32::<LittleEndian>(labels.len() as u32).unwrap();
    buf.write_u32::<LittleEndian>(class_names.len() as u32).unwrap();
    for (i, &label) in labels.iter().enumerate() {
        buf.write_u16::<LittleEndian>(label as u16).unwrap();
        for &v in &pixels[i * stride..(i + 1) * stride] {
            buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, &buf).map_err(|e| LabError::io(path, e))?;

    let mut histogram = vec![0usize; class_names.len()];
    for &l in labels {
        histogram[l] += 1;
    }
    let manifest: String = class_names
        .iter()
        .zip(&histogram)
        .map(|(name, count)| format!("{name},{count}\n"))
        .collect();
    let manifest_path = sidecar_path(path);
    fs::write(&manifest_path, manifest).map_err(|e| LabError::io(&manifest_path, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

fn load_archive(path: &Path, geometry: Geometry) -> Result<LoadedSource> {
    let corrupt = |reason: &str| LabError::Corrupt {
        path: path.into(),
        reason: reason.into(),
    };
    let data = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let mut cursor = std::io::Cursor::new(&data[..]);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| corrupt("truncated header"))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = cursor.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
    if version != 1 {
        return Err(LabError::UnsupportedVersion { found: version, supported: 1 });
    }
    let h = cursor.read_u32::<LittleEndian>().unwrap_or(0) as usize;
    let w = cursor.read_u32::<LittleEndian>().unwrap_or(0) as usize;
    let c = cursor.read_u32::<LittleEndian>().unwrap_or(0) as usize;
    let count = cursor.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated header"))? as usize;
    let num_classes =
        cursor.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated header"))? as usize;
    if h != geometry.h || w != geometry.w || c != geometry.c {
        return Err(LabError::Shape(format!(
            "archive holds {h}x{w}x{c} images, spec says {}x{}x{}",
            geometry.h, geometry.w, geometry.c
        )));
    }
    let stride = geometry.len();
    let mut pixels = Vec::with_capacity(count * stride);
    let mut labels = Vec::with_capacity(count);
    let mut raw = vec![0u8; stride];
    for _ in 0..count {
        let label = cursor
            .read_u16::<LittleEndian>()
            .map_err(|_| corrupt("truncated sample record"))? as usize;
        cursor
            .read_exact(&mut raw)
            .map_err(|_| corrupt("truncated sample record"))?;
        labels.push(label);
        pixels.extend(raw.iter().map(|&v| v as f64 / 255.0));
    }
    if cursor.position() != data.len() as u64 {
        return Err(corrupt("trailing bytes after last sample"));
    }

    // Cross-check against the sidecar manifest.
    let manifest_path = sidecar_path(path);
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| LabError::io(&manifest_path, e))?;
    let mut class_names = Vec::new();
    let mut expected = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (name, count_str) = line.rsplit_once(',').ok_or_else(|| LabError::Corrupt {
            path: manifest_path.clone(),
            reason: format!("bad manifest line {line:?}"),
        })?;
        class_names.push(name.to_string());
        expected.push(count_str.trim().parse::<usize>().map_err(|_| LabError::Corrupt {
            path: manifest_path.clone(),
            reason: format!("bad count in {line:?}"),
        })?);
    }
    if class_names.len() != num_classes {
        return Err(corrupt("manifest class count disagrees with archive header"));
    }
    if expected.iter().sum::<usize>() != labels.len() {
        return Err(corrupt("manifest sample total disagrees with archive"));
    }
    let mut histogram = vec![0usize; num_classes];
    for &l in &labels {
        if l >= num_classes {
            return Err(corrupt("sample label out of class range"));
        }
        histogram[l] += 1;
    }
    if histogram != expected {
        return Err(corrupt("per-class histogram disagrees with manifest"));
    }

    let id = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "archive".into());
    Ok((id, pixels, labels, class_names))
}
