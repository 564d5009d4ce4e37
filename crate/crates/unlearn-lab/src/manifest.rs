//! Line-oriented text manifest for stored subsets.
//!
//! Format: one header line `dataset_id,strategy,fraction,seed`, then one
//! sample index per line. Writing and re-reading a handle reproduces it
//! bit-exactly (the fraction is printed with Rust's shortest round-trip
//! float formatting). The handle's role is not part of the file; the store
//! encodes it in the file name.

use std::fs;
use std::path::Path;

use unlearn_core::dataset::{SelectionStrategy, SubsetHandle, SubsetRole};

use crate::error::{LabError, Result};

/// Render a handle to manifest text.
pub fn to_text(handle: &SubsetHandle) -> String {
    let mut out = format!(
        "{},{},{},{}\n",
        handle.dataset_id,
        handle.strategy.as_str(),
        handle.fraction,
        handle.seed
    );
    for idx in &handle.indices {
        out.push_str(&idx.to_string());
        out.push('\n');
    }
    out
}

/// Parse manifest text back into a handle with the given role.
pub fn from_text(text: &str, role: SubsetRole, path_for_errors: &Path) -> Result<SubsetHandle> {
    let corrupt = |reason: String| LabError::Corrupt {
        path: path_for_errors.into(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| corrupt("empty manifest".into()))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 4 {
        return Err(corrupt(format!("header needs 4 fields, got {}", fields.len())));
    }
    let strategy = SelectionStrategy::parse(fields[1])
        .ok_or_else(|| corrupt(format!("unknown strategy {:?}", fields[1])))?;
    let fraction: f64 = fields[2]
        .parse()
        .map_err(|_| corrupt(format!("bad fraction {:?}", fields[2])))?;
    let seed: u64 = fields[3]
        .parse()
        .map_err(|_| corrupt(format!("bad seed {:?}", fields[3])))?;
    let mut indices = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        indices.push(
            line.parse::<usize>()
                .map_err(|_| corrupt(format!("bad index line {line:?}")))?,
        );
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(corrupt("indices must be strictly increasing".into()));
    }
    Ok(SubsetHandle {
        dataset_id: fields[0].to_string(),
        indices,
        strategy,
        fraction,
        seed,
        role,
    })
}

pub fn write_manifest(path: &Path, handle: &SubsetHandle) -> Result<()> {
    fs::write(path, to_text(handle)).map_err(|e| LabError::io(path, e))
}

pub fn read_manifest(path: &Path, role: SubsetRole) -> Result<SubsetHandle> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    from_text(&text, role, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn handle() -> SubsetHandle {
        SubsetHandle {
            dataset_id: "tenclass-4x16-s7".into(),
            indices: vec![0, 3, 5, 21, 22, 39],
            strategy: SelectionStrategy::Mix,
            fraction: 0.1,
            seed: 42,
            role: SubsetRole::Mixed,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let h = handle();
        let text = to_text(&h);
        let back = from_text(&text, SubsetRole::Mixed, Path::new("x")).unwrap();
        assert_eq!(back, h);
        // And the text itself survives a second pass unchanged.
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn header_shape() {
        let text = to_text(&handle());
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "tenclass-4x16-s7,mix,0.1,42");
        assert_eq!(lines.count(), 6);
    }

    #[test]
    fn awkward_fraction_round_trips() {
        let mut h = handle();
        h.fraction = 0.1f64 + 0.2f64; // 0.30000000000000004
        let back = from_text(&to_text(&h), SubsetRole::Mixed, Path::new("x")).unwrap();
        assert_eq!(back.fraction.to_bits(), h.fraction.to_bits());
    }

    #[test]
    fn unsorted_indices_rejected() {
        let text = "d,top,0.1,1\n5\n3\n";
        let err = from_text(text, SubsetRole::Retain, Path::new("bad")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("subset.retain.manifest");
        let h = handle();
        write_manifest(&path, &h).unwrap();
        let back = read_manifest(&path, SubsetRole::Mixed).unwrap();
        assert_eq!(back, h);
        // Re-writing produces identical bytes.
        let first = fs::read(&path).unwrap();
        write_manifest(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }
}
