//! Files on disk: masks, images, probability maps and synthetic datasets.

use crate::CliError;
use std::fs;
use std::path::{Path, PathBuf};
use vsr_core::raster::{decode_mask, encode_mask_with_comment, BinaryMask, GrayImage};

pub const CLEAN_SUFFIX: &str = "_clean.pbm";
pub const RUPTURED_SUFFIX: &str = "_ruptured.pbm";
pub const IMAGE_SUFFIX: &str = "_image.pgm";
pub const REHAB_SUFFIX: &str = "_rehab.pbm";
pub const PROB_SUFFIX: &str = "_rehab.prob";
const PROB_MAGIC: &[u8; 8] = b"VSRPROB1";

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, CliError> {
    decode_mask(&read(path)?).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_mask(path: &Path, mask: &BinaryMask, header: &str) -> Result<(), CliError> {
    write(path, &encode_mask_with_comment(mask, Some(header)))
}

pub fn read_image(path: &Path) -> Result<GrayImage, CliError> {
    GrayImage::decode_pgm(&read(path)?).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Probability map: magic, dimension count, little-endian u32 dims, then f64 values.
pub fn encode_probabilities(dims: &[usize], values: &[f64]) -> Vec<u8> {
    let mut out = PROB_MAGIC.to_vec();
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend((d as u32).to_le_bytes());
    }
    for v in values {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn decode_probabilities(path: &Path) -> Result<(Vec<usize>, Vec<f64>), CliError> {
    let bytes = read(path)?;
    let malformed = |m: &str| CliError::Input {
        path: path.to_path_buf(),
        message: m.into(),
    };
    if !bytes.starts_with(PROB_MAGIC) || bytes.len() < 9 {
        return Err(malformed("not a probability map"));
    }
    let ndim = bytes[8] as usize;
    let body = &bytes[9..];
    if body.len() < 4 * ndim {
        return Err(malformed("truncated header"));
    }
    let dims: Vec<usize> = body[..4 * ndim]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let payload = &body[4 * ndim..];
    let n: usize = dims.iter().product();
    if payload.len() != 8 * n {
        return Err(malformed("payload size does not match dims"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((dims, values))
}

/// One synthetic sample on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFiles {
    pub key: String,
    pub ruptured: PathBuf,
    pub clean: PathBuf,
    pub image: Option<PathBuf>,
}

pub fn sample_key(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Samples in `dir` that have both a ruptured and a clean mask, by key.
pub fn list_samples(dir: &Path) -> Result<Vec<SampleFiles>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut keys = Vec::new();
    for entry in entries {
        let name = entry.map_err(|e| CliError::io(dir, e))?.file_name();
        if let Some(key) = name.to_str().and_then(|n| n.strip_suffix(RUPTURED_SUFFIX)) {
            keys.push(key.to_string());
        }
    }
    keys.sort();
    let samples: Vec<SampleFiles> = keys
        .into_iter()
        .filter_map(|key| {
            let clean = dir.join(format!("{key}{CLEAN_SUFFIX}"));
            if !clean.is_file() {
                return None;
            }
            let image = dir.join(format!("{key}{IMAGE_SUFFIX}"));
            Some(SampleFiles {
                ruptured: dir.join(format!("{key}{RUPTURED_SUFFIX}")),
                clean,
                image: image.is_file().then_some(image),
                key,
            })
        })
        .collect();
    if samples.is_empty() {
        return Err(CliError::Input {
            path: dir.to_path_buf(),
            message: format!("no *{RUPTURED_SUFFIX} / *{CLEAN_SUFFIX} pairs"),
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.prob");
        write(&p, &encode_probabilities(&[2, 3], &[0.0, 0.25, 0.5, 0.75, 1.0, 0.125])).unwrap();
        let (dims, v) = decode_probabilities(&p).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(v[5], 0.125);
        write(&p, b"VSRPROB1\x01\x02\x00\x00\x00").unwrap();
        assert!(decode_probabilities(&p).is_err());
    }
}
