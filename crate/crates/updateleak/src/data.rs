//! Dataset files: MNIST IDX, CIFAR-10 binary batches, the synthetic check-in
//! surrogate and split manifests.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use updateleak_core::checkin::{synthesize_checkin_dataset, CheckinParams};
use updateleak_core::dataset::{LabeledDataset, SplitIndices};
use updateleak_core::posterior::ProbeFingerprint;

use crate::error::usage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Checkin,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Checkin => "checkin",
        }
    }

    pub fn is_image(self) -> bool {
        !matches!(self, DatasetName::Checkin)
    }

    pub fn sample_shape(self) -> &'static [usize] {
        match self {
            DatasetName::Mnist => &[1, 28, 28],
            DatasetName::Cifar10 => &[3, 32, 32],
            DatasetName::Checkin => &[updateleak_core::checkin::HOURS_PER_WEEK],
        }
    }

    pub fn sample_len(self) -> usize {
        self.sample_shape().iter().product()
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            "checkin" => Ok(DatasetName::Checkin),
            other => Err(usage(format!(
                "unknown dataset `{other}` (expected mnist, cifar10 or checkin)"
            ))),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an IDX file: returns the dimension list and the payload bytes.
/// Only unsigned-byte payloads occur in MNIST.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(path, "not an IDX file"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(path, "IDX payload is not unsigned bytes"));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header != expected {
        return Err(Error::format(
            path,
            format!("IDX payload has {} bytes, header promises {expected}", bytes.len() - header),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn find_file(dirs: &[PathBuf], stem: &str) -> Option<PathBuf> {
    for d in dirs {
        for name in [stem.to_string(), format!("{stem}.gz")] {
            let p = d.join(&name);
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

/// Loads MNIST from IDX files (optionally gzipped) under `root`, `root/mnist`
/// or `root/MNIST/raw`. The training part (60k) and the test part (10k) are
/// concatenated in that order; at least one of them must be present.
pub fn load_mnist(root: &Path) -> Result<LabeledDataset> {
    let dirs = [root.to_path_buf(), root.join("mnist"), root.join("MNIST/raw")];
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut found = false;
    for part in ["train", "t10k"] {
        let images = find_file(&dirs, &format!("{part}-images-idx3-ubyte"));
        let labs = find_file(&dirs, &format!("{part}-labels-idx1-ubyte"));
        let (Some(ip), Some(lp)) = (images, labs) else {
            continue;
        };
        found = true;
        let (idims, pixels) = parse_idx(&read_maybe_gz(&ip)?, &ip)?;
        let (ldims, lbytes) = parse_idx(&read_maybe_gz(&lp)?, &lp)?;
        if idims.len() != 3 || idims[1] != 28 || idims[2] != 28 {
            return Err(Error::format(&ip, format!("expected n×28×28 images, got {idims:?}")));
        }
        if ldims.len() != 1 || ldims[0] != idims[0] {
            return Err(Error::format(&lp, "label count does not match image count"));
        }
        if let Some(bad) = lbytes.iter().find(|&&l| l > 9) {
            return Err(Error::format(&lp, format!("label {bad} outside 0..10")));
        }
        features.extend(pixels.iter().map(|&p| p as f32 / 255.0));
        labels.extend(lbytes.iter().map(|&l| l as u32));
    }
    if !found {
        return Err(Error::io(
            &root.join("mnist"),
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no MNIST IDX files (train-/t10k-images-idx3-ubyte[.gz] with labels)",
            ),
        ));
    }
    Ok(LabeledDataset::new(features, vec![1, 28, 28], labels, 10)?)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads CIFAR-10 from the official binary batches (`data_batch_1.bin` ..
/// `data_batch_5.bin`, `test_batch.bin`) under `root` or
/// `root/cifar-10-batches-bin`. Missing batches are skipped; at least one
/// must exist.
pub fn load_cifar10(root: &Path) -> Result<LabeledDataset> {
    let dirs = [root.to_path_buf(), root.join("cifar-10-batches-bin")];
    let names: Vec<String> = (1..=5)
        .map(|i| format!("data_batch_{i}.bin"))
        .chain(std::iter::once("test_batch.bin".to_string()))
        .collect();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut found = false;
    for name in &names {
        let Some(path) = dirs.iter().map(|d| d.join(name)).find(|p| p.is_file()) else {
            continue;
        };
        found = true;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                &path,
                format!("size {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
            ));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::format(&path, format!("label {} outside 0..10", rec[0])));
            }
            labels.push(rec[0] as u32);
            features.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    if !found {
        return Err(Error::io(
            &root.join("cifar-10-batches-bin"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 binary batches"),
        ));
    }
    Ok(LabeledDataset::new(features, vec![3, 32, 32], labels, 10)?)
}

/// Loads a benchmark image dataset by name.
pub fn load_image_dataset(name: &str, root: &Path) -> Result<LabeledDataset> {
    match name.parse::<DatasetName>()? {
        DatasetName::Mnist => load_mnist(root),
        DatasetName::Cifar10 => load_cifar10(root),
        DatasetName::Checkin => Err(usage(
            "checkin is synthesized, not loaded; use synthesize_checkin_dataset",
        )),
    }
}

/// Loads or synthesizes the dataset selected by `name`.
pub fn load_dataset(name: DatasetName, root: &Path, checkin: &CheckinParams) -> Result<LabeledDataset> {
    match name {
        DatasetName::Mnist => load_mnist(root),
        DatasetName::Cifar10 => load_cifar10(root),
        DatasetName::Checkin => Ok(synthesize_checkin_dataset(checkin)?),
    }
}

/// The probing set together with the fingerprint of its source indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub data: LabeledDataset,
    pub fingerprint: ProbeFingerprint,
}

impl ProbeSet {
    pub fn new(data: LabeledDataset, source_indices: &[usize]) -> Self {
        Self {
            data,
            fingerprint: ProbeFingerprint::of_indices(source_indices),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// On-disk record of a three-way split: indices into the loaded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    pub num_samples: usize,
    pub target: Vec<usize>,
    pub shadow: Vec<usize>,
    pub probe: Vec<usize>,
}

impl SplitManifest {
    pub fn new(dataset: DatasetName, seed: u64, config_hash: &str, num_samples: usize, idx: &SplitIndices) -> Self {
        Self {
            dataset: dataset.as_str().to_string(),
            seed,
            config_hash: config_hash.to_string(),
            num_samples,
            target: idx.target.clone(),
            shadow: idx.shadow.clone(),
            probe: idx.probe.clone(),
        }
    }

    pub fn indices(&self) -> SplitIndices {
        SplitIndices {
            target: self.target.clone(),
            shadow: self.shadow.clone(),
            probe: self.probe.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn parses_idx_and_rejects_truncation() {
        let p = Path::new("x");
        let (dims, payload) = parse_idx(&idx_bytes(&[2, 3], &[1, 2, 3, 4, 5, 6]), p).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(payload.len(), 6);
        assert!(parse_idx(&idx_bytes(&[2, 3], &[1, 2]), p).is_err());
        assert!(parse_idx(b"PK\x03\x04", p).is_err());
    }

    #[test]
    fn unknown_dataset_is_usage_error() {
        let e = load_image_dataset("imagenet", Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(e, Error::Core(updateleak_core::Error::Usage(_))));
    }

    #[test]
    fn missing_files_name_the_path() {
        let e = load_image_dataset("mnist", Path::new("/nonexistent/root")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/root"));
        assert_eq!(e.exit_code(), 3);
    }
}
