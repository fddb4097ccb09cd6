//! CIFAR binary ingestion.
//!
//! A record is one label byte followed by the red, green and blue planes of
//! a 32x32 image, each plane row-major. Files are plain concatenations of
//! records.

use std::fs;
use std::path::Path;

use super::ImageRecord;
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarMeta {
    pub num_classes: usize,
}

impl Default for CifarMeta {
    fn default() -> Self {
        CifarMeta { num_classes: 10 }
    }
}

/// Decodes an in-memory concatenation of records.
pub fn parse_cifar_records(bytes: &[u8], meta: CifarMeta) -> Result<Vec<ImageRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(Error::Dataset {
            offset: whole as u64,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
                bytes.len() - whole
            ),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= meta.num_classes {
                return Err(Error::Dataset {
                    offset: (i * CIFAR_RECORD_BYTES) as u64,
                    msg: format!("label {label} is not below {} classes", meta.num_classes),
                });
            }
            let planes = &rec[1..];
            let mut pixels = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    pixels.push(planes[c * plane + p] as f32 / 255.0);
                }
            }
            Ok(ImageRecord {
                height: CIFAR_SIDE,
                width: CIFAR_SIDE,
                channels: 3,
                pixels,
                label: Some(label),
            })
        })
        .collect()
}

/// Reads one file of records, or every `*.bin` file of a directory in name
/// order.
pub fn load_cifar_binary(path: &Path, meta: CifarMeta) -> Result<Vec<ImageRecord>> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "no .bin files in {}",
                path.display()
            )));
        }
        let mut out = Vec::new();
        for f in files {
            out.extend(load_cifar_binary(&f, meta)?);
        }
        return Ok(out);
    }
    let bytes = fs::read(path)?;
    parse_cifar_records(&bytes, meta).map_err(|e| match e {
        Error::Dataset { offset, msg } => Error::Dataset {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_record_is_black_label_zero() {
        let recs = parse_cifar_records(&[0u8; CIFAR_RECORD_BYTES], CifarMeta::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, Some(0));
        assert!(recs[0].pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncation_and_bad_labels_report_offsets() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES + 5];
        match parse_cifar_records(&bytes, CifarMeta::default()) {
            Err(Error::Dataset { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD_BYTES as u64),
            other => panic!("{other:?}"),
        }
        bytes.truncate(2 * CIFAR_RECORD_BYTES);
        bytes[CIFAR_RECORD_BYTES] = 10;
        match parse_cifar_records(&bytes, CifarMeta::default()) {
            Err(Error::Dataset { offset, .. }) => assert_eq!(offset, CIFAR_RECORD_BYTES as u64),
            other => panic!("{other:?}"),
        }
    }
}
