//! Dataset files.
//!
//! Layout (all little-endian): the 8-byte magic `FDSRDATA`, then `u32`
//! version, classes, channels, height and width, a `u64` sample count,
//! and per sample the `f32` image followed by the `u8` label map.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, SegSample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FDSRDATA";
const HEADER_LEN: usize = 36;
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset(mut w: impl Write, ds: &Dataset) -> Result<()> {
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    for v in [
        DATASET_VERSION,
        ds.classes as u32,
        ds.channels as u32,
        ds.height as u32,
        ds.width as u32,
    ] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    header.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::new();
    for s in &ds.samples {
        buf.clear();
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.label);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn read_dataset(mut r: impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: "truncated dataset header".into(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad dataset magic".into(),
        });
    }
    let version = u32_at(&bytes, 8);
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "dataset",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let classes = u32_at(&bytes, 12) as usize;
    let channels = u32_at(&bytes, 16) as usize;
    let height = u32_at(&bytes, 20) as usize;
    let width = u32_at(&bytes, 24) as usize;
    let count = u64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes"));
    if !(2..=254).contains(&classes) || channels == 0 || height == 0 || width == 0 {
        return Err(Error::Format {
            offset: 12,
            detail: format!("implausible header: K={classes} C={channels} H={height} W={width}"),
        });
    }
    let px = height * width;
    let img = channels * px;
    let per_sample = img * 4 + px;
    let expected = (count as u128) * per_sample as u128 + HEADER_LEN as u128;
    if expected != bytes.len() as u128 {
        let offset = if (bytes.len() as u128) < expected {
            bytes.len() as u64
        } else {
            expected as u64
        };
        return Err(Error::Format {
            offset,
            detail: format!("{count} samples need {expected} bytes, file has {}", bytes.len()),
        });
    }
    let mut samples = Vec::with_capacity(count as usize);
    let mut offset = HEADER_LEN;
    for i in 0..count as usize {
        let image: Vec<f32> = bytes[offset..offset + img * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += img * 4;
        let label = bytes[offset..offset + px].to_vec();
        if let Some(&bad) = label
            .iter()
            .find(|&&l| l as usize >= classes && l != crate::numeric::tape::IGNORE_LABEL)
        {
            return Err(Error::Data {
                sample: i,
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        offset += px;
        samples.push(SegSample { image, label });
    }
    Dataset::new(channels, height, width, classes, samples)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneConfig};
    use crate::numeric::RngStream;

    fn bytes() -> (Dataset, Vec<u8>) {
        let ds = generate_dataset(&SceneConfig::new(8, 12, 3), 5, &mut RngStream::new(8)).unwrap();
        let mut out = Vec::new();
        write_dataset(&mut out, &ds).unwrap();
        (ds, out)
    }

    #[test]
    fn round_trip_through_file() {
        let (ds, _) = bytes();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.label, b.label);
            assert!(a.image.iter().zip(&b.image).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let (_, b) = bytes();
        match read_dataset(&b[..b.len() - 7]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, b.len() - 7),
            other => panic!("{other:?}"),
        }
        match read_dataset(&b[..20]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (_, mut b) = bytes();
        b[8] = 9;
        assert!(matches!(
            read_dataset(&b[..]),
            Err(Error::UnsupportedVersion {
                found: 9,
                expected: 1,
                ..
            })
        ));
    }

    #[test]
    fn bad_magic_is_at_offset_zero() {
        let (_, mut b) = bytes();
        b[0] = b'X';
        assert!(matches!(read_dataset(&b[..]), Err(Error::Format { offset: 0, .. })));
    }
}
