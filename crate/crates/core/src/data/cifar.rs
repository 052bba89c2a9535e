//! CIFAR-10 binary-format reader.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RECORD_LEN: usize = 3073;
pub const PIXELS: usize = 3072;
pub const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Raw records of one file: label byte plus the 3072 pixel bytes.
pub fn parse_records<'a>(bytes: &'a [u8], path: &Path) -> Result<Vec<(u8, &'a [u8])>> {
    if bytes.len() % RECORD_LEN != 0 {
        let whole = bytes.len() / RECORD_LEN;
        return Err(Error::DataFormat {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes is not a multiple of {RECORD_LEN}; trailing partial record at offset {}",
                bytes.len(),
                whole * RECORD_LEN
            ),
        });
    }
    bytes
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] > 9 {
                return Err(Error::DataFormat {
                    path: path.to_path_buf(),
                    reason: format!("label byte {} at offset {} exceeds 9", rec[0], i * RECORD_LEN),
                });
            }
            Ok((rec[0], &rec[1..]))
        })
        .collect()
}

/// Pixels scaled to `[0, 1]`, shape `(3, 32, 32)`.
pub fn decode_pixels(pixels: &[u8]) -> Tensor<f32> {
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new(&[3, 32, 32], data).expect("3072 pixels")
}

/// Per-channel standardization with the fixed CIFAR-10 constants.
pub fn standardize(img: &mut Tensor<f32>) {
    let plane = img.numel() / 3;
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v - MEAN[c]) / STD[c];
    }
}

/// Decode, class-filter and subsample the records of `bytes`.
///
/// The subset is drawn without replacement from the filtered records with a generator
/// seeded by `seed`; `subset = None` keeps every filtered record in file order.
pub fn load_cifar10_bytes(bytes: &[u8], path: &Path, classes: &[usize], subset: Option<usize>, seed: u64) -> Result<Vec<Sample>> {
    let records = parse_records(bytes, path)?;
    let kept: Vec<usize> = (0..records.len())
        .filter(|&i| classes.is_empty() || classes.contains(&(records[i].0 as usize)))
        .collect();
    let chosen: Vec<usize> = match subset {
        None => kept,
        Some(k) => {
            if k > kept.len() {
                return Err(Error::DataFormat {
                    path: path.to_path_buf(),
                    reason: format!("subset of {k} requested but only {} records match the class filter", kept.len()),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, kept.len(), k).into_iter().map(|j| kept[j]).collect()
        }
    };
    // labels are remapped to their position in the class filter
    Ok(chosen
        .into_iter()
        .map(|i| {
            let (label, pixels) = records[i];
            let label = if classes.is_empty() {
                label as usize
            } else {
                classes.iter().position(|&c| c == label as usize).expect("filtered")
            };
            let mut image = decode_pixels(pixels);
            standardize(&mut image);
            Sample { image, label }
        })
        .collect())
}

pub fn load_cifar10(path: &Path, classes: &[usize], subset: Option<usize>, seed: u64) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_cifar10_bytes(&bytes, path, classes, subset, seed)
}

/// Files of one split inside an extracted `cifar-10-batches-bin` directory.
pub fn split_files(dir: &Path, train: bool) -> Vec<PathBuf> {
    if train {
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
    } else {
        vec![dir.join("test_batch.bin")]
    }
}

/// Load one split of a CIFAR-10 directory and draw the subset across all its files.
pub fn load_split(dir: &Path, train: bool, classes: &[usize], subset: Option<usize>, seed: u64) -> Result<Vec<Sample>> {
    let mut bytes = Vec::new();
    for f in split_files(dir, train) {
        let chunk = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        parse_records(&chunk, &f)?;
        bytes.extend(chunk);
    }
    load_cifar10_bytes(&bytes, dir, classes, subset, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(fill).take(PIXELS));
        r
    }

    #[test]
    fn record_arithmetic() {
        let bytes: Vec<u8> = (0..10).flat_map(|i| record(i as u8, i as u8)).collect();
        let recs = parse_records(&bytes, Path::new("x")).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(recs[3].0, 3);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes: Vec<u8> = (0..2).flat_map(|_| record(1, 0)).collect();
        bytes.extend([0u8; 100]);
        let err = parse_records(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("6146"), "{err}");
    }

    #[test]
    fn bad_label() {
        let bytes = record(10, 0);
        assert!(parse_records(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn plane_layout_and_scaling() {
        let mut rec = vec![0u8; PIXELS];
        rec[0] = 255;
        rec[1024] = 51;
        let img = decode_pixels(&rec);
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1024], 0.2);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn filtered_subset() {
        let bytes: Vec<u8> = (0..60).flat_map(|i| record((i % 10) as u8, i as u8)).collect();
        let a = load_cifar10_bytes(&bytes, Path::new("x"), &[0, 1], Some(8), 3).unwrap();
        let b = load_cifar10_bytes(&bytes, Path::new("x"), &[0, 1], Some(8), 3).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|s| s.label < 2));
        assert_eq!(a, b);
        assert!(load_cifar10_bytes(&bytes, Path::new("x"), &[0, 1], Some(13), 3).is_err());
    }
}
