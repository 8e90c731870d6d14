//! Reader for the big-endian IDX container used by MNIST-style datasets.

use std::path::Path;

use super::image_set::{assign_splits, LabeledImageSet, Origin, Sample};
use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(bytes.len(), format!("header truncated, needed 4 bytes at offset {offset}")))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    if bytes.is_empty() {
        return Err(Error::format(0, "empty file"));
    }
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::format(0, format!("magic {magic:#010x}, expected {want:#010x}")));
    }
    Ok(())
}

/// Images as `[0,1]` fields; rows map to axis 0 and columns to axis 1.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ScalarField>> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let per = rows * cols;
    let need = 16 + count * per;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need),
            format!("{count} images of {rows}x{cols} need {need} bytes, file has {}", bytes.len()),
        ));
    }
    let grid = Grid::new(&[rows, cols])?;
    Ok(bytes[16..]
        .chunks_exact(per.max(1))
        .take(count)
        .map(|px| ScalarField::from_raw(grid.clone(), px.iter().map(|&p| p as f64 / 255.0).collect()))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::format(
            bytes.len().min(8 + count),
            format!("{count} labels need {} bytes, file has {}", 8 + count, bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an image file and its label file; splits are assigned with `seed`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, seed: u64) -> Result<LabeledImageSet> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let imgs = parse_idx_images(&read(images.as_ref())?)?;
    let labs = parse_idx_labels(&read(labels.as_ref())?)?;
    if imgs.len() != labs.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", imgs.len(), labs.len()),
        ));
    }
    let first = imgs
        .first()
        .ok_or_else(|| Error::format(4, "file holds no images"))?;
    let classes: Vec<usize> = labs.iter().map(|&l| l as usize).collect();
    let splits = assign_splits(&classes, seed);
    let num_classes = classes.iter().copied().max().unwrap_or(0) + 1;
    let mut set = LabeledImageSet::new(first.grid().clone(), num_classes);
    for ((image, class), split) in imgs.into_iter().zip(classes).zip(splits) {
        set.push(Sample {
            image,
            class,
            seg: None,
            split,
            origin: Origin::Original,
        })?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IMAGES_MAGIC, 2, 4, 5] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..40u8).map(|i| i * 6));
        let mut lab = Vec::new();
        for v in [LABELS_MAGIC, 2] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend([7, 3]);
        (img, lab)
    }

    #[test]
    fn parses_hand_built_fixture() {
        let (img, lab) = fixture();
        let images = parse_idx_images(&img).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].grid().dims(), &[4, 5]);
        assert_eq!(images[1].values()[3], (23 * 6) as f64 / 255.0);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
    }

    #[test]
    fn load_from_disk_and_count_mismatch() {
        let (img, mut lab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let set = load_idx(&ip, &lp, 0).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.num_classes(), 8);
        lab[7] = 3;
        lab.push(1);
        std::fs::write(&lp, &lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp, 0), Err(Error::Format { .. })));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_idx_images(&[]), Err(Error::Format { offset: 0, .. })));
        let (mut img, lab) = fixture();
        assert!(parse_idx_images(&lab).is_err());
        img.pop();
        assert!(parse_idx_images(&img).is_err());
        assert!(parse_idx_images(&img[..10]).is_err());
    }
}
