//! Datasets on disk, labeled/unlabeled splits and the synthetic gland set.
//!
//! On-disk layout:
//!
//! ```text
//! root/images/{train,test}/<id>.png   RGB, 8 bit
//! root/masks/{train,test}/<id>.png    single channel, class ids, 255 = ignore
//! ```

mod split;
mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub use split::{labeled_count, make_ssl_split, SplitManifest};
pub use synthetic::{generate_synthetic_glands, SyntheticSpec};

/// Mask value excluded from every loss and metric.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train|test)"))),
        }
    }
}

/// One image with an optional label map.
///
/// `image` is `[3, H, W]` in `[0, 1]`; `mask` is `[H, W]` with class ids in
/// `0..C` or [`IGNORE_INDEX`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.shape()[0] != 3 {
            return Err(Error::Data(format!(
                "{}: image must have 3 channels, got {}",
                self.id,
                self.image.shape()[0]
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != (self.height(), self.width()) {
                return Err(Error::Data(format!(
                    "{}: mask shape {:?} does not match image {}x{}",
                    self.id,
                    mask.dim(),
                    self.height(),
                    self.width()
                )));
            }
            if let Some(&v) = mask
                .iter()
                .find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes)
            {
                return Err(Error::Data(format!(
                    "{}: mask value {v} outside 0..{num_classes} and not {IGNORE_INDEX}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// The same sample with its mask dropped.
    pub fn unlabeled(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.clone(),
            mask: None,
        }
    }
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn image_path(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join("images").join(split.dir_name()).join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join("masks").join(split.dir_name()).join(format!("{id}.png"))
}

pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .expect("luma buffer has h*w bytes"))
}

pub fn to_rgb_image(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn to_gray_image(mask: &Array2<u8>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_raw(w as u32, h as u32, mask.iter().copied().collect())
        .expect("mask buffer has h*w bytes")
}

/// Load every image of `split` under `root` with its mask.
///
/// Samples come back ordered by id. Every image must have a mask, and masks
/// may only contain class ids below `num_classes` or the ignore value.
pub fn load_dataset(root: &Path, split: Split, num_classes: usize) -> Result<Vec<Sample>> {
    let image_dir = root.join("images").join(split.dir_name());
    let ids = png_ids(&image_dir)?;
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no samples found under {}",
            image_dir.display()
        )));
    }
    ids.into_iter()
        .map(|id| {
            let mpath = mask_path(root, split, &id);
            if !mpath.exists() {
                return Err(Error::Data(format!(
                    "missing mask for image \"{id}\" (expected {})",
                    mpath.display()
                )));
            }
            let sample = Sample {
                image: read_image(&image_path(root, split, &id))?,
                mask: Some(read_mask(&mpath)?),
                id,
            };
            sample.validate(num_classes)?;
            Ok(sample)
        })
        .collect()
}

/// Load only the images of `split` (no masks required).
pub fn load_images(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let image_dir = root.join("images").join(split.dir_name());
    let ids = png_ids(&image_dir)?;
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no samples found under {}",
            image_dir.display()
        )));
    }
    ids.into_iter()
        .map(|id| {
            Ok(Sample {
                image: read_image(&image_path(root, split, &id))?,
                mask: None,
                id,
            })
        })
        .collect()
}

/// Partition samples by a split manifest. Labeled samples must carry masks;
/// unlabeled samples have their masks dropped.
pub fn apply_split(samples: Vec<Sample>, split: &SplitManifest) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut by_id: std::collections::HashMap<String, Sample> =
        samples.into_iter().map(|s| (s.id.clone(), s)).collect();
    let mut take = |id: &String| {
        by_id
            .remove(id)
            .ok_or_else(|| Error::Data(format!("split lists \"{id}\" but no such image exists")))
    };
    let labeled = split
        .labeled_ids
        .iter()
        .map(|id| {
            let s = take(id)?;
            if s.mask.is_none() {
                return Err(Error::Data(format!("labeled image \"{id}\" has no mask")));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = split
        .unlabeled_ids
        .iter()
        .map(|id| Ok(take(id)?.unlabeled()))
        .collect::<Result<Vec<_>>>()?;
    Ok((labeled, unlabeled))
}

/// Write samples in the on-disk layout. Samples without masks get no mask file.
pub fn write_dataset(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    let idir = root.join("images").join(split.dir_name());
    let mdir = root.join("masks").join(split.dir_name());
    std::fs::create_dir_all(&idir).map_err(|e| Error::io(&idir, e))?;
    std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
    for s in samples {
        let ipath = image_path(root, split, &s.id);
        to_rgb_image(&s.image)
            .save(&ipath)
            .map_err(|source| Error::Image { path: ipath, source })?;
        if let Some(mask) = &s.mask {
            let mpath = mask_path(root, split, &s.id);
            to_gray_image(mask)
                .save(&mpath)
                .map_err(|source| Error::Image { path: mpath, source })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(id: &str, fill: u8) -> Sample {
        Sample {
            id: id.into(),
            image: Array3::from_elem((3, 4, 5), 0.5),
            mask: Some(Array2::from_elem((4, 5), fill)),
        }
    }

    #[test]
    fn empty_directory_reports_no_samples() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), Split::Train, 2).unwrap_err();
        assert!(err.to_string().contains("no samples found"), "{err}");
    }

    #[test]
    fn missing_mask_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny("a", 0);
        s.mask = None;
        write_dataset(dir.path(), Split::Train, &[s]).unwrap();
        let err = load_dataset(dir.path(), Split::Train, 2).unwrap_err();
        assert!(err.to_string().contains("\"a\""), "{err}");
    }

    #[test]
    fn out_of_range_mask_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), Split::Train, &[tiny("a", 7)]).unwrap();
        let err = load_dataset(dir.path(), Split::Train, 2).unwrap_err();
        assert!(err.to_string().contains("mask value 7"), "{err}");
    }

    #[test]
    fn ignore_value_is_accepted_and_order_is_by_id() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), Split::Test, &[tiny("b", 1), tiny("a", IGNORE_INDEX)]).unwrap();
        let first = load_dataset(dir.path(), Split::Test, 2).unwrap();
        let second = load_dataset(dir.path(), Split::Test, 2).unwrap();
        let ids: Vec<_> = first.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(first, second);
        assert!(first[0].image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(first[0].mask.as_ref().unwrap()[[0, 0]], IGNORE_INDEX);
    }

    #[test]
    fn pixel_values_survive_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny("x", 1);
        s.image[[0, 1, 2]] = 1.0;
        s.image[[2, 3, 4]] = 0.0;
        write_dataset(dir.path(), Split::Train, &[s.clone()]).unwrap();
        let back = load_dataset(dir.path(), Split::Train, 2).unwrap();
        assert_eq!(back[0].image[[0, 1, 2]], 1.0);
        assert_eq!(back[0].image[[2, 3, 4]], 0.0);
        assert_eq!(back[0].mask, s.mask);
    }
}
