//! VOC-style folders: `root/images/<stem>.png` (RGB) and
//! `root/masks/<stem>.png` (single-channel class indices).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::schedule::{ClassId, LabeledSample};

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            stems.insert(stem.to_string(), path.clone());
        }
    }
    Ok(stems)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Load every image/mask pair under `root`, sorted by stem. Mask values above
/// `max_class_id` are rejected.
pub fn load_voc_format(root: &Path, max_class_id: ClassId) -> Result<Vec<LabeledSample>> {
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    if let Some(stem) = images.keys().find(|s| !masks.contains_key(*s)) {
        return Err(Error::PairMismatch(stem.clone()));
    }
    if let Some(stem) = masks.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::PairMismatch(stem.clone()));
    }

    let mut out = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let mask_path = &masks[stem];
        let rgb = open(image_path)?.to_rgb8();
        let gray = open(mask_path)?;
        if gray.color().channel_count() != 1 {
            return Err(Error::Shape(format!(
                "{} is not a single-channel mask",
                mask_path.display()
            )));
        }
        let gray = gray.to_luma8();
        if rgb.dimensions() != gray.dimensions() {
            return Err(Error::Shape(format!(
                "{stem}: image is {:?} but mask is {:?}",
                rgb.dimensions(),
                gray.dimensions()
            )));
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut pixels = vec![0f32; 3 * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
            }
        }
        let mut mask = Vec::with_capacity(h * w);
        for p in gray.pixels() {
            let v = p[0] as ClassId;
            if v > max_class_id {
                return Err(Error::InvalidMask {
                    path: mask_path.clone(),
                    value: v,
                });
            }
            mask.push(v);
        }
        out.push(LabeledSample::new(3, h, w, pixels, mask)?);
    }
    Ok(out)
}

/// Write samples as `<prefix><index>.png` pairs in VOC layout.
pub fn write_voc_format(samples: &[LabeledSample], root: &Path, prefix: &str) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let digits = samples.len().max(1).to_string().len();
    for (i, s) in samples.iter().enumerate() {
        if s.channels != 3 {
            return Err(Error::Shape("only 3-channel images can be written".into()));
        }
        let (h, w) = (s.height, s.width);
        let rgb: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| {
                let v = s.image[(c * h + y as usize) * w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([at(0), at(1), at(2)])
        });
        let mut gray = GrayImage::new(w as u32, h as u32);
        for (idx, &c) in s.mask.iter().enumerate() {
            let value = u8::try_from(c)
                .map_err(|_| Error::Contract(format!("class id {c} does not fit a u8 mask")))?;
            gray.put_pixel((idx % w) as u32, (idx / w) as u32, Luma([value]));
        }
        let name = format!("{prefix}{i:0digits$}.png");
        let image_path = images_dir.join(&name);
        rgb.save(&image_path).map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;
        let mask_path = masks_dir.join(&name);
        gray.save(&mask_path).map_err(|source| Error::Image {
            path: mask_path.clone(),
            source,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(mask: Vec<ClassId>) -> LabeledSample {
        let image = (0..3 * 4).map(|i| i as f32 / 12.0).collect();
        LabeledSample::new(3, 2, 2, image, mask).unwrap()
    }

    #[test]
    fn roundtrip_in_stem_order() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample(vec![0, 1, 2, 0]), sample(vec![3, 3, 0, 0])];
        write_voc_format(&samples, dir.path(), "img").unwrap();
        let loaded = load_voc_format(dir.path(), 20).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].mask, samples[0].mask);
        assert_eq!(loaded[1].mask, samples[1].mask);
        for (a, b) in loaded[0].image.iter().zip(&samples[0].image) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn missing_mask_names_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_voc_format(&[sample(vec![0; 4]), sample(vec![0; 4])], dir.path(), "s").unwrap();
        fs::remove_file(dir.path().join("masks/s1.png")).unwrap();
        match load_voc_format(dir.path(), 20) {
            Err(Error::PairMismatch(stem)) => assert_eq!(stem, "s1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_mask_value() {
        let dir = tempfile::tempdir().unwrap();
        write_voc_format(&[sample(vec![0, 255, 1, 0])], dir.path(), "v").unwrap();
        let err = load_voc_format(dir.path(), 20).unwrap_err();
        assert_eq!(err.code(), "INVALID_MASK");
        assert!(err.to_string().contains("v0.png"));
    }

    #[test]
    fn missing_root_is_io_error() {
        let err = load_voc_format(Path::new("/nonexistent/voc"), 20).unwrap_err();
        assert_eq!(err.code(), "IO_ERROR");
    }
}
