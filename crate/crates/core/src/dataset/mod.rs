//! Dataset manifests, PK batch sampling, part pseudolabel maps and the
//! synthetic clothes-vs-identity generator.

mod manifest;
mod partmap;
mod sampler;
pub mod synth;

use std::path::{Path, PathBuf};

use ndarray::Array3;

pub use manifest::{load_manifest, DatasetManifest, ManifestFile, ManifestRecord, SampleRecord, Split};
pub use partmap::{load_part_map, read_part_map, PartMap, NUM_PARTS};
pub use sampler::{sample_pk_batch, PkBatch};
pub use synth::{generate_synthetic_dataset, SynthSpec, SynthSplit};

use crate::error::{Error, Result};

impl DatasetManifest {
    /// Part map of `record`: `<root>/<part_dir>/<image file stem>.png`.
    pub fn part_map_path(&self, record: &SampleRecord, part_dir: &str) -> PathBuf {
        let stem = record
            .image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.root.join(part_dir).join(format!("{stem}.png"))
    }
}

/// Loads an RGB image as `(h, w, 3)` values in `[0, 1]`, resizing to `size`
/// (`(height, width)`) when needed.
pub fn load_rgb(path: &Path, (h, w): (usize, usize)) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    if !img.color().has_color() {
        return Err(Error::InvalidInput(format!(
            "{}: expected an RGB image, got {:?}",
            path.display(),
            img.color()
        )));
    }
    let mut rgb = img.into_rgb8();
    if rgb.dimensions() != (w as u32, h as u32) {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
    }
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Array3::from_shape_vec((h, w, 3), data).expect("rgb buffer matches size"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::new(4, 4).save(&p).unwrap();
        assert!(matches!(load_rgb(&p, (4, 4)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rgb_images_are_resized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        image::RgbImage::from_pixel(10, 6, image::Rgb([255, 0, 51])).save(&p).unwrap();
        let a = load_rgb(&p, (3, 5)).unwrap();
        assert_eq!(a.dim(), (3, 5, 3));
        assert!((a[[1, 2, 2]] - 0.2).abs() < 1e-9);
    }
}
