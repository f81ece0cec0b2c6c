use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Number of part classes, background included.
pub const NUM_PARTS: usize = 8;

/// Per-pixel part labels; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartMap {
    pub labels: Array2<u8>,
}

impl PartMap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_PARTS) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                limit: NUM_PARTS,
            });
        }
        Ok(PartMap { labels })
    }

    pub fn constant(size: (usize, usize), label: u8) -> Result<Self> {
        PartMap::new(Array2::from_elem(size, label))
    }

    pub fn size(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Keeps rows `start..end`.
    pub fn crop_rows(&self, start: usize, end: usize) -> Result<PartMap> {
        if start >= end || end > self.labels.nrows() {
            return Err(Error::InvalidInput(format!(
                "empty or out-of-range crop {start}..{end} of {} rows",
                self.labels.nrows()
            )));
        }
        Ok(PartMap {
            labels: self.labels.slice(ndarray::s![start..end, ..]).to_owned(),
        })
    }

    /// Nearest-neighbour resampling; never introduces new labels.
    pub fn resize_nearest(&self, (h, w): (usize, usize)) -> PartMap {
        let (sh, sw) = self.size();
        let labels = Array2::from_shape_fn((h, w), |(y, x)| {
            self.labels[[nearest(y, h, sh), nearest(x, w, sw)]]
        });
        PartMap { labels }
    }

    /// Sorted set of labels present.
    pub fn label_set(&self) -> Vec<u8> {
        let mut present = [false; 256];
        self.labels.iter().for_each(|&l| present[l as usize] = true);
        (0..=255u8).filter(|&l| present[l as usize]).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.size();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([self.labels[[y as usize, x as usize]]])
        });
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })
    }
}

/// Source index whose cell centre is nearest to destination cell `dst`.
fn nearest(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Loads a single-channel label PNG at full resolution.
pub fn read_part_map(path: &Path) -> Result<PartMap> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::InvalidInput(format!(
                "{}: part map must be single-channel 8-bit, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let labels = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0]
    });
    PartMap::new(labels)
}

/// Loads a part map and resamples it to `target_size`.
pub fn load_part_map(path: impl AsRef<Path>, target_size: (usize, usize)) -> Result<PartMap> {
    Ok(read_part_map(path.as_ref())?.resize_nearest(target_size))
}
