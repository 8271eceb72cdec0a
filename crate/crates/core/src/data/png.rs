use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{Image, SegMask};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an 8-bit PNG as RGB in [-1, 1].
pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path).map_err(image_err(path))?.into_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_rgb8(h as usize, w as usize, rgb.as_raw())
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(image_err(path))
}

/// Reads a single-channel PNG of raw labels.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let dynamic = image::open(path).map_err(image_err(path))?;
    let gray = match dynamic {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Dataset(format!(
                "mask {} must be 8-bit single-channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), gray.into_raw()).expect("buffer length"))
}

pub fn write_mask(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    let buf = GrayImage::from_raw(w as u32, h as u32, labels.iter().copied().collect())
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(image_err(path))
}

pub(crate) fn resize_image(image: &Image, h: usize, w: usize) -> Result<Image> {
    if (image.height(), image.width()) == (h, w) {
        return Ok(image.clone());
    }
    let src = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer length");
    let out = imageops::resize(&src, w as u32, h as u32, FilterType::Triangle);
    Image::from_rgb8(h, w, out.as_raw())
}

/// Nearest-neighbor, so no label is invented at region boundaries.
pub(crate) fn resize_mask(mask: &SegMask, h: usize, w: usize) -> Result<SegMask> {
    let (sh, sw) = mask.dim();
    let src = mask.labels();
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        src[[((y * 2 + 1) * sh / (2 * h)).min(sh - 1), ((x * 2 + 1) * sw / (2 * w)).min(sw - 1)]]
    });
    SegMask::new(labels, mask.num_classes())
}
