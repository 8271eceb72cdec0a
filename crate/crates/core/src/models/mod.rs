//! The six networks: two ResNet generators, two patch discriminators and two
//! segmenters, plus the conversions between value types and tensors.

mod discriminator;
mod generator;
mod segmenter;

pub use discriminator::{Discriminator, DiscriminatorCfg};
pub use generator::{Generator, GeneratorCfg};
pub use segmenter::{Segmenter, SegmenterCfg, SegmenterPreset};

use candle_core::{Device, Tensor};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::{Image, LogitMap};

/// Stacks images into an `[N, 3, H, W]` f32 tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if (im.height(), im.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![im.height(), im.width()],
            });
        }
        data.extend(im.data().iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?)
}

fn split_batch(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.detach().flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks(c * h * w)
        .take(n)
        .map(|chunk| Array3::from_shape_vec((c, h, w), chunk.to_vec()).expect("chunk size"))
        .collect())
}

/// Inverse of [`images_to_tensor`]. Values are clamped into [-1, 1].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    split_batch(t)?
        .into_iter()
        .map(|a| Image::new(a.mapv(|v| v.clamp(-1.0, 1.0))))
        .collect()
}

pub fn tensor_to_logits(t: &Tensor) -> Result<Vec<LogitMap>> {
    split_batch(t)?.into_iter().map(LogitMap::new).collect()
}

/// Anything that maps an image from one domain into another.
pub trait Translate {
    fn translate(&self, x: &Image) -> Result<Image>;
}

/// Anything that produces per-pixel class scores for an image.
pub trait Segment {
    fn num_classes(&self) -> usize;
    fn segment(&self, x: &Image) -> Result<LogitMap>;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Translate for IdentityTranslator {
    fn translate(&self, x: &Image) -> Result<Image> {
        Ok(x.clone())
    }
}

/// Ignores its input and always returns the same image.
#[derive(Debug, Clone)]
pub struct ConstantTranslator(pub Image);

impl Translate for ConstantTranslator {
    fn translate(&self, _x: &Image) -> Result<Image> {
        Ok(self.0.clone())
    }
}

impl<T: Translate + ?Sized> Translate for &T {
    fn translate(&self, x: &Image) -> Result<Image> {
        (**self).translate(x)
    }
}

impl<S: Segment + ?Sized> Segment for &S {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn segment(&self, x: &Image) -> Result<LogitMap> {
        (**self).segment(x)
    }
}
