//! Value types shared by every stage of the pipeline.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mask value for pixels that carry no class. Excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Slack allowed on the [-1, 1] pixel range.
pub const RANGE_EPS: f32 = 1e-4;

/// Networks require spatial dims divisible by this (two stride-2 stages in
/// the generator).
pub const SPATIAL_MULTIPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }
}

/// Translation direction: `AB` maps domain A into domain B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    AB,
    BA,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::AB => Domain::A,
            Direction::BA => Domain::B,
        }
    }

    pub fn target(self) -> Domain {
        self.source().other()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::AB => "ab",
            Direction::BA => "ba",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ab" => Ok(Direction::AB),
            "ba" => Ok(Direction::BA),
            other => Err(Error::invalid(format!("unknown direction `{other}` (expected ab|ba)"))),
        }
    }
}

/// An RGB image, channels first, with pixels normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::invalid(format!("image must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("image must be non-empty"));
        }
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::invalid("image contains non-finite values"));
            }
            if !(-1.0 - RANGE_EPS..=1.0 + RANGE_EPS).contains(&v) {
                return Err(Error::invalid(format!("pixel value {v} outside [-1, 1]")));
            }
        }
        Ok(Image { data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Image::new(Array3::zeros((3, h, w)))
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Result<Self> {
        Image::new(Array3::from_elem((3, h, w), value))
    }

    /// Builds an image from 8-bit RGB rows, mapping [0, 255] linearly onto [-1, 1].
    pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != h * w * 3 {
            return Err(Error::invalid(format!(
                "rgb buffer of length {} does not match {h}x{w}",
                rgb.len()
            )));
        }
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            rgb[(y * w + x) * 3 + c] as f32 / 127.5 - 1.0
        });
        Image::new(data)
    }

    /// Inverse of [`Image::from_rgb8`], rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (_, h, w) = self.data.dim();
        let mut out = vec![0u8; h * w * 3];
        for ((c, y, x), &v) in self.data.indexed_iter() {
            out[(y * w + x) * 3 + c] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Errors unless `h` and `w` are positive multiples of [`SPATIAL_MULTIPLE`].
pub fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        return Err(Error::invalid(format!(
            "spatial size {h}x{w} must be non-empty multiples of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Per-pixel class labels in `0..num_classes`, or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    labels: Array2<u8>,
    num_classes: usize,
}

impl SegMask {
    pub fn new(labels: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes > IGNORE as usize {
            return Err(Error::invalid(format!(
                "class count {num_classes} must lie in 2..=254"
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= num_classes)
        {
            return Err(Error::invalid(format!(
                "label {bad} is not valid for {num_classes} classes"
            )));
        }
        Ok(SegMask {
            labels,
            num_classes,
        })
    }

    pub fn filled(h: usize, w: usize, label: u8, num_classes: usize) -> Result<Self> {
        SegMask::new(Array2::from_elem((h, w), label), num_classes)
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Applies a class permutation; IGNORE stays IGNORE.
    pub fn remapped(&self, perm: &LabelPermutation) -> Result<SegMask> {
        if perm.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "permutation over {} classes applied to a {}-class mask",
                perm.len(),
                self.num_classes
            )));
        }
        let labels = self
            .labels
            .mapv(|l| if l == IGNORE { IGNORE } else { perm.apply(l) });
        Ok(SegMask {
            labels,
            num_classes: self.num_classes,
        })
    }
}

/// Unnormalized per-class scores, shape `[K, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    scores: Array3<f32>,
}

impl LogitMap {
    pub fn new(scores: Array3<f32>) -> Result<Self> {
        if scores.dim().0 < 2 {
            return Err(Error::invalid("logit map needs at least 2 classes"));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logit map contains non-finite values"));
        }
        Ok(LogitMap { scores })
    }

    pub fn num_classes(&self) -> usize {
        self.scores.dim().0
    }

    pub fn scores(&self) -> &Array3<f32> {
        &self.scores
    }

    /// Per-pixel argmax; ties resolve to the lowest class id.
    pub fn argmax(&self) -> SegMask {
        let (k, h, w) = self.scores.dim();
        let labels = Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0usize;
            for c in 1..k {
                if self.scores[(c, y, x)] > self.scores[(best, y, x)] {
                    best = c;
                }
            }
            best as u8
        });
        SegMask {
            labels,
            num_classes: k,
        }
    }
}

/// A bijection on `0..K`, used to switch labels between source and target
/// classes in the consistency loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPermutation(Vec<u8>);

impl LabelPermutation {
    pub fn identity(k: usize) -> Self {
        LabelPermutation((0..k as u8).collect())
    }

    pub fn new(map: Vec<u8>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &t in &map {
            let slot = seen
                .get_mut(t as usize)
                .ok_or_else(|| Error::invalid(format!("label remap target {t} out of range")))?;
            if *slot {
                return Err(Error::invalid(format!(
                    "label remap is not a bijection: {t} used twice"
                )));
            }
            *slot = true;
        }
        Ok(LabelPermutation(map))
    }

    /// Parses `"src:dst,src:dst"`; unlisted classes map to themselves.
    pub fn parse(spec: &str, k: usize) -> Result<Self> {
        let mut map: Vec<u8> = (0..k as u8).collect();
        for pair in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (src, dst) = pair
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("bad remap entry `{pair}`")))?;
            let parse = |s: &str| -> Result<u8> {
                let v: usize = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad class id `{s}`")))?;
                if v >= k {
                    return Err(Error::invalid(format!("class id {v} out of range for K={k}")));
                }
                Ok(v as u8)
            };
            map[parse(src)? as usize] = parse(dst)?;
        }
        LabelPermutation::new(map)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &t)| i == t as usize)
    }

    pub fn apply(&self, label: u8) -> u8 {
        self.0[label as usize]
    }
}

/// An image with its ground-truth mask and the domain it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub mask: SegMask,
    pub domain: Domain,
}

impl LabeledSample {
    pub fn new(image: Image, mask: SegMask, domain: Domain) -> Result<Self> {
        let (h, w) = mask.dim();
        if (image.height(), image.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![image.height(), image.width()],
                actual: vec![h, w],
            });
        }
        Ok(LabeledSample {
            image,
            mask,
            domain,
        })
    }
}

/// Zeroes every pixel whose mask entry is 0, across all channels.
pub fn apply_mask(image: &Image, mask: ArrayView2<u8>) -> Result<Image> {
    let (h, w) = mask.dim();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: vec![image.height(), image.width()],
            actual: vec![h, w],
        });
    }
    if let Some(&bad) = mask.iter().find(|&&m| m > 1) {
        return Err(Error::invalid(format!("binary mask contains value {bad}")));
    }
    let mut data = image.data.clone();
    for mut channel in data.axis_iter_mut(Axis(0)) {
        Zip::from(&mut channel).and(mask).for_each(|v, &m| {
            if m == 0 {
                *v = 0.0;
            }
        });
    }
    Ok(Image { data })
}

/// One-hot encoding `[K, H, W]`; IGNORE pixels are zero in every channel.
pub fn one_hot(mask: &SegMask, k: usize) -> Result<Array3<f32>> {
    let (h, w) = mask.dim();
    let mut out = Array3::zeros((k, h, w));
    for ((y, x), &l) in mask.labels.indexed_iter() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= k {
            return Err(Error::invalid(format!("label {l} out of range for K={k}")));
        }
        out[(l as usize, y, x)] = 1.0;
    }
    Ok(out)
}
