//! Paired image/mask datasets on disk, splits, crops and unpaired sampling.

mod png;
mod toy;

pub use png::{read_image, read_mask, write_image, write_mask};
pub use toy::{generate_toy_domains, toy_splits, toy_taxonomy, Palette, ToySplits, ToyWorldCfg, SPLITS, TOY_CLASSES};

use std::path::{Path, PathBuf};

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;
use crate::types::{Domain, Image, LabeledSample, SegMask};

/// Default height x width for resizing real road-scene datasets.
pub const ROAD_SCENE_SIZE: (usize, usize) = (540, 860);

#[derive(Debug, Clone)]
struct Entry {
    stem: String,
    image: PathBuf,
    mask: PathBuf,
}

/// An ordered index of image/mask pairs, decoded on access.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<Entry>,
    taxonomy: ClassTaxonomy,
    domain: Domain,
    resize: Option<(usize, usize)>,
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let rd = match std::fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Indexes `<root>/images/*.png` against `<root>/masks/*.png` by stem.
pub fn load_dataset(root: &Path, taxonomy: &ClassTaxonomy, domain: Domain) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let masks_dir = root.join("masks");
    let mut entries = Vec::new();
    for (stem, image) in png_stems(&root.join("images"))? {
        let mask = masks_dir.join(format!("{stem}.png"));
        if !mask.is_file() {
            return Err(Error::Dataset(format!(
                "image `{stem}` in {} has no mask",
                root.display()
            )));
        }
        entries.push(Entry { stem, image, mask });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        entries,
        taxonomy: taxonomy.clone(),
        domain,
        resize: None,
    })
}

impl Dataset {
    /// Resize every image (bilinear) and mask (nearest) to `h x w` on access.
    pub fn with_resize(mut self, h: usize, w: usize) -> Self {
        self.resize = Some((h, w));
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn taxonomy(&self) -> &ClassTaxonomy {
        &self.taxonomy
    }

    pub fn stems(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.stem.as_str())
    }

    pub fn get(&self, i: usize) -> Result<LabeledSample> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| Error::invalid(format!("index {i} out of range for {} samples", self.len())))?;
        let mut image = read_image(&e.image)?;
        let raw = read_mask(&e.mask)?;
        let mut mask = self.taxonomy.remap_mask(&raw).map_err(|err| match err {
            Error::Taxonomy(msg) => Error::Taxonomy(format!("{msg} in {}", e.mask.display())),
            other => other,
        })?;
        if let Some((h, w)) = self.resize {
            image = png::resize_image(&image, h, w)?;
            mask = png::resize_mask(&mask, h, w)?;
        }
        LabeledSample::new(image, mask, self.domain).map_err(|err| {
            Error::Dataset(format!("`{}`: image and mask disagree: {err}", e.stem))
        })
    }

    /// Decodes every sample.
    pub fn load_all(&self) -> Result<Vec<LabeledSample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    fn subset(&self, mut idx: Vec<usize>) -> Dataset {
        idx.sort_unstable();
        Dataset {
            entries: idx.into_iter().map(|i| self.entries[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Seeded random partition into train/val/test. Validation and test sizes
/// are floored; the remainder goes to train.
pub fn split_dataset(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let sizes = split_sizes(ds.len(), ratios)?;
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(idx.len() - sizes.2);
    let val = idx.split_off(idx.len() - sizes.1);
    Ok((ds.subset(idx), ds.subset(val), ds.subset(test)))
}

/// `(train, val, test)` counts for `n` samples.
pub fn split_sizes(n: usize, (tr, va, te): (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios ({tr}, {va}, {te}) must be in [0, 1] and sum to 1"
        )));
    }
    if n < 3 {
        return Err(Error::Dataset(format!("cannot split {n} samples into three parts")));
    }
    // the epsilon keeps 100 * 0.05 from flooring to 4
    let part = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let (v, t) = (part(va), part(te));
    Ok((n - v - t, v, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Random crop and optional horizontal flip.
    Train,
    /// Center crop only.
    Eval,
}

/// Crops image and mask jointly to `crop x crop`.
pub fn augment<R: Rng + ?Sized>(
    sample: &LabeledSample,
    mode: AugmentMode,
    crop: usize,
    flip: bool,
    rng: &mut R,
) -> Result<LabeledSample> {
    let (h, w) = sample.mask.dim();
    if crop == 0 || h < crop || w < crop {
        return Err(Error::invalid(format!("cannot crop {crop}x{crop} from a {h}x{w} image")));
    }
    let (r0, c0, mirror) = match mode {
        AugmentMode::Eval => ((h - crop) / 2, (w - crop) / 2, false),
        AugmentMode::Train => {
            let r0 = rng.random_range(0..=h - crop);
            let c0 = rng.random_range(0..=w - crop);
            (r0, c0, flip && rng.random_bool(0.5))
        }
    };
    let mut img = sample
        .image
        .data()
        .slice(s![.., r0..r0 + crop, c0..c0 + crop])
        .to_owned();
    let mut labels = sample
        .mask
        .labels()
        .slice(s![r0..r0 + crop, c0..c0 + crop])
        .to_owned();
    if mirror {
        img.invert_axis(Axis(2));
        labels.invert_axis(Axis(1));
        img = img.as_standard_layout().to_owned();
        labels = labels.as_standard_layout().to_owned();
    }
    LabeledSample::new(
        Image::new(img)?,
        SegMask::new(labels, sample.mask.num_classes())?,
        sample.domain,
    )
}

/// Independent uniform draws (with replacement) from each collection.
pub fn sample_unpaired_batch<'a, T, R: Rng + ?Sized>(
    a: &'a [T],
    b: &'a [T],
    batch_size: usize,
    rng: &mut R,
) -> Result<(Vec<&'a T>, Vec<&'a T>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Dataset("cannot sample from an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let xa = (0..batch_size).map(|_| &a[rng.random_range(0..a.len())]).collect();
    let xb = (0..batch_size).map(|_| &b[rng.random_range(0..b.len())]).collect();
    Ok((xa, xb))
}
