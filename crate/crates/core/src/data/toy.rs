//! A procedural two-domain world: scenes of ground, a sky band and a few
//! blobs, rendered with a different palette (and noise level) per domain.
//! With the ambiguity flag, sky and blob-1 trade colors between domains, so
//! a translator that only matches color statistics maps sky onto blob-1.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{load_dataset, write_image, write_mask, Dataset};
use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;
use crate::types::{Domain, Image};

pub const TOY_CLASSES: [&str; 5] = ["background", "ground", "sky", "blob1", "blob2"];
const GROUND: u8 = 1;
const SKY: u8 = 2;
const BLOB1: u8 = 3;
const BLOB2: u8 = 4;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One RGB color per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(pub [[u8; 3]; 5]);

impl Palette {
    pub fn domain_a() -> Self {
        Palette([[128, 128, 128], [60, 140, 60], [80, 140, 230], [220, 60, 50], [230, 210, 60]])
    }

    pub fn domain_b() -> Self {
        Palette([[95, 90, 80], [90, 120, 40], [120, 150, 200], [180, 40, 90], [250, 160, 40]])
    }

    fn swapped(mut self, i: usize, j: usize) -> Self {
        self.0.swap(i, j);
        self
    }

    fn validate(&self) -> Result<()> {
        for i in 0..5 {
            for j in i + 1..5 {
                if self.0[i] == self.0[j] {
                    return Err(Error::Config(format!("palette repeats a color for classes {i} and {j}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldCfg {
    /// Side of the square images.
    pub size: usize,
    pub counts: (usize, usize, usize),
    pub seed: u64,
    pub ambiguity: bool,
    pub palette_a: Palette,
    pub palette_b: Palette,
    /// Per-pixel Gaussian noise in 8-bit levels.
    pub noise_a: f64,
    pub noise_b: f64,
}

impl Default for ToyWorldCfg {
    fn default() -> Self {
        ToyWorldCfg {
            size: 64,
            counts: (200, 20, 40),
            seed: 0,
            ambiguity: true,
            palette_a: Palette::domain_a(),
            palette_b: Palette::domain_b(),
            noise_a: 3.0,
            noise_b: 8.0,
        }
    }
}

impl ToyWorldCfg {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 4 != 0 {
            return Err(Error::Config(format!("toy image size {} must be a multiple of 4, >= 16", self.size)));
        }
        if self.counts.0 == 0 {
            return Err(Error::Config("toy train split must be non-empty".into()));
        }
        if !(self.noise_a >= 0.0 && self.noise_b >= 0.0) {
            return Err(Error::Config("toy noise levels must be >= 0".into()));
        }
        self.palette_a.validate()?;
        self.palette_b.validate()
    }

    /// The palette actually used to render `domain`.
    pub fn effective_palette(&self, domain: Domain) -> Palette {
        match domain {
            Domain::A => self.palette_a,
            Domain::B if self.ambiguity => self.palette_b.swapped(SKY as usize, BLOB1 as usize),
            Domain::B => self.palette_b,
        }
    }

    fn manifest(&self) -> String {
        let mut s = String::from("# procedural two-domain toy world\n");
        let c = |p: &Palette| {
            p.0.iter()
                .map(|[r, g, b]| format!("{r}/{g}/{b}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "size={}", self.size);
        let _ = writeln!(s, "counts={},{},{}", self.counts.0, self.counts.1, self.counts.2);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "ambiguity={}", if self.ambiguity { "on" } else { "off" });
        let _ = writeln!(s, "classes={}", TOY_CLASSES.join(","));
        let _ = writeln!(s, "palette_a={}", c(&self.effective_palette(Domain::A)));
        let _ = writeln!(s, "palette_b={}", c(&self.effective_palette(Domain::B)));
        let _ = writeln!(s, "noise_a={}", self.noise_a);
        let _ = writeln!(s, "noise_b={}", self.noise_b);
        s
    }
}

/// Scene layout: sky band on top, a sloped horizon with ground below, and
/// one to four elliptical blobs, at least one of each blob class when two or
/// more are drawn.
pub(crate) fn draw_layout<R: Rng>(size: usize, rng: &mut R) -> Array2<u8> {
    let s = size as f64;
    let sky = rng.random_range(0.15 * s..0.30 * s);
    let horizon = rng.random_range(0.62 * s..0.75 * s);
    let slope = rng.random_range(-0.15..0.15);
    let mut labels = Array2::from_shape_fn((size, size), |(y, x)| {
        let (y, x) = (y as f64 + 0.5, x as f64 + 0.5);
        if y < sky {
            SKY
        } else if y >= horizon + slope * (x - s / 2.0) {
            GROUND
        } else {
            0
        }
    });
    let n = rng.random_range(1..=4usize);
    let first = if rng.random_bool(0.5) { BLOB1 } else { BLOB2 };
    for i in 0..n {
        let class = if i % 2 == 0 { first } else { BLOB1 + BLOB2 - first };
        let ry = rng.random_range(0.07 * s..0.15 * s);
        let rx = rng.random_range(0.07 * s..0.17 * s);
        let cy = rng.random_range(sky..horizon);
        let cx = rng.random_range(rx..s - rx);
        for ((y, x), l) in labels.indexed_iter_mut() {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                *l = class;
            }
        }
    }
    labels
}

fn render<R: Rng>(labels: &Array2<u8>, palette: &Palette, noise: f64, rng: &mut R) -> Result<Image> {
    let (h, w) = labels.dim();
    let gain: f64 = rng.random_range(0.9..1.1);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = Array3::zeros((3, h, w));
    for ((y, x), &l) in labels.indexed_iter() {
        let color = palette.0[l as usize];
        for c in 0..3 {
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            let v = (color[c] as f64 * gain + n).round().clamp(0.0, 255.0);
            data[[c, y, x]] = (v / 127.5 - 1.0) as f32;
        }
    }
    Image::new(data)
}

/// The train/val/test datasets of one generated domain.
#[derive(Debug, Clone)]
pub struct ToySplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn toy_taxonomy() -> ClassTaxonomy {
    ClassTaxonomy::identity(&TOY_CLASSES).expect("toy class names are valid")
}

/// Writes `<out>/{A,B}/{train,val,test}/{images,masks}/*.png`, a
/// `taxonomy.csv` and a `manifest.txt`.
pub fn generate_toy_domains(cfg: &ToyWorldCfg, out: &Path, force: bool) -> Result<(ToySplits, ToySplits)> {
    cfg.validate()?;
    let non_empty = out
        .read_dir()
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if non_empty && !force {
        return Err(Error::invalid(format!(
            "{} exists and is not empty (pass force to overwrite)",
            out.display()
        )));
    }
    for d in [Domain::A, Domain::B] {
        let dir = out.join(d.as_str());
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let counts = [cfg.counts.0, cfg.counts.1, cfg.counts.2];
    for (di, domain) in [Domain::A, Domain::B].into_iter().enumerate() {
        let palette = cfg.effective_palette(domain);
        let noise = if domain == Domain::A { cfg.noise_a } else { cfg.noise_b };
        for (si, split) in SPLITS.iter().enumerate() {
            let root = out.join(domain.as_str()).join(split);
            for sub in ["images", "masks"] {
                let d = root.join(sub);
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((di * SPLITS.len() + si) as u64);
            for i in 0..counts[si] {
                let labels = draw_layout(cfg.size, &mut rng);
                let image = render(&labels, &palette, noise, &mut rng)?;
                let stem = format!("{i:05}");
                write_image(&root.join("images").join(format!("{stem}.png")), &image)?;
                write_mask(&root.join("masks").join(format!("{stem}.png")), &labels)?;
            }
        }
    }
    let tax = toy_taxonomy();
    tax.save(&out.join("taxonomy.csv"))?;
    let manifest = out.join("manifest.txt");
    std::fs::write(&manifest, cfg.manifest()).map_err(|e| Error::io(&manifest, e))?;
    toy_splits(out).map(|[a, b]| (a, b))
}

/// Opens the splits of a previously generated toy world.
pub fn toy_splits(out: &Path) -> Result<[ToySplits; 2]> {
    let tax = ClassTaxonomy::load(&out.join("taxonomy.csv"))?;
    let open = |d: Domain| -> Result<ToySplits> {
        let root = out.join(d.as_str());
        Ok(ToySplits {
            train: load_dataset(&root.join("train"), &tax, d)?,
            val: load_dataset(&root.join("val"), &tax, d)?,
            test: load_dataset(&root.join("test"), &tax, d)?,
        })
    };
    Ok([open(Domain::A)?, open(Domain::B)?])
}
