//! Shared class taxonomy and per-dataset raw-label remapping.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{SegMask, IGNORE};

/// The 19 classes common to the road-scene datasets, in training-id order.
pub const ROAD_SCENE_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    names: Vec<String>,
    /// raw label -> class id or IGNORE
    remap: BTreeMap<u8, u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    raw_label: u8,
    mapped_label: u8,
    name: String,
}

impl ClassTaxonomy {
    pub fn new(names: Vec<String>, remap: BTreeMap<u8, u8>) -> Result<Self> {
        let k = names.len();
        if k < 2 {
            return Err(Error::Taxonomy(format!("need at least 2 classes, got {k}")));
        }
        if k >= IGNORE as usize {
            return Err(Error::Taxonomy(format!("too many classes: {k}")));
        }
        for (&raw, &mapped) in &remap {
            if mapped != IGNORE && mapped as usize >= k {
                return Err(Error::Taxonomy(format!(
                    "raw label {raw} maps to {mapped}, outside 0..{k}"
                )));
            }
        }
        Ok(ClassTaxonomy { names, remap })
    }

    /// Raw labels are already class ids; 255 stays IGNORE.
    pub fn identity(names: &[&str]) -> Result<Self> {
        let mut remap: BTreeMap<u8, u8> = (0..names.len() as u8).map(|i| (i, i)).collect();
        remap.insert(IGNORE, IGNORE);
        ClassTaxonomy::new(names.iter().map(|s| s.to_string()).collect(), remap)
    }

    pub fn road_scenes() -> Self {
        ClassTaxonomy::identity(&ROAD_SCENE_CLASSES).expect("static taxonomy is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn map_label(&self, raw: u8) -> Option<u8> {
        self.remap.get(&raw).copied()
    }

    pub fn remap_mask(&self, raw: &Array2<u8>) -> Result<SegMask> {
        let mut out = Array2::from_elem(raw.dim(), IGNORE);
        for (dst, &r) in out.iter_mut().zip(raw.iter()) {
            *dst = self
                .map_label(r)
                .ok_or_else(|| Error::Taxonomy(format!("raw label {r} has no remap row")))?;
        }
        SegMask::new(out, self.num_classes())
    }

    /// Same classes in the same order; remaps may differ per dataset.
    pub fn compatible_with(&self, other: &ClassTaxonomy) -> bool {
        self.names == other.names
    }

    /// Reads a `raw_label,mapped_label,name` CSV. Class names come from the
    /// non-IGNORE rows; every id in `0..K` must be named.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut remap = BTreeMap::new();
        let mut names: BTreeMap<u8, String> = BTreeMap::new();
        for (line, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Taxonomy(format!("row {}: {e}", line + 1)))?;
            if remap.insert(row.raw_label, row.mapped_label).is_some() {
                return Err(Error::Taxonomy(format!(
                    "raw label {} listed twice",
                    row.raw_label
                )));
            }
            if row.mapped_label == IGNORE {
                continue;
            }
            match names.get(&row.mapped_label) {
                Some(existing) if existing != &row.name => {
                    return Err(Error::Taxonomy(format!(
                        "class {} named both `{existing}` and `{}`",
                        row.mapped_label, row.name
                    )))
                }
                _ => {
                    names.insert(row.mapped_label, row.name);
                }
            }
        }
        let k = names.len();
        if names.keys().enumerate().any(|(i, &id)| i != id as usize) {
            return Err(Error::Taxonomy(format!(
                "mapped labels must cover 0..{k} without gaps"
            )));
        }
        ClassTaxonomy::new(names.into_values().collect(), remap)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ClassTaxonomy::from_csv_reader(file)
            .map_err(|e| Error::Taxonomy(format!("{}: {e}", path.display())))
    }

    pub fn to_csv_string(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for (&raw, &mapped) in &self.remap {
            let name = if mapped == IGNORE {
                "ignore".to_string()
            } else {
                self.names[mapped as usize].clone()
            };
            wtr.serialize(Row {
                raw_label: raw,
                mapped_label: mapped,
                name,
            })
            .expect("writing to memory");
        }
        String::from_utf8(wtr.into_inner().expect("writing to memory")).expect("utf8 csv")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}
