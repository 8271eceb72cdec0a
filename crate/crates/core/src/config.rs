//! Flat `key = value` run configuration with `#` comments. Every key is
//! optional; unknown or repeated keys are errors. A `preset` key picks the
//! model-size defaults the other keys then override, and a `variant` key
//! applies one of the ablation overlays last.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::AdvMode;
use crate::models::{DiscriminatorCfg, GeneratorCfg, SegmenterCfg, SegmenterPreset};
use crate::taxonomy::ClassTaxonomy;
use crate::train::{SegReference, TrainConfig, TrainData, WarmupPolicy};
use crate::types::Domain;

/// Ablation overlays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Cycle-consistent translation only: no segmentation term, no dropout.
    Cycle,
    /// Adds the segmentation-consistency term.
    Seg,
    /// Segmentation consistency plus semantic dropout.
    SegSm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cycle, Variant::Seg, Variant::SegSm];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cycle => "cycle",
            Variant::Seg => "seg",
            Variant::SegSm => "seg_sm",
        }
    }

    /// Overlays the variant on a configuration whose `lambda_seg` and
    /// dropout probability hold the values to use when enabled.
    pub fn apply(self, cfg: &mut TrainConfig) -> Result<()> {
        match self {
            Variant::Cycle => {
                cfg.weights.lambda_seg = 0.0;
                cfg.dropout.p = 0.0;
            }
            Variant::Seg | Variant::SegSm => {
                if cfg.weights.lambda_seg <= 0.0 {
                    return Err(Error::Config(format!("variant {} needs lambda_seg > 0", self.as_str())));
                }
                if self == Variant::Seg {
                    cfg.dropout.p = 0.0;
                } else if cfg.dropout.p <= 0.0 {
                    return Err(Error::Config("variant seg_sm needs dropout_p > 0".into()));
                }
            }
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycle" => Ok(Variant::Cycle),
            "seg" => Ok(Variant::Seg),
            "seg_sm" => Ok(Variant::SegSm),
            other => Err(Error::Config(format!("unknown variant `{other}` (cycle, seg, seg_sm)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Either `<root>/{A,B}/{train,val,test}` or unsplit `<root>/{A,B}`.
    pub data_root: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Defaults to `<data_root>/taxonomy.csv`.
    pub taxonomy: Option<PathBuf>,
    pub resize: Option<(usize, usize)>,
    pub split_seed: u64,
    pub variant: Option<Variant>,
    /// Frozen evaluation segmenters for domains A and B.
    pub eval_segmenter_a: Option<PathBuf>,
    pub eval_segmenter_b: Option<PathBuf>,
    /// Epochs for training evaluation segmenters when none are given.
    pub eval_segmenter_epochs: usize,
    /// `num_classes` of the segmenter is taken from the taxonomy at load time.
    pub train: TrainConfig,
}

const KEYS: &[&str] = &[
    "preset", "data_root", "run_dir", "taxonomy", "resize", "split_seed", "variant",
    "eval_segmenter_a", "eval_segmenter_b", "eval_segmenter_epochs", "epochs", "batch_size", "lr",
    "beta1", "beta2", "lambda_cycle", "lambda_seg", "lambda_idt", "adv_mode", "dropout_p",
    "dropout_seed", "warmup", "seg_joint", "seg_pretrain_epochs", "seg_reference", "pool_size",
    "seed", "crop", "flip", "gen_res_blocks", "gen_width", "disc_layers", "disc_width",
    "disc_res_blocks", "seg_preset", "seg_width", "checkpoint_every", "max_steps", "sample_images",
];

/// Model sizes and schedule of the `desk` preset: small enough to train the
/// toy world on a CPU.
fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 4,
        crop: 32,
        pool_size: 50,
        generator: GeneratorCfg {
            n_res_blocks: 3,
            base_width: 8,
        },
        discriminator: DiscriminatorCfg {
            n_layers: 2,
            base_width: 16,
            residual_blocks: 0,
        },
        // the class count is replaced by the taxonomy's at load time
        segmenter: SegmenterCfg {
            base_width: 8,
            ..SegmenterCfg::desk(TrainConfig::default().segmenter.num_classes)
        },
        warmup: WarmupPolicy::SegValAccThreshold(0.70),
        seg_pretrain_epochs: 10,
        ..Default::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: None,
            run_dir: None,
            taxonomy: None,
            resize: None,
            split_seed: 0,
            variant: None,
            eval_segmenter_a: None,
            eval_segmenter_b: None,
            eval_segmenter_epochs: 20,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn parse_size(key: &str, v: &str) -> Result<Option<(usize, usize)>> {
    if v == "none" {
        return Ok(None);
    }
    let (h, w) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("`{key}` must be HxW or none, got `{v}`")))?;
    Ok(Some((parse(key, h)?, parse(key, w)?)))
}

fn parse_warmup(v: &str) -> Result<WarmupPolicy> {
    match v.split_once(':') {
        Some(("epochs", n)) => Ok(WarmupPolicy::FixedEpochs(parse("warmup", n)?)),
        Some(("threshold", t)) => Ok(WarmupPolicy::SegValAccThreshold(parse("warmup", t)?)),
        _ => Err(Error::Config(format!(
            "`warmup` must be epochs:N or threshold:T, got `{v}`"
        ))),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: key `{k}` given twice", n + 1)));
            }
        }
        Self::from_map(&kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = RunConfig::default();
        match kv.get("preset").map(String::as_str) {
            None | Some("full") => {}
            Some("desk") => c.train = desk_train_config(),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}` (full, desk)"))),
        }
        let t = &mut c.train;
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                "preset" => {}
                "data_root" => c.data_root = parse_path(v),
                "run_dir" => c.run_dir = parse_path(v),
                "taxonomy" => c.taxonomy = parse_path(v),
                "resize" => c.resize = parse_size(k, v)?,
                "split_seed" => c.split_seed = parse(k, v)?,
                "variant" => c.variant = if v == "none" { None } else { Some(v.parse()?) },
                "eval_segmenter_a" => c.eval_segmenter_a = parse_path(v),
                "eval_segmenter_b" => c.eval_segmenter_b = parse_path(v),
                "eval_segmenter_epochs" => c.eval_segmenter_epochs = parse(k, v)?,
                "epochs" => t.epochs = parse(k, v)?,
                "batch_size" => t.batch_size = parse(k, v)?,
                "lr" => t.lr = parse(k, v)?,
                "beta1" => t.beta1 = parse(k, v)?,
                "beta2" => t.beta2 = parse(k, v)?,
                "lambda_cycle" => t.weights.lambda_cycle = parse(k, v)?,
                "lambda_seg" => t.weights.lambda_seg = parse(k, v)?,
                "lambda_idt" => t.weights.lambda_idt = parse(k, v)?,
                "adv_mode" => t.weights.adv_mode = parse::<AdvMode>(k, v)?,
                "dropout_p" => t.dropout.p = parse(k, v)?,
                "dropout_seed" => t.dropout.rng_seed = parse(k, v)?,
                "warmup" => t.warmup = parse_warmup(v)?,
                "seg_joint" => t.seg_joint = parse_bool(k, v)?,
                "seg_pretrain_epochs" => t.seg_pretrain_epochs = parse(k, v)?,
                "seg_reference" => {
                    t.seg_reference = match v {
                        "gt" => SegReference::Gt,
                        "pseudo" => SegReference::Pseudo,
                        _ => return Err(Error::Config(format!("`seg_reference` must be gt or pseudo, got `{v}`"))),
                    }
                }
                "pool_size" => t.pool_size = parse(k, v)?,
                "seed" => t.seed = parse(k, v)?,
                "crop" => t.crop = parse(k, v)?,
                "flip" => t.flip = parse_bool(k, v)?,
                "gen_res_blocks" => t.generator.n_res_blocks = parse(k, v)?,
                "gen_width" => t.generator.base_width = parse(k, v)?,
                "disc_layers" => t.discriminator.n_layers = parse(k, v)?,
                "disc_width" => t.discriminator.base_width = parse(k, v)?,
                "disc_res_blocks" => t.discriminator.residual_blocks = parse(k, v)?,
                "seg_preset" => t.segmenter.preset = parse::<SegmenterPreset>(k, v)?,
                "seg_width" => t.segmenter.base_width = parse(k, v)?,
                "checkpoint_every" => t.checkpoint_every = parse(k, v)?,
                "max_steps" => t.max_steps = parse(k, v)?,
                "sample_images" => t.sample_images = parse(k, v)?,
                _ => unreachable!("keys are checked against KEYS"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved(self.train.segmenter.num_classes).map(|_| ())
    }

    /// The training configuration with the variant overlay applied and the
    /// segmenter sized for `num_classes`.
    pub fn resolved(&self, num_classes: usize) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.segmenter.num_classes = num_classes;
        if let Some(v) = self.variant {
            v.apply(&mut t)?;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::Config("`data_root` is not set".into()))
    }

    pub fn load_taxonomy(&self) -> Result<ClassTaxonomy> {
        let path = match &self.taxonomy {
            Some(p) => p.clone(),
            None => self.data_root()?.join("taxonomy.csv"),
        };
        ClassTaxonomy::load(&path)
    }

    /// Opens the train/val/test splits of both domains.
    pub fn datasets(&self, taxonomy: &ClassTaxonomy) -> Result<[[Dataset; 3]; 2]> {
        let root = self.data_root()?;
        let open = |d: Domain| -> Result<[Dataset; 3]> {
            let dir = root.join(d.as_str());
            let resize = |ds: Dataset| match self.resize {
                Some((h, w)) => ds.with_resize(h, w),
                None => ds,
            };
            if dir.join("train").is_dir() {
                let one = |s: &str| load_dataset(&dir.join(s), taxonomy, d).map(resize);
                Ok([one("train")?, one("val")?, one("test")?])
            } else {
                let all = resize(load_dataset(&dir, taxonomy, d)?);
                let (tr, va, te) = split_dataset(&all, (0.85, 0.05, 0.10), self.split_seed)?;
                Ok([tr, va, te])
            }
        };
        Ok([open(Domain::A)?, open(Domain::B)?])
    }

    pub fn load_data(&self) -> Result<TrainData> {
        let taxonomy = self.load_taxonomy()?;
        let [[tra, vaa, tea], [trb, vab, teb]] = self.datasets(&taxonomy)?;
        Ok(TrainData {
            train_a: tra.load_all()?,
            train_b: trb.load_all()?,
            val_a: vaa.load_all()?,
            val_b: vab.load_all()?,
            test_a: tea.load_all()?,
            test_b: teb.load_all()?,
            taxonomy,
        })
    }

    /// Every key, in a form [`RunConfig::parse_str`] reads back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data_root", path(&self.data_root));
        kv("run_dir", path(&self.run_dir));
        kv("taxonomy", path(&self.taxonomy));
        kv("resize", self.resize.map_or("none".into(), |(h, w)| format!("{h}x{w}")));
        kv("split_seed", self.split_seed.to_string());
        kv("variant", self.variant.map_or("none".into(), |v| v.to_string()));
        kv("eval_segmenter_a", path(&self.eval_segmenter_a));
        kv("eval_segmenter_b", path(&self.eval_segmenter_b));
        kv("eval_segmenter_epochs", self.eval_segmenter_epochs.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("lambda_cycle", t.weights.lambda_cycle.to_string());
        kv("lambda_seg", t.weights.lambda_seg.to_string());
        kv("lambda_idt", t.weights.lambda_idt.to_string());
        kv("adv_mode", t.weights.adv_mode.to_string());
        kv("dropout_p", t.dropout.p.to_string());
        kv("dropout_seed", t.dropout.rng_seed.to_string());
        kv(
            "warmup",
            match t.warmup {
                WarmupPolicy::FixedEpochs(n) => format!("epochs:{n}"),
                WarmupPolicy::SegValAccThreshold(x) => format!("threshold:{x}"),
            },
        );
        kv("seg_joint", t.seg_joint.to_string());
        kv("seg_pretrain_epochs", t.seg_pretrain_epochs.to_string());
        kv(
            "seg_reference",
            match t.seg_reference {
                SegReference::Gt => "gt".into(),
                SegReference::Pseudo => "pseudo".into(),
            },
        );
        kv("pool_size", t.pool_size.to_string());
        kv("seed", t.seed.to_string());
        kv("crop", t.crop.to_string());
        kv("flip", t.flip.to_string());
        kv("gen_res_blocks", t.generator.n_res_blocks.to_string());
        kv("gen_width", t.generator.base_width.to_string());
        kv("disc_layers", t.discriminator.n_layers.to_string());
        kv("disc_width", t.discriminator.base_width.to_string());
        kv("disc_res_blocks", t.discriminator.residual_blocks.to_string());
        kv(
            "seg_preset",
            match t.segmenter.preset {
                SegmenterPreset::Full => "full".into(),
                SegmenterPreset::Desk => "desk".into(),
            },
        );
        kv("seg_width", t.segmenter.base_width.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("max_steps", t.max_steps.to_string());
        kv("sample_images", t.sample_images.to_string());
        s
    }
}
