//! Standalone supervised training of a segmenter on one domain, used for the
//! frozen evaluation segmenters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Batch};
use crate::checkpoint::Checkpoint;
use crate::data::{augment, AugmentMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_translation, Evaluator, MetricsReport};
use crate::losses::seg_consistency_loss;
use crate::models::{IdentityTranslator, Segmenter, SegmenterCfg};
use crate::taxonomy::ClassTaxonomy;
use crate::types::LabeledSample;

pub const SEGMENTER_KIND: &str = "semgan-segmenter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop: usize,
    pub flip: bool,
    pub seed: u64,
    pub segmenter: SegmenterCfg,
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("segmenter epochs and batch size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        crate::types::check_spatial(self.crop, self.crop).map_err(|e| Error::Config(e.to_string()))?;
        self.segmenter.validate()
    }
}

/// Trains with pixel cross-entropy against ground truth. Returns the network
/// and its report on `val` (center crops), when `val` is non-empty.
pub fn train_segmenter(
    cfg: &SegTrainConfig,
    train: &[LabeledSample],
    val: &[LabeledSample],
    taxonomy: &ClassTaxonomy,
) -> Result<(Segmenter, Option<MetricsReport>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("segmenter training set is empty".into()));
    }
    if cfg.segmenter.num_classes != taxonomy.num_classes() {
        return Err(Error::Taxonomy(format!(
            "segmenter has {} classes, taxonomy has {}",
            cfg.segmenter.num_classes,
            taxonomy.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seg = Segmenter::new(cfg.segmenter, &mut rng)?;
    fit(&seg, cfg, train, &mut rng)?;
    let report = if val.is_empty() {
        None
    } else {
        Some(segmentation_report(&seg, val, cfg.crop, taxonomy)?)
    };
    Ok((seg, report))
}

/// Supervised training of `seg` in place; `cfg.segmenter` and `cfg.seed` are
/// not used.
pub(crate) fn fit<R: Rng + ?Sized>(seg: &Segmenter, cfg: &SegTrainConfig, train: &[LabeledSample], rng: &mut R) -> Result<()> {
    let vars = seg.params().trainable().map(|p| p.var.clone()).collect();
    let mut opt = Adam::new(vars, cfg.lr, 0.9, 0.999)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| augment(&train[i], AugmentMode::Train, cfg.crop, cfg.flip, rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::new(&samples)?;
            let masks: Vec<_> = batch.masks.iter().collect();
            let loss = seg_consistency_loss(&seg.forward(&batch.images, true)?, &masks, None)?.value;
            total += crate::losses::scalar(&loss)?;
            opt.step(&loss.backward()?)?;
        }
        log::debug!(
            "segmenter epoch {}: mean loss {:.4}",
            epoch + 1,
            total / order.len().div_ceil(cfg.batch_size) as f64
        );
    }
    Ok(())
}

/// Metrics of a segmenter on center crops of `samples`.
pub(crate) fn segmentation_report(
    seg: &Segmenter,
    samples: &[LabeledSample],
    crop: usize,
    taxonomy: &ClassTaxonomy,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let crops = samples
        .iter()
        .map(|s| augment(s, AugmentMode::Eval, crop, false, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    evaluate_translation(&IdentityTranslator, &Evaluator::Network(seg), crops, taxonomy)
}

pub fn save_segmenter(path: &Path, seg: &Segmenter, taxonomy: &ClassTaxonomy) -> Result<()> {
    let meta = serde_json::json!({
        "segmenter": seg.cfg(),
        "classes": taxonomy.names(),
    });
    let mut ck = Checkpoint::new(SEGMENTER_KIND, meta);
    ck.insert_store("s", seg.params())?;
    ck.save(path)
}

/// Loads a segmenter and the class names it was trained with.
pub fn load_segmenter(path: &Path) -> Result<(Segmenter, Vec<String>)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(SEGMENTER_KIND)?;
    let cfg: SegmenterCfg = serde_json::from_value(ck.meta["segmenter"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad segmenter metadata: {e}")))?;
    let names: Vec<String> = serde_json::from_value(ck.meta["classes"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad class list: {e}")))?;
    let seg = Segmenter::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_store("s", seg.params())?;
    Ok((seg, names))
}
