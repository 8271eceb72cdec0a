//! Joint optimization of the two generators, two discriminators and two
//! segmenters, plus the run loop that checkpoints, logs and evaluates.

mod adam;
mod pool;
mod run;
mod segmenter;
mod state;

pub use adam::Adam;
pub use pool::ImagePool;
pub use run::{latest_checkpoint, train, TrainData, TrainSummary, LOSSES_CSV, SEG_PRETRAIN_LR};
pub use segmenter::{load_segmenter, save_segmenter, train_segmenter, SegTrainConfig, SEGMENTER_KIND};
pub use state::{
    generator_gradients, segmenter_objective, training_step, Batch, SegObjective, StepOutcome, TrainState,
    TRAIN_KIND,
};

use serde::{Deserialize, Serialize};

use crate::dropout::DropoutConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{DiscriminatorCfg, GeneratorCfg, SegmenterCfg};

/// When segmenters may start learning from translated images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupPolicy {
    /// Warmup lasts for the first `N` epochs.
    FixedEpochs(usize),
    /// Warmup lasts until both segmenters reach this validation pixel
    /// accuracy (a fraction), then ends for good.
    SegValAccThreshold(f64),
}

impl WarmupPolicy {
    /// `epoch` is 0-based; `ended` is the threshold latch.
    pub fn active(&self, epoch: usize, ended: bool) -> bool {
        match *self {
            WarmupPolicy::FixedEpochs(n) => epoch < n,
            WarmupPolicy::SegValAccThreshold(_) => !ended,
        }
    }

    /// New latch value after observing validation accuracies of (S_A, S_B).
    pub fn update_latch(&self, ended: bool, accs: (f64, f64)) -> bool {
        match *self {
            WarmupPolicy::FixedEpochs(_) => ended,
            WarmupPolicy::SegValAccThreshold(tau) => ended || (accs.0 >= tau && accs.1 >= tau),
        }
    }
}

/// Which labels the consistency term compares translated images against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegReference {
    /// The source image's ground-truth mask.
    Gt,
    /// The source-domain segmenter's prediction on the source image.
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub dropout: DropoutConfig,
    pub warmup: WarmupPolicy,
    /// After warmup, also train segmenters on translated images.
    pub seg_joint: bool,
    /// Supervised epochs on real images and ground truth for both segmenters
    /// before adversarial training starts.
    #[serde(default)]
    pub seg_pretrain_epochs: usize,
    pub seg_reference: SegReference,
    pub pool_size: usize,
    pub seed: u64,
    pub crop: usize,
    pub flip: bool,
    pub generator: GeneratorCfg,
    pub discriminator: DiscriminatorCfg,
    pub segmenter: SegmenterCfg,
    pub checkpoint_every: usize,
    /// Stop after this many steps; 0 means no limit.
    pub max_steps: u64,
    /// Number of validation images per direction in sample grids.
    pub sample_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            dropout: DropoutConfig { p: 0.2, rng_seed: 0 },
            warmup: WarmupPolicy::SegValAccThreshold(0.70),
            seg_joint: false,
            seg_pretrain_epochs: 5,
            seg_reference: SegReference::Gt,
            pool_size: 50,
            seed: 0,
            crop: 256,
            flip: true,
            generator: GeneratorCfg::default(),
            discriminator: DiscriminatorCfg::default(),
            segmenter: SegmenterCfg::full(19),
            checkpoint_every: 1,
            max_steps: 0,
            sample_images: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if let WarmupPolicy::SegValAccThreshold(t) = self.warmup {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("warmup threshold must lie in [0, 1], got {t}"));
            }
        }
        if self.crop == 0 || self.crop % crate::types::SPATIAL_MULTIPLE != 0 {
            return bad(format!("crop {} must be a positive multiple of 4", self.crop));
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if self.discriminator.output_size(self.crop, self.crop).is_none() {
            return bad(format!("crop {} is too small for the discriminator", self.crop));
        }
        self.weights.validate()?;
        self.dropout.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.segmenter.validate()
    }

    /// Multiplier on the base learning rate for a 0-based epoch: constant for
    /// the first half, then linear decay towards zero.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let constant = self.epochs.div_ceil(2);
        let decay = self.epochs - constant;
        if epoch < constant {
            1.0
        } else {
            1.0 - (epoch - constant + 1) as f64 / (decay + 1) as f64
        }
    }
}
