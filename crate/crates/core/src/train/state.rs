use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, ImagePool, SegReference, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, cycle_loss, identity_loss, pseudo_labels, scalar,
    seg_consistency_loss, total_generator_loss, GeneratorTerms, LossRecord,
};
use crate::models::{images_to_tensor, Discriminator, Generator, Segmenter};
use crate::nn::ParamStore;
use crate::types::{Direction, LabeledSample, SegMask};

pub const TRAIN_KIND: &str = "semgan-train";

/// A stacked batch: images `[N, 3, H, W]` and their masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<SegMask>,
}

impl Batch {
    pub fn new(samples: &[LabeledSample]) -> Result<Self> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        Ok(Batch {
            images: images_to_tensor(&images)?,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
        })
    }

    fn mask_refs(&self) -> Vec<&SegMask> {
        self.masks.iter().collect()
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    pub s_a: Segmenter,
    pub s_b: Segmenter,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_s: Adam,
    pub pool_a: ImagePool,
    pub pool_b: ImagePool,
    /// Drives initialization, batch sampling, crops and the image pools.
    pub rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed (non-skipped) steps.
    pub step: u64,
    pub warmup_ended: bool,
    pub seg_val_acc: Option<(f64, f64)>,
    pub best_miou: Option<f64>,
    pub consecutive_skips: usize,
}

fn vars<'a>(stores: impl IntoIterator<Item = &'a ParamStore>) -> Vec<candle_core::Var> {
    stores
        .into_iter()
        .flat_map(|s| s.trainable().map(|p| p.var.clone()).collect::<Vec<_>>())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    warmup_ended: bool,
    seg_val_acc: Option<(f64, f64)>,
    best_miou: Option<f64>,
    rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mode = cfg.weights.adv_mode;
        let g_ab = Generator::new(cfg.generator, &mut rng)?;
        let g_ba = Generator::new(cfg.generator, &mut rng)?;
        let d_a = Discriminator::new(cfg.discriminator, mode, &mut rng)?;
        let d_b = Discriminator::new(cfg.discriminator, mode, &mut rng)?;
        let s_a = Segmenter::new(cfg.segmenter, &mut rng)?;
        let s_b = Segmenter::new(cfg.segmenter, &mut rng)?;
        let adam = |v| Adam::new(v, cfg.lr, cfg.beta1, cfg.beta2);
        Ok(TrainState {
            opt_g: adam(vars([g_ab.params(), g_ba.params()]))?,
            opt_d: adam(vars([d_a.params(), d_b.params()]))?,
            opt_s: adam(vars([s_a.params(), s_b.params()]))?,
            g_ab,
            g_ba,
            d_a,
            d_b,
            s_a,
            s_b,
            pool_a: ImagePool::new(cfg.pool_size),
            pool_b: ImagePool::new(cfg.pool_size),
            rng,
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.dropout.rng_seed),
            epoch: 0,
            step: 0,
            warmup_ended: false,
            seg_val_acc: None,
            best_miou: None,
            consecutive_skips: 0,
        })
    }

    fn stores(&self) -> [(&'static str, &ParamStore); 6] {
        [
            ("g_ab", self.g_ab.params()),
            ("g_ba", self.g_ba.params()),
            ("d_a", self.d_a.params()),
            ("d_b", self.d_b.params()),
            ("s_a", self.s_a.params()),
            ("s_b", self.s_b.params()),
        ]
    }

    pub fn warmup_active(&self, cfg: &TrainConfig) -> bool {
        cfg.warmup.active(self.epoch, self.warmup_ended)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.lr = lr;
        self.opt_d.lr = lr;
        self.opt_s.lr = lr;
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let meta = Meta {
            config: cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            warmup_ended: self.warmup_ended,
            seg_val_acc: self.seg_val_acc,
            best_miou: self.best_miou,
            rng: self.rng.clone(),
            dropout_rng: self.dropout_rng.clone(),
        };
        let mut ck = Checkpoint::new(TRAIN_KIND, serde_json::to_value(meta)?);
        for (name, store) in self.stores() {
            ck.insert_store(name, store)?;
        }
        self.opt_g.save_into(&mut ck, "opt_g")?;
        self.opt_d.save_into(&mut ck, "opt_d")?;
        self.opt_s.save_into(&mut ck, "opt_s")?;
        self.pool_a.save_into(&mut ck, "pool_a")?;
        self.pool_b.save_into(&mut ck, "pool_b")?;
        ck.save(path)
    }

    /// The configuration stored in a training checkpoint.
    pub fn stored_config(ck: &Checkpoint) -> Result<TrainConfig> {
        ck.expect_kind(TRAIN_KIND)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad training metadata: {e}")))?;
        Ok(meta.config)
    }

    /// Restores a full training state; `cfg` must equal the stored one.
    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(TRAIN_KIND)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad training metadata: {e}")))?;
        if &meta.config != cfg {
            return Err(Error::Config(format!(
                "{} was written with a different configuration",
                path.display()
            )));
        }
        let mut state = TrainState::new(cfg)?;
        for (name, store) in state.stores() {
            ck.load_store(name, store)?;
        }
        state.opt_g.load_from(&ck, "opt_g")?;
        state.opt_d.load_from(&ck, "opt_d")?;
        state.opt_s.load_from(&ck, "opt_s")?;
        state.pool_a.load_from(&ck, "pool_a")?;
        state.pool_b.load_from(&ck, "pool_b")?;
        state.rng = meta.rng;
        state.dropout_rng = meta.dropout_rng;
        state.epoch = meta.epoch;
        state.step = meta.step;
        state.warmup_ended = meta.warmup_ended;
        state.seg_val_acc = meta.seg_val_acc;
        state.best_miou = meta.best_miou;
        Ok(state)
    }

    /// Loads one generator of a training checkpoint without the rest of
    /// the state.
    pub fn load_generator(path: &Path, direction: Direction) -> Result<(Generator, TrainConfig)> {
        let ck = Checkpoint::load(path)?;
        let cfg = Self::stored_config(&ck)?;
        let g = Generator::new(cfg.generator, &mut ChaCha8Rng::seed_from_u64(0))?;
        let prefix = match direction {
            Direction::AB => "g_ab",
            Direction::BA => "g_ba",
        };
        ck.load_store(prefix, g.params())?;
        Ok((g, cfg))
    }

    fn snapshot(&self) -> Result<Snapshot> {
        Ok(Snapshot {
            params: self
                .stores()
                .iter()
                .map(|(_, s)| s.snapshot())
                .collect::<Result<_>>()?,
            opts: [self.opt_g.clone(), self.opt_d.clone(), self.opt_s.clone()],
            pools: [self.pool_a.clone(), self.pool_b.clone()],
            rng: self.rng.clone(),
        })
    }

    fn restore(&mut self, snap: Snapshot) -> Result<()> {
        for ((_, store), saved) in self.stores().iter().zip(&snap.params) {
            store.restore(saved)?;
        }
        let [g, d, s] = snap.opts;
        (self.opt_g, self.opt_d, self.opt_s) = (g, d, s);
        let [a, b] = snap.pools;
        (self.pool_a, self.pool_b) = (a, b);
        self.rng = snap.rng;
        Ok(())
    }
}

struct Snapshot {
    params: Vec<Vec<Tensor>>,
    opts: [Adam; 3],
    pools: [ImagePool; 2],
    rng: ChaCha8Rng,
}

fn zero() -> Result<Tensor> {
    Ok(Tensor::zeros((), DType::F32, &Device::Cpu)?)
}

struct GeneratorPass {
    terms: GeneratorTerms,
    objective: Tensor,
    fake_a: Tensor,
    fake_b: Tensor,
}

/// Forward pass of every generator path and the weighted objective.
/// Discriminators and segmenters act as fixed critics here; segmenters use
/// their running batch-norm statistics.
fn generator_pass(state: &TrainState, a: &Batch, b: &Batch, cfg: &TrainConfig) -> Result<GeneratorPass> {
    let w = &cfg.weights;
    let (xa, xb) = (&a.images, &b.images);
    let fake_b = state.g_ab.forward(xa)?;
    let rec_a = state.g_ba.forward(&fake_b)?;
    let fake_a = state.g_ba.forward(xb)?;
    let rec_b = state.g_ab.forward(&fake_a)?;
    let adv_ab = adversarial_g_loss(&state.d_b.forward(&fake_b)?, w.adv_mode)?;
    let adv_ba = adversarial_g_loss(&state.d_a.forward(&fake_a)?, w.adv_mode)?;
    let cycle = (cycle_loss(xa, &rec_a)? + cycle_loss(xb, &rec_b)?)?;
    let identity = if w.lambda_idt > 0.0 {
        (identity_loss(xb, &state.g_ab.forward(xb)?)? + identity_loss(xa, &state.g_ba.forward(xa)?)?)?
    } else {
        zero()?
    };
    let (seg_ab, seg_ba) = if w.lambda_seg > 0.0 {
        let reference = |s: &Segmenter, batch: &Batch| -> Result<Vec<SegMask>> {
            match cfg.seg_reference {
                SegReference::Gt => Ok(batch.masks.clone()),
                SegReference::Pseudo => pseudo_labels(&s.forward(&batch.images, false)?),
            }
        };
        let ref_a = reference(&state.s_a, a)?;
        let ref_b = reference(&state.s_b, b)?;
        let seg_ab = seg_consistency_loss(&state.s_b.forward(&fake_b, false)?, &ref_a.iter().collect::<Vec<_>>(), None)?;
        let seg_ba = seg_consistency_loss(&state.s_a.forward(&fake_a, false)?, &ref_b.iter().collect::<Vec<_>>(), None)?;
        (seg_ab.value, seg_ba.value)
    } else {
        (zero()?, zero()?)
    };
    let terms = GeneratorTerms {
        adv_ab,
        adv_ba,
        cycle,
        identity,
        seg_ab,
        seg_ba,
    };
    let objective = terms.objective(w)?;
    Ok(GeneratorPass {
        terms,
        objective,
        fake_a,
        fake_b,
    })
}

/// Gradients of the generator objective for every trainable generator
/// parameter, named `g_ab.*` / `g_ba.*`. Parameters are not modified.
pub fn generator_gradients(state: &TrainState, a: &Batch, b: &Batch, cfg: &TrainConfig) -> Result<Vec<(String, Tensor)>> {
    let pass = generator_pass(state, a, b, cfg)?;
    let grads = pass.objective.backward()?;
    let mut out = Vec::new();
    for (prefix, g) in [("g_ab", &state.g_ab), ("g_ba", &state.g_ba)] {
        for p in g.params().trainable() {
            let grad = match grads.get(p.var.as_tensor()) {
                Some(t) => t.clone(),
                None => p.var.zeros_like()?,
            };
            out.push((format!("{prefix}.{}", p.name), grad));
        }
    }
    Ok(out)
}

/// The segmenter objective split by input path: `real` only sees real
/// images; `fake` is present only once segmenters may learn from translated
/// images (after warmup, with joint training enabled).
pub struct SegObjective {
    pub real: Tensor,
    pub fake: Option<Tensor>,
}

pub fn segmenter_objective(
    state: &TrainState,
    a: &Batch,
    b: &Batch,
    fake_a: &Tensor,
    fake_b: &Tensor,
    cfg: &TrainConfig,
) -> Result<SegObjective> {
    let ce = |s: &Segmenter, x: &Tensor, masks: &[&SegMask]| -> Result<Tensor> {
        Ok(seg_consistency_loss(&s.forward(x, true)?, masks, None)?.value)
    };
    let real = (ce(&state.s_a, &a.images, &a.mask_refs())? + ce(&state.s_b, &b.images, &b.mask_refs())?)?;
    let fake = if !state.warmup_active(cfg) && cfg.seg_joint {
        // a translated image carries its source's labels
        Some((ce(&state.s_b, fake_b, &a.mask_refs())? + ce(&state.s_a, fake_a, &b.mask_refs())?)?)
    } else {
        None
    };
    Ok(SegObjective { real, fake })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub record: LossRecord,
    /// Name of the non-finite term that caused the step to be rolled back.
    pub skipped: Option<&'static str>,
}

fn finite(term: &'static str, t: &Tensor) -> Result<f64> {
    let v = scalar(t)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, value: v })
    }
}

/// One optimization step: generators, then discriminators on real images
/// against pooled fakes, then segmenters. A non-finite loss rolls every
/// parameter, optimizer, pool and rng back to the pre-step state.
pub fn training_step(state: &mut TrainState, a: &Batch, b: &Batch, cfg: &TrainConfig) -> Result<StepOutcome> {
    let snap = state.snapshot()?;
    match step_inner(state, a, b, cfg) {
        Ok(record) => {
            state.step += 1;
            state.consecutive_skips = 0;
            Ok(StepOutcome { record, skipped: None })
        }
        Err(Error::NonFinite { term, value }) => {
            log::warn!("step {}: non-finite {term} ({value}); step skipped", state.step);
            state.restore(snap)?;
            state.consecutive_skips += 1;
            Ok(StepOutcome {
                record: LossRecord::default(),
                skipped: Some(term),
            })
        }
        Err(e) => {
            state.restore(snap)?;
            Err(e)
        }
    }
}

fn step_inner(state: &mut TrainState, a: &Batch, b: &Batch, cfg: &TrainConfig) -> Result<LossRecord> {
    let mode = cfg.weights.adv_mode;
    let pass = generator_pass(state, a, b, cfg)?;
    let t = &pass.terms;
    let mut rec = LossRecord {
        g_adv_ab: finite("g_adv_ab", &t.adv_ab)?,
        g_adv_ba: finite("g_adv_ba", &t.adv_ba)?,
        cycle: finite("cycle", &t.cycle)?,
        identity: finite("identity", &t.identity)?,
        seg_ab: finite("seg_ab", &t.seg_ab)?,
        seg_ba: finite("seg_ba", &t.seg_ba)?,
        ..Default::default()
    };
    rec.total_g = total_generator_loss(&rec, &cfg.weights)?;
    finite("total_g", &pass.objective)?;
    state.opt_g.step(&pass.objective.backward()?)?;

    let fake_a = pass.fake_a.detach();
    let fake_b = pass.fake_b.detach();
    let pooled_a = state.pool_a.query(&fake_a, &mut state.rng)?;
    let pooled_b = state.pool_b.query(&fake_b, &mut state.rng)?;
    let d_a = adversarial_d_loss(&state.d_a.forward(&a.images)?, &state.d_a.forward(&pooled_a)?, mode)?;
    let d_b = adversarial_d_loss(&state.d_b.forward(&b.images)?, &state.d_b.forward(&pooled_b)?, mode)?;
    rec.d_a = finite("d_a", &d_a)?;
    rec.d_b = finite("d_b", &d_b)?;
    state.opt_d.step(&(d_a + d_b)?.backward()?)?;

    let seg = segmenter_objective(state, a, b, &fake_a, &fake_b, cfg)?;
    let total = match seg.fake {
        Some(f) => (seg.real + f)?,
        None => seg.real,
    };
    finite("segmenter", &total)?;
    state.opt_s.step(&total.backward()?)?;
    Ok(rec)
}

/// Flattened values of every trainable parameter of one network.
#[cfg(test)]
pub(crate) fn flat_params(store: &ParamStore) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for p in store.trainable() {
        out.extend(p.var.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok(out)
}
