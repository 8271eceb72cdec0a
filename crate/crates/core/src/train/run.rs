use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::segmenter::{fit, segmentation_report};
use super::SegTrainConfig;
use super::{training_step, Batch, TrainConfig, TrainState};
use crate::checkpoint::write_atomic;
use crate::data::{augment, sample_unpaired_batch, AugmentMode};
use crate::dropout::apply_semantic_dropout;
use crate::error::{Error, Result};
use crate::eval::{evaluate_translation, Evaluator, MetricsReport};
use crate::losses::LossRecord;
use crate::models::{Generator, Segmenter, Translate};
use crate::taxonomy::ClassTaxonomy;
use crate::types::LabeledSample;

pub const LOSSES_CSV: &str = "losses.csv";
const MAX_CONSECUTIVE_SKIPS: usize = 5;

/// Decoded splits of both domains.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub taxonomy: ClassTaxonomy,
    pub train_a: Vec<LabeledSample>,
    pub train_b: Vec<LabeledSample>,
    pub val_a: Vec<LabeledSample>,
    pub val_b: Vec<LabeledSample>,
    pub test_a: Vec<LabeledSample>,
    pub test_b: Vec<LabeledSample>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub steps: u64,
    pub skipped_steps: usize,
    /// Test-split metrics of each direction, scored by the run's own
    /// target-domain segmenter.
    pub test_ab: Option<MetricsReport>,
    pub test_ba: Option<MetricsReport>,
}

#[derive(Serialize)]
struct EpochReport<'a> {
    epoch: usize,
    step: u64,
    warmup_active: bool,
    seg_val_acc: Option<(f64, f64)>,
    val_ab: &'a MetricsReport,
    val_ba: &'a MetricsReport,
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// The highest-numbered epoch checkpoint of a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join("checkpoints");
    let Ok(rd) = fs::read_dir(&dir) else {
        return Ok(None);
    };
    let mut best: Option<PathBuf> = None;
    for e in rd {
        let p = e.map_err(|e| Error::io(&dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("epoch_") && name.ends_with(".ckpt") && best.as_ref().is_none_or(|b| p > *b) {
            best = Some(p);
        }
    }
    Ok(best)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Keeps the header and the first `rows` data rows.
fn truncate_csv(path: &Path, rows: u64) -> Result<()> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .take(rows as usize + 1)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    if lines.len() as u64 != rows + 1 {
        return Err(Error::Checkpoint(format!(
            "{} holds fewer rows than the checkpoint's {rows} steps",
            path.display()
        )));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn center_crops(samples: &[LabeledSample], crop: usize) -> Result<Vec<LabeledSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    samples
        .iter()
        .map(|s| augment(s, AugmentMode::Eval, crop, false, &mut rng))
        .collect()
}

/// Rows of `[source | translation]` pairs.
fn write_grid(path: &Path, g: &Generator, sources: &[LabeledSample]) -> Result<()> {
    let Some(first) = sources.first() else {
        return Ok(());
    };
    let (h, w) = (first.image.height() as u32, first.image.width() as u32);
    let mut canvas = RgbImage::new(2 * w, h * sources.len() as u32);
    for (row, s) in sources.iter().enumerate() {
        let out = g.translate(&s.image)?;
        for (col, im) in [&s.image, &out].into_iter().enumerate() {
            let rgb = im.to_rgb8();
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                let (y, x) = (i as u32 / w, i as u32 % w);
                canvas.put_pixel(col as u32 * w + x, row as u32 * h + y, image::Rgb([px[0], px[1], px[2]]));
            }
        }
    }
    canvas.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn check_data(cfg: &TrainConfig, data: &TrainData) -> Result<()> {
    let k = data.taxonomy.num_classes();
    if cfg.segmenter.num_classes != k {
        return Err(Error::Taxonomy(format!(
            "segmenters predict {} classes, taxonomy has {k}",
            cfg.segmenter.num_classes
        )));
    }
    if data.train_a.is_empty() || data.train_b.is_empty() {
        return Err(Error::Dataset("both training sets must be non-empty".into()));
    }
    let all = [&data.train_a, &data.train_b, &data.val_a, &data.val_b, &data.test_a, &data.test_b];
    for s in all.into_iter().flatten() {
        if s.mask.num_classes() != k {
            return Err(Error::Taxonomy(format!("sample mask has {} classes, taxonomy has {k}", s.mask.num_classes())));
        }
        if s.image.height() < cfg.crop || s.image.width() < cfg.crop {
            return Err(Error::Config(format!(
                "crop {} exceeds image size {}x{}",
                cfg.crop,
                s.image.height(),
                s.image.width()
            )));
        }
    }
    Ok(())
}

fn translation_reports(
    state: &TrainState,
    a: &[LabeledSample],
    b: &[LabeledSample],
    tax: &ClassTaxonomy,
) -> Result<(MetricsReport, MetricsReport)> {
    let by = |g: &Generator, s: &Segmenter, src: &[LabeledSample]| {
        evaluate_translation(g, &Evaluator::Network(s), src.iter().cloned(), tax)
    };
    Ok((by(&state.g_ab, &state.s_b, a)?, by(&state.g_ba, &state.s_a, b)?))
}

/// Learning rate of the supervised segmenter warm start (and of the
/// standalone evaluation segmenters).
pub const SEG_PRETRAIN_LR: f64 = 3e-3;

/// Warm start of both segmenters on real images and ground truth, with their
/// own optimizers; draws from the state's rng.
fn pretrain_segmenters(state: &mut TrainState, cfg: &TrainConfig, data: &TrainData) -> Result<()> {
    if cfg.seg_pretrain_epochs == 0 {
        return Ok(());
    }
    let sc = SegTrainConfig {
        epochs: cfg.seg_pretrain_epochs,
        batch_size: cfg.batch_size.max(4),
        lr: SEG_PRETRAIN_LR,
        crop: cfg.crop,
        flip: cfg.flip,
        seed: cfg.seed,
        segmenter: cfg.segmenter,
    };
    fit(&state.s_a, &sc, &data.train_a, &mut state.rng)?;
    fit(&state.s_b, &sc, &data.train_b, &mut state.rng)?;
    if !data.val_a.is_empty() && !data.val_b.is_empty() {
        let acc = |s: &Segmenter, v: &[LabeledSample]| -> Result<f64> {
            Ok(segmentation_report(s, v, cfg.crop, &data.taxonomy)?.overall_acc)
        };
        log::info!(
            "segmenters after {} pretraining epochs: val acc {:.1}/{:.1}",
            cfg.seg_pretrain_epochs,
            acc(&state.s_a, &data.val_a)?,
            acc(&state.s_b, &data.val_b)?
        );
    }
    Ok(())
}

/// Runs (or resumes) training into `run_dir`.
///
/// Layout: `config.json`, `losses.csv`, `checkpoints/epoch_NNNN.ckpt` and
/// `best.ckpt`, `eval/epoch_NNNN.json` and `eval/test_{ab,ba}.json`,
/// `samples/epoch_NNNN_{ab,ba}.png`.
pub fn train(cfg: &TrainConfig, data: &TrainData, run_dir: &Path, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let csv_path = run_dir.join(LOSSES_CSV);
    let mut state = if resume {
        let ck = latest_checkpoint(run_dir)?.ok_or_else(|| {
            Error::Config(format!("nothing to resume: {} has no checkpoints", run_dir.display()))
        })?;
        let state = TrainState::load(&ck, cfg)?;
        truncate_csv(&csv_path, state.step)?;
        log::info!("resuming from {} (epoch {}, step {})", ck.display(), state.epoch, state.step);
        state
    } else {
        if csv_path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; resume it or pick another directory",
                run_dir.display()
            )));
        }
        let mut state = TrainState::new(cfg)?;
        pretrain_segmenters(&mut state, cfg, data)?;
        state
    };
    for sub in ["checkpoints", "eval", "samples"] {
        let d = run_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_json(&run_dir.join("config.json"), cfg)?;
    if !resume {
        let header = LossRecord::CSV_HEADER.join(",") + "\n";
        fs::write(&csv_path, header).map_err(|e| Error::io(&csv_path, e))?;
    }
    let csv_file = OpenOptions::new()
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(csv_file);

    let val_a = center_crops(&data.val_a, cfg.crop)?;
    let val_b = center_crops(&data.val_b, cfg.crop)?;
    let steps_per_epoch = data.train_a.len().div_ceil(cfg.batch_size);
    let mut skipped = 0;
    let mut stopped_early = false;

    while state.epoch < cfg.epochs && !stopped_early {
        let epoch = state.epoch;
        state.set_lr(cfg.lr * cfg.lr_factor(epoch));
        for _ in 0..steps_per_epoch {
            if cfg.max_steps > 0 && state.step >= cfg.max_steps {
                stopped_early = true;
                break;
            }
            let (xa, xb) = sample_unpaired_batch(&data.train_a, &data.train_b, cfg.batch_size, &mut state.rng)?;
            let mut ba = Vec::with_capacity(cfg.batch_size);
            let mut bb = Vec::with_capacity(cfg.batch_size);
            for (sa, sb) in xa.into_iter().zip(xb) {
                let sa = augment(sa, AugmentMode::Train, cfg.crop, cfg.flip, &mut state.rng)?;
                let sb = augment(sb, AugmentMode::Train, cfg.crop, cfg.flip, &mut state.rng)?;
                let d = apply_semantic_dropout(&sa, &sb, &cfg.dropout, &mut state.dropout_rng)?;
                ba.push(d.a);
                bb.push(d.b);
            }
            let out = training_step(&mut state, &Batch::new(&ba)?, &Batch::new(&bb)?, cfg)?;
            if let Some(term) = out.skipped {
                skipped += 1;
                if state.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::NonFinite { term, value: f64::NAN });
                }
                continue;
            }
            csv.write_record(out.record.csv_row(state.step - 1))
                .map_err(|e| Error::Dataset(format!("writing {}: {e}", csv_path.display())))?;
            csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        }
        if stopped_early {
            break;
        }
        state.epoch += 1;

        if !val_a.is_empty() && !val_b.is_empty() {
            let acc = |s: &Segmenter, v: &[LabeledSample]| -> Result<f64> {
                Ok(segmentation_report(s, v, cfg.crop, &data.taxonomy)?.overall_acc / 100.0)
            };
            let accs = (acc(&state.s_a, &val_a)?, acc(&state.s_b, &val_b)?);
            state.seg_val_acc = Some(accs);
            state.warmup_ended = cfg.warmup.update_latch(state.warmup_ended, accs);
            let (ab, ba) = translation_reports(&state, &val_a, &val_b, &data.taxonomy)?;
            log::info!(
                "epoch {}: val mIoU ab {:.1} ba {:.1}, segmenter acc {:.3}/{:.3}",
                state.epoch,
                ab.miou,
                ba.miou,
                accs.0,
                accs.1
            );
            write_json(
                &run_dir.join("eval").join(format!("epoch_{:04}.json", state.epoch)),
                &EpochReport {
                    epoch: state.epoch,
                    step: state.step,
                    warmup_active: state.warmup_active(cfg),
                    seg_val_acc: state.seg_val_acc,
                    val_ab: &ab,
                    val_ba: &ba,
                },
            )?;
            let mean = (ab.miou + ba.miou) / 2.0;
            if state.best_miou.is_none_or(|b| mean > b) {
                state.best_miou = Some(mean);
                state.save(&run_dir.join("checkpoints").join("best.ckpt"), cfg)?;
            }
            let n = cfg.sample_images.min(val_a.len()).min(val_b.len());
            let samples = run_dir.join("samples");
            write_grid(&samples.join(format!("epoch_{:04}_ab.png", state.epoch)), &state.g_ab, &val_a[..n])?;
            write_grid(&samples.join(format!("epoch_{:04}_ba.png", state.epoch)), &state.g_ba, &val_b[..n])?;
        }
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
            state.save(&run_dir.join("checkpoints").join(checkpoint_name(state.epoch)), cfg)?;
        }
    }
    let _ = csv.into_inner().map(|mut f| f.flush());

    let (test_ab, test_ba) = if data.test_a.is_empty() || data.test_b.is_empty() {
        (None, None)
    } else {
        let (ab, ba) = translation_reports(
            &state,
            &center_crops(&data.test_a, cfg.crop)?,
            &center_crops(&data.test_b, cfg.crop)?,
            &data.taxonomy,
        )?;
        let eval = run_dir.join("eval");
        write_json(&eval.join("test_ab.json"), &ab)?;
        write_json(&eval.join("test_ba.json"), &ba)?;
        (Some(ab), Some(ba))
    };
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        epochs: state.epoch,
        steps: state.step,
        skipped_steps: skipped,
        test_ab,
        test_ba,
    })
}

impl TrainState {
    /// Test-split style report of one translation direction with an external
    /// evaluation segmenter.
    pub fn evaluate_direction(
        &self,
        direction: crate::types::Direction,
        evaluator: &Evaluator<'_>,
        samples: &[LabeledSample],
        crop: usize,
        taxonomy: &ClassTaxonomy,
    ) -> Result<MetricsReport> {
        let g = match direction {
            crate::types::Direction::AB => &self.g_ab,
            crate::types::Direction::BA => &self.g_ba,
        };
        evaluate_translation(g, evaluator, center_crops(samples, crop)?, taxonomy)
    }
}
