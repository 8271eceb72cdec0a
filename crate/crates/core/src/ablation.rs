//! Trains every (variant, seed) pair, scores the translations with frozen
//! evaluation segmenters, and tabulates mean ± sd per variant and direction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{Evaluator, MetricsReport};
use crate::models::Segmenter;
use crate::train::{
    load_segmenter, save_segmenter, train, train_segmenter, SegTrainConfig, TrainData, TrainState,
};
use crate::types::{Direction, LabeledSample};

/// Outcome of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub ab: Option<MetricsReport>,
    pub ba: Option<MetricsReport>,
    pub error: Option<String>,
}

impl AblationRun {
    pub fn report(&self, d: Direction) -> Option<&MetricsReport> {
        match d {
            Direction::AB => self.ab.as_ref(),
            Direction::BA => self.ba.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub direction: Direction,
    /// Mean overall pixel accuracy over successful seeds.
    pub mean_acc: f64,
    pub miou: f64,
    pub miou_sd: f64,
    pub seeds: usize,
    pub failed: usize,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize(runs: &[AblationRun]) -> Vec<AblationRow> {
    let mut variants: Vec<Variant> = runs.iter().map(|r| r.variant).collect();
    variants.sort();
    variants.dedup();
    let mut rows = Vec::new();
    for v in variants {
        for d in [Direction::AB, Direction::BA] {
            let of: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
            let reports: Vec<&MetricsReport> = of.iter().filter_map(|r| r.report(d)).collect();
            let (miou, miou_sd) = mean_sd(&reports.iter().map(|r| r.miou).collect::<Vec<_>>());
            let (mean_acc, _) = mean_sd(&reports.iter().map(|r| r.overall_acc).collect::<Vec<_>>());
            rows.push(AblationRow {
                variant: v,
                direction: d,
                mean_acc,
                miou,
                miou_sd,
                seeds: reports.len(),
                failed: of.len() - reports.len(),
            });
        }
    }
    rows
}

/// Whether mean mIoU satisfies seg_sm ≥ seg ≥ cycle in both directions,
/// over whichever of the three variants are present.
pub fn check_order(rows: &[AblationRow]) -> bool {
    [Direction::AB, Direction::BA].iter().all(|&d| {
        let m = |v: Variant| rows.iter().find(|r| r.variant == v && r.direction == d).map(|r| r.miou);
        let chain: Vec<f64> = Variant::ALL.iter().filter_map(|&v| m(v)).collect();
        chain.iter().all(|x| x.is_finite()) && chain.windows(2).all(|w| w[1] >= w[0])
    })
}

pub fn table_text(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<8} {:<9} {:>8} {:>15} {:>5}\n",
        "variant", "direction", "mean_acc", "miou", "seeds"
    );
    for r in rows {
        let fail = if r.failed > 0 {
            format!("  ({} failed)", r.failed)
        } else {
            String::new()
        };
        let _ = writeln!(
            s,
            "{:<8} {:<9} {:>8.2} {:>7.2} ± {:>5.2} {:>5}{fail}",
            r.variant.as_str(),
            r.direction.as_str(),
            r.mean_acc,
            r.miou,
            r.miou_sd,
            r.seeds
        );
    }
    s
}

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,direction,mean_acc,miou,miou_sd,seeds,failed\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{},{}",
            r.variant, r.direction.as_str(), r.mean_acc, r.miou, r.miou_sd, r.seeds, r.failed
        );
    }
    s
}

/// Frozen segmenters for domains A and B: loaded from the configured paths,
/// or trained on each domain's training split and saved under `out`.
pub fn evaluation_segmenters(cfg: &RunConfig, data: &TrainData, out: &Path) -> Result<(Segmenter, Segmenter)> {
    let k = data.taxonomy.num_classes();
    let get = |path: &Option<PathBuf>, name: &str, train_set: &[LabeledSample], val: &[LabeledSample], seed: u64| -> Result<Segmenter> {
        if let Some(p) = path {
            let (seg, names) = load_segmenter(p)?;
            if names != data.taxonomy.names() {
                return Err(Error::Taxonomy(format!(
                    "{} was trained on classes {names:?}, data uses {:?}",
                    p.display(),
                    data.taxonomy.names()
                )));
            }
            return Ok(seg);
        }
        let train_cfg = cfg.resolved(k)?;
        let scfg = SegTrainConfig {
            epochs: cfg.eval_segmenter_epochs,
            batch_size: train_cfg.batch_size.max(4),
            lr: crate::train::SEG_PRETRAIN_LR,
            crop: train_cfg.crop,
            flip: train_cfg.flip,
            seed: seed ^ 0x5e6,
            segmenter: train_cfg.segmenter,
        };
        let (seg, report) = train_segmenter(&scfg, train_set, val, &data.taxonomy)?;
        if let Some(r) = report {
            log::info!("evaluation segmenter {name}: val acc {:.1}, mIoU {:.1}", r.overall_acc, r.miou);
        }
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        save_segmenter(&out.join(format!("{name}.ckpt")), &seg, &data.taxonomy)?;
        Ok(seg)
    };
    let a = get(&cfg.eval_segmenter_a, "A", &data.train_a, &data.val_a, 1)?;
    let b = get(&cfg.eval_segmenter_b, "B", &data.train_b, &data.val_b, 2)?;
    Ok((a, b))
}

/// Trains every variant for every seed into `<out>/<variant>_seed<k>` and
/// scores the final generators on the test splits. A failing run is
/// recorded with its error and does not stop the others.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &TrainData,
    variants: &[Variant],
    seeds: usize,
    eval_a: &Segmenter,
    eval_b: &Segmenter,
    out: &Path,
) -> Result<Vec<AblationRun>> {
    let k = data.taxonomy.num_classes();
    let mut runs = Vec::new();
    for &variant in variants {
        for i in 0..seeds as u64 {
            let mut c = cfg.clone();
            c.variant = Some(variant);
            c.train.seed = cfg.train.seed + i;
            c.train.dropout.rng_seed = cfg.train.dropout.rng_seed + i;
            let run_dir = out.join(format!("{variant}_seed{i}"));
            let started = std::time::Instant::now();
            let result = (|| -> Result<(MetricsReport, MetricsReport)> {
                let t = c.resolved(k)?;
                if run_dir.exists() {
                    std::fs::remove_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
                }
                std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
                std::fs::write(run_dir.join("config.txt"), c.to_text()).map_err(|e| Error::io(&run_dir, e))?;
                train(&t, data, &run_dir, false)?;
                let last = crate::train::latest_checkpoint(&run_dir)?
                    .ok_or_else(|| Error::Checkpoint("run wrote no checkpoint".into()))?;
                let state = TrainState::load(&last, &t)?;
                let ab = state.evaluate_direction(Direction::AB, &Evaluator::Network(eval_b), &data.test_a, t.crop, &data.taxonomy)?;
                let ba = state.evaluate_direction(Direction::BA, &Evaluator::Network(eval_a), &data.test_b, t.crop, &data.taxonomy)?;
                Ok((ab, ba))
            })();
            let run = match result {
                Ok((ab, ba)) => {
                    log::info!(
                        "{variant} seed {i}: mIoU ab {:.1} ba {:.1} ({:.0}s)",
                        ab.miou,
                        ba.miou,
                        started.elapsed().as_secs_f64()
                    );
                    AblationRun {
                        variant,
                        seed: c.train.seed,
                        ab: Some(ab),
                        ba: Some(ba),
                        error: None,
                    }
                }
                Err(e) => {
                    log::error!("{variant} seed {i} failed: {e}");
                    AblationRun {
                        variant,
                        seed: c.train.seed,
                        ab: None,
                        ba: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(run);
        }
    }
    Ok(runs)
}
