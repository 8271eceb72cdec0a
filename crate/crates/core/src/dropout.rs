//! Semantic dropout: with probability `p`, keep a single class shared by an
//! unpaired sample pair and blank out everything else in both samples.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{apply_mask, LabeledSample, SegMask, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p: f64,
    pub rng_seed: u64,
}

impl DropoutConfig {
    pub fn new(p: f64, rng_seed: u64) -> Result<Self> {
        let cfg = DropoutConfig { p, rng_seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("semantic_dropout_p", self.p)
    }
}

pub(crate) fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Sorted distinct non-IGNORE labels present in `g`.
pub fn get_labels(g: &SegMask) -> BTreeSet<u8> {
    g.labels().iter().copied().filter(|&l| l != IGNORE).collect()
}

/// Binary mask that is 1 exactly where `g == label`.
pub fn get_mask(label: u8, g: &SegMask) -> Result<Array2<u8>> {
    if label == IGNORE || !g.labels().iter().any(|&l| l == label) {
        return Err(Error::invalid(format!("label {label} does not occur in the mask")));
    }
    Ok(g.labels().mapv(|l| u8::from(l == label)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutOutcome {
    pub a: LabeledSample,
    pub b: LabeledSample,
    pub applied: bool,
    pub chosen_label: Option<u8>,
}

fn keep_only(sample: &LabeledSample, label: u8) -> Result<LabeledSample> {
    let m = get_mask(label, &sample.mask)?;
    let image = apply_mask(&sample.image, m.view())?;
    let labels = sample
        .mask
        .labels()
        .mapv(|l| if l == label { label } else { IGNORE });
    let mask = SegMask::new(labels, sample.mask.num_classes())?;
    LabeledSample::new(image, mask, sample.domain)
}

/// Applies semantic dropout to a sample pair with a single probability.
pub fn apply_semantic_dropout<R: Rng + ?Sized>(
    a: &LabeledSample,
    b: &LabeledSample,
    cfg: &DropoutConfig,
    rng: &mut R,
) -> Result<DropoutOutcome> {
    cfg.validate()?;
    apply_semantic_dropout_split(a, b, cfg.p, cfg.p, rng)
}

/// Semantic dropout with one uniform draw per pair but separate thresholds for
/// the two samples: `a` is masked when `u < p_a`, `b` when `u < p_b`. With
/// `p_a == p_b` this is the plain joint procedure. Pixels outside the chosen
/// class become IGNORE in the returned masks.
pub fn apply_semantic_dropout_split<R: Rng + ?Sized>(
    a: &LabeledSample,
    b: &LabeledSample,
    p_a: f64,
    p_b: f64,
    rng: &mut R,
) -> Result<DropoutOutcome> {
    check_probability("p_a", p_a)?;
    check_probability("p_b", p_b)?;
    let unchanged = || DropoutOutcome {
        a: a.clone(),
        b: b.clone(),
        applied: false,
        chosen_label: None,
    };
    let u: f64 = rng.random();
    let (mask_a, mask_b) = (u < p_a, u < p_b);
    if !mask_a && !mask_b {
        return Ok(unchanged());
    }
    let common: Vec<u8> = get_labels(&a.mask)
        .intersection(&get_labels(&b.mask))
        .copied()
        .collect();
    if common.is_empty() {
        return Ok(unchanged());
    }
    let k = common[rng.random_range(0..common.len())];
    Ok(DropoutOutcome {
        a: if mask_a { keep_only(a, k)? } else { a.clone() },
        b: if mask_b { keep_only(b, k)? } else { b.clone() },
        applied: true,
        chosen_label: Some(k),
    })
}
