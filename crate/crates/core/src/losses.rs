//! Scalar training objectives: adversarial, cycle, identity and
//! segmentation-consistency terms, and their weighted combination.
//!
//! Tensor losses are dtype-generic so they can be checked in double precision.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelPermutation, LogitMap, SegMask, IGNORE};

/// Probabilities fed to the log in bce mode are clamped to `[EPS, 1 - EPS]`.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMode {
    Bce,
    Lsgan,
}

impl std::str::FromStr for AdvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(AdvMode::Bce),
            "lsgan" => Ok(AdvMode::Lsgan),
            other => Err(Error::Config(format!("unknown adv_mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for AdvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdvMode::Bce => "bce",
            AdvMode::Lsgan => "lsgan",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// cycle weight
    pub lambda_cycle: f64,
    /// segmentation-consistency weight
    pub lambda_seg: f64,
    pub lambda_idt: f64,
    pub adv_mode: AdvMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cycle: 10.0,
            lambda_seg: 1.0,
            lambda_idt: 5.0,
            adv_mode: AdvMode::Lsgan,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_seg", self.lambda_seg),
            ("lambda_idt", self.lambda_idt),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step values of every loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub g_adv_ab: f64,
    pub g_adv_ba: f64,
    pub d_a: f64,
    pub d_b: f64,
    pub cycle: f64,
    pub identity: f64,
    pub seg_ab: f64,
    pub seg_ba: f64,
    pub total_g: f64,
}

impl LossRecord {
    pub const CSV_HEADER: [&'static str; 10] = [
        "step", "g_adv_ab", "g_adv_ba", "d_a", "d_b", "cycle", "identity", "seg_ab", "seg_ba",
        "total_g",
    ];

    pub fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("g_adv_ab", self.g_adv_ab),
            ("g_adv_ba", self.g_adv_ba),
            ("d_a", self.d_a),
            ("d_b", self.d_b),
            ("cycle", self.cycle),
            ("identity", self.identity),
            ("seg_ab", self.seg_ab),
            ("seg_ba", self.seg_ba),
            ("total_g", self.total_g),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.terms().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, value)) => Err(Error::NonFinite { term, value }),
            None => Ok(()),
        }
    }

    pub fn csv_row(&self, step: u64) -> Vec<String> {
        std::iter::once(step.to_string())
            .chain(self.terms().iter().map(|(_, v)| format!("{v:.9e}")))
            .collect()
    }
}

/// `g_adv_ab + g_adv_ba + λ1·cycle + λ2·(seg_ab + seg_ba) + λ_idt·identity`.
/// Discriminator terms are not part of the generator objective.
pub fn total_generator_loss(terms: &LossRecord, w: &LossWeights) -> Result<f64> {
    for (term, value) in [
        ("g_adv_ab", terms.g_adv_ab),
        ("g_adv_ba", terms.g_adv_ba),
        ("cycle", terms.cycle),
        ("identity", terms.identity),
        ("seg_ab", terms.seg_ab),
        ("seg_ba", terms.seg_ba),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    Ok(terms.g_adv_ab
        + terms.g_adv_ba
        + w.lambda_cycle * terms.cycle
        + w.lambda_seg * (terms.seg_ab + terms.seg_ba)
        + w.lambda_idt * terms.identity)
}

fn clamp_prob(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(BCE_EPS, 1.0 - BCE_EPS)?)
}

/// Discriminator loss on real and (pooled) fake score maps.
///
/// bce: `-mean(log real) - mean(log(1 - fake))`; lsgan: `mean((real-1)^2) + mean(fake^2)`.
pub fn adversarial_d_loss(real: &Tensor, fake: &Tensor, mode: AdvMode) -> Result<Tensor> {
    Ok(match mode {
        AdvMode::Bce => {
            let real_term = clamp_prob(real)?.log()?.mean_all()?.neg()?;
            let fake_term = clamp_prob(fake)?.affine(-1.0, 1.0)?.log()?.mean_all()?.neg()?;
            (real_term + fake_term)?
        }
        AdvMode::Lsgan => {
            let real_term = (real - 1.0)?.sqr()?.mean_all()?;
            let fake_term = fake.sqr()?.mean_all()?;
            (real_term + fake_term)?
        }
    })
}

/// Non-saturating generator loss: bce `-mean(log fake)`, lsgan `mean((fake-1)^2)`.
pub fn adversarial_g_loss(fake: &Tensor, mode: AdvMode) -> Result<Tensor> {
    Ok(match mode {
        AdvMode::Bce => clamp_prob(fake)?.log()?.mean_all()?.neg()?,
        AdvMode::Lsgan => (fake - 1.0)?.sqr()?.mean_all()?,
    })
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.dims().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// L1 reconstruction error between an input and its round trip.
pub fn cycle_loss(x: &Tensor, x_rt: &Tensor) -> Result<Tensor> {
    mean_abs_diff(x, x_rt)
}

/// L1 distance between an input and the opposite generator applied to it.
pub fn identity_loss(x: &Tensor, g_same: &Tensor) -> Result<Tensor> {
    mean_abs_diff(x, g_same)
}

/// Log-softmax over the class axis (dim 1 of `[N, K, H, W]`).
pub fn log_softmax_classes(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Result of the consistency cross-entropy.
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub value: Tensor,
    /// Number of scored (non-IGNORE) pixels.
    pub scored: usize,
}

impl SegLoss {
    pub fn all_ignored(&self) -> bool {
        self.scored == 0
    }
}

/// One-hot targets `[N, K, H, W]` for a batch of masks, IGNORE pixels all zero.
pub fn one_hot_batch(masks: &[&SegMask], k: usize, dtype: DType) -> Result<(Tensor, usize)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("empty mask batch"))?;
    let (h, w) = first.dim();
    let mut data = vec![0f32; masks.len() * k * h * w];
    let mut scored = 0usize;
    for (n, m) in masks.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![m.height(), m.width()],
            });
        }
        if m.num_classes() != k {
            return Err(Error::invalid(format!(
                "mask has {} classes, logits have {k}",
                m.num_classes()
            )));
        }
        for ((y, x), &l) in m.labels().indexed_iter() {
            if l != IGNORE {
                data[((n * k + l as usize) * h + y) * w + x] = 1.0;
                scored += 1;
            }
        }
    }
    let t = Tensor::from_vec(data, (masks.len(), k, h, w), &candle_core::Device::Cpu)?;
    Ok((t.to_dtype(dtype)?, scored))
}

/// Pixel-mean softmax cross-entropy of `pred` (`[N, K, H, W]` logits) against
/// reference masks, optionally passed through a label permutation first.
/// IGNORE pixels are excluded; if every pixel is IGNORE the loss is 0.
pub fn seg_consistency_loss(
    pred: &Tensor,
    reference: &[&SegMask],
    remap: Option<&LabelPermutation>,
) -> Result<SegLoss> {
    let (n, k, h, w) = pred.dims4()?;
    if reference.len() != n {
        return Err(Error::invalid(format!(
            "{} reference masks for a batch of {n}",
            reference.len()
        )));
    }
    if let Some(m) = reference.iter().find(|m| m.num_classes() != k) {
        return Err(Error::invalid(format!(
            "prediction has {k} classes but reference taxonomy has {}",
            m.num_classes()
        )));
    }
    if let Some(m) = reference.iter().find(|m| m.dim() != (h, w)) {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![m.height(), m.width()],
        });
    }
    let remapped: Vec<SegMask>;
    let targets: Vec<&SegMask> = match remap {
        Some(p) => {
            remapped = reference
                .iter()
                .map(|m| m.remapped(p))
                .collect::<Result<_>>()?;
            remapped.iter().collect()
        }
        None => reference.to_vec(),
    };
    let (onehot, scored) = one_hot_batch(&targets, k, pred.dtype())?;
    if scored == 0 {
        let zero = Tensor::zeros((), pred.dtype(), pred.device())?;
        return Ok(SegLoss {
            value: zero,
            scored,
        });
    }
    let logp = log_softmax_classes(pred)?;
    let value = (onehot * logp)?
        .sum_all()?
        .affine(-1.0 / scored as f64, 0.0)?;
    Ok(SegLoss { value, scored })
}

/// Same loss on plain value types; returns `(loss, all_ignored)`.
pub fn seg_consistency_loss_map(
    pred: &LogitMap,
    reference: &SegMask,
    remap: Option<&LabelPermutation>,
) -> Result<(f64, bool)> {
    let (k, h, w) = pred.scores().dim();
    let t = Tensor::from_iter(pred.scores().iter().map(|&v| v as f64), &candle_core::Device::Cpu)?
        .reshape((1, k, h, w))?;
    let loss = seg_consistency_loss(&t, &[reference], remap)?;
    Ok((loss.value.to_scalar::<f64>()?, loss.all_ignored()))
}

/// Hard pseudo-labels from segmenter logits `[N, K, H, W]`, detached from any graph.
pub fn pseudo_labels(logits: &Tensor) -> Result<Vec<SegMask>> {
    let (n, k, h, w) = logits.dims4()?;
    let idx = logits.detach().argmax(1)?.to_dtype(DType::U32)?;
    let flat: Vec<u32> = idx.flatten_all()?.to_vec1()?;
    flat.chunks(h * w)
        .take(n)
        .map(|c| {
            let labels = ndarray::Array2::from_shape_vec(
                (h, w),
                c.iter().map(|&v| v as u8).collect(),
            )
            .expect("chunk has h*w entries");
            SegMask::new(labels, k)
        })
        .collect()
}

/// Sum of the generator-side terms as a differentiable tensor, using the same
/// weights as [`total_generator_loss`].
pub struct GeneratorTerms {
    pub adv_ab: Tensor,
    pub adv_ba: Tensor,
    pub cycle: Tensor,
    pub identity: Tensor,
    pub seg_ab: Tensor,
    pub seg_ba: Tensor,
}

impl GeneratorTerms {
    pub fn objective(&self, w: &LossWeights) -> Result<Tensor> {
        let mut total = (&self.adv_ab + &self.adv_ba)?;
        if w.lambda_cycle != 0.0 {
            total = (total + self.cycle.affine(w.lambda_cycle, 0.0)?)?;
        }
        if w.lambda_seg != 0.0 {
            total = (total + (&self.seg_ab + &self.seg_ba)?.affine(w.lambda_seg, 0.0)?)?;
        }
        if w.lambda_idt != 0.0 {
            total = (total + self.identity.affine(w.lambda_idt, 0.0)?)?;
        }
        Ok(total)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::Device;
    use ndarray::arr2;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(t: Tensor) -> f64 {
        scalar(&t).unwrap()
    }

    #[test]
    fn d_loss_values() {
        let half = t(&[0.5; 4]);
        assert_abs_diff_eq!(
            s(adversarial_d_loss(&half, &half, AdvMode::Bce).unwrap()),
            2.0 * 2f64.ln(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            s(adversarial_d_loss(&t(&[1.0, 1.0]), &t(&[0.0]), AdvMode::Lsgan).unwrap()),
            0.0
        );
        let v = s(adversarial_d_loss(&t(&[0.9, 0.8]), &t(&[0.1]), AdvMode::Bce).unwrap());
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0 - 0.9f64.ln();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.269_612_5, epsilon = 1e-6);
    }

    #[test]
    fn bce_is_clamped_not_nan() {
        let v = s(adversarial_d_loss(&t(&[0.0, 1.0]), &t(&[1.0]), AdvMode::Bce).unwrap());
        assert!(v.is_finite() && v > 0.0);
        let v = s(adversarial_g_loss(&t(&[0.0]), AdvMode::Bce).unwrap());
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, -(BCE_EPS.ln()), epsilon = 1e-6);
    }

    #[test]
    fn g_loss_values() {
        assert_abs_diff_eq!(
            s(adversarial_g_loss(&t(&[0.5, 0.5]), AdvMode::Bce).unwrap()),
            2f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(s(adversarial_g_loss(&t(&[1.0]), AdvMode::Lsgan).unwrap()), 0.0);
        assert_abs_diff_eq!(
            s(adversarial_g_loss(&t(&[0.0, 0.5]), AdvMode::Lsgan).unwrap()),
            0.625,
            epsilon = 1e-12
        );
    }

    #[test]
    fn l1_terms() {
        let x = t(&[0.3, -0.2, 0.9]);
        assert_eq!(s(cycle_loss(&x, &x).unwrap()), 0.0);
        assert_abs_diff_eq!(s(cycle_loss(&t(&[1.0; 6]), &t(&[-1.0; 6])).unwrap()), 2.0);
        assert_abs_diff_eq!(
            s(cycle_loss(&t(&[0.5, -0.5]), &t(&[0.0, 0.0])).unwrap()),
            0.5
        );
        assert_abs_diff_eq!(
            s(identity_loss(&t(&[0.25; 4]), &t(&[-0.25; 4])).unwrap()),
            0.5
        );
        assert!(matches!(
            cycle_loss(&t(&[0.0; 3]), &t(&[0.0; 4])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(identity_loss(&t(&[0.0; 3]), &t(&[0.0; 2])).is_err());
    }

    fn logits(k: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let v: Vec<f64> = (0..k * h * w)
            .map(|i| f(i / (h * w), (i / w) % h, i % w))
            .collect();
        Tensor::from_vec(v, (1, k, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn seg_loss_confident_and_uniform() {
        let mask = SegMask::new(arr2(&[[0, 1], [1, 0]]), 2).unwrap();
        let confident = logits(2, 2, 2, |c, y, x| {
            if mask.labels()[(y, x)] as usize == c {
                10.0
            } else {
                -10.0
            }
        });
        let l = seg_consistency_loss(&confident, &[&mask], None).unwrap();
        assert!(s(l.value) <= 1e-4);
        let uniform = logits(2, 2, 2, |_, _, _| 0.0);
        let l = seg_consistency_loss(&uniform, &[&mask], None).unwrap();
        assert_abs_diff_eq!(s(l.value), 2f64.ln(), epsilon = 1e-12);
        assert_eq!(l.scored, 4);
    }

    #[test]
    fn seg_loss_excludes_ignore() {
        let mask = SegMask::new(arr2(&[[0, IGNORE]]), 2).unwrap();
        let pred = logits(2, 1, 2, |c, _, x| if c == 0 && x == 0 { 2.0 } else { 0.0 });
        let l = seg_consistency_loss(&pred, &[&mask], None).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(s(l.value), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.126928, epsilon = 1e-6);
    }

    #[test]
    fn seg_loss_all_ignored_is_flagged_zero() {
        let mask = SegMask::filled(2, 2, IGNORE, 3).unwrap();
        let pred = logits(3, 2, 2, |c, _, _| c as f64);
        let l = seg_consistency_loss(&pred, &[&mask], None).unwrap();
        assert!(l.all_ignored());
        assert_eq!(s(l.value), 0.0);
    }

    #[test]
    fn seg_loss_class_count_mismatch() {
        let mask = SegMask::filled(2, 2, 0, 3).unwrap();
        let pred = logits(2, 2, 2, |_, _, _| 0.0);
        assert!(matches!(
            seg_consistency_loss(&pred, &[&mask], None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn seg_loss_remap() {
        // Prediction confidently says class 1 where the reference says 0:
        // switching labels 0<->1 turns a bad loss into a good one.
        let mask = SegMask::filled(2, 2, 0, 2).unwrap();
        let pred = logits(2, 2, 2, |c, _, _| if c == 1 { 8.0 } else { -8.0 });
        let plain = s(seg_consistency_loss(&pred, &[&mask], None).unwrap().value);
        let perm = LabelPermutation::parse("0:1,1:0", 2).unwrap();
        let switched = s(seg_consistency_loss(&pred, &[&mask], Some(&perm)).unwrap().value);
        assert!(plain > 10.0);
        assert!(switched < 1e-6);
        let id = LabelPermutation::identity(2);
        assert_eq!(
            s(seg_consistency_loss(&pred, &[&mask], Some(&id)).unwrap().value),
            plain
        );
    }

    #[test]
    fn value_type_wrapper_matches() {
        let mask = SegMask::new(arr2(&[[0, IGNORE]]), 2).unwrap();
        let scores = ndarray::arr3(&[[[2.0f32, 0.0]], [[0.0, 0.0]]]);
        let (v, ignored) =
            seg_consistency_loss_map(&LogitMap::new(scores).unwrap(), &mask, None).unwrap();
        assert!(!ignored);
        assert_abs_diff_eq!(v, 0.126928, epsilon = 1e-6);
    }

    #[test]
    fn pseudo_labels_are_argmax() {
        let pred = logits(3, 1, 3, |c, _, x| if c == x { 1.0 } else { 0.0 });
        let m = pseudo_labels(&pred).unwrap();
        assert_eq!(m[0].labels(), arr2(&[[0u8, 1, 2]]));
    }

    #[test]
    fn total_loss_combination() {
        let w = LossWeights {
            lambda_cycle: 10.0,
            lambda_seg: 1.0,
            lambda_idt: 5.0,
            adv_mode: AdvMode::Lsgan,
        };
        let ones = LossRecord {
            g_adv_ab: 1.0,
            g_adv_ba: 1.0,
            d_a: 1.0,
            d_b: 1.0,
            cycle: 1.0,
            identity: 1.0,
            seg_ab: 1.0,
            seg_ba: 1.0,
            total_g: 0.0,
        };
        assert_eq!(total_generator_loss(&ones, &w).unwrap(), 19.0);
        let zero_w = LossWeights {
            lambda_cycle: 0.0,
            lambda_seg: 0.0,
            lambda_idt: 0.0,
            ..w
        };
        assert_eq!(total_generator_loss(&ones, &zero_w).unwrap(), 2.0);
        assert_eq!(total_generator_loss(&LossRecord::default(), &w).unwrap(), 0.0);
        let bad = LossRecord {
            seg_ba: f64::NAN,
            ..ones
        };
        let err = total_generator_loss(&bad, &w).unwrap_err();
        assert!(err.to_string().contains("seg_ba"), "{err}");
    }

    #[test]
    fn tensor_objective_matches_scalar_combination() {
        let w = LossWeights::default();
        let terms = GeneratorTerms {
            adv_ab: t(&[0.3]).sum_all().unwrap(),
            adv_ba: t(&[0.7]).sum_all().unwrap(),
            cycle: t(&[0.11]).sum_all().unwrap(),
            identity: t(&[0.05]).sum_all().unwrap(),
            seg_ab: t(&[1.2]).sum_all().unwrap(),
            seg_ba: t(&[0.9]).sum_all().unwrap(),
        };
        let rec = LossRecord {
            g_adv_ab: 0.3,
            g_adv_ba: 0.7,
            cycle: 0.11,
            identity: 0.05,
            seg_ab: 1.2,
            seg_ba: 0.9,
            ..Default::default()
        };
        let a = s(terms.objective(&w).unwrap());
        let b = total_generator_loss(&rec, &w).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_seg: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn csv_row_layout() {
        let row = LossRecord::default().csv_row(7);
        assert_eq!(row.len(), LossRecord::CSV_HEADER.len());
        assert_eq!(row[0], "7");
    }
}
