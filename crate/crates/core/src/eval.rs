//! Confusion-matrix metrics and the translated-image segmentation protocol:
//! translate a labeled source image, segment the result with a frozen
//! target-domain segmenter, and score the prediction against the source mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Segment, Translate};
use crate::taxonomy::ClassTaxonomy;
use crate::types::{LabeledSample, SegMask, IGNORE};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.k).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, k)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    /// Adds one count per non-IGNORE ground-truth pixel.
    pub fn accumulate(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![gt.height(), gt.width()],
                actual: vec![pred.height(), pred.width()],
            });
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= self.k || p as usize >= self.k {
                return Err(Error::invalid(format!(
                    "label pair (gt {g}, pred {p}) invalid for {} classes",
                    self.k
                )));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid("cannot merge confusion matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: usize,
    pub name: String,
    /// `None` when the class occurs in neither ground truth nor prediction.
    pub iou: Option<f64>,
}

/// All values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_acc: f64,
    pub avg_class_acc: f64,
    pub miou: f64,
    pub fw_acc: f64,
    pub per_class_iou: Vec<ClassIou>,
    pub confusion: Vec<Vec<u64>>,
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix, names: Option<&[String]>) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let k = cm.num_classes();
    let total_f = total as f64;
    let trace: u64 = (0..k).map(|i| cm.get(i, i)).sum();
    let mut accs = Vec::new();
    let mut ious = Vec::new();
    let mut fw = 0.0;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c) as f64;
        let row = cm.row_sum(c) as f64;
        let col = cm.col_sum(c) as f64;
        if row > 0.0 {
            accs.push(tp / row);
        }
        let union = row + col - tp;
        let iou = (union > 0.0).then(|| tp / union);
        if let Some(v) = iou {
            ious.push(v);
            fw += row / total_f * v;
        }
        per_class.push(ClassIou {
            class: c,
            name: names
                .and_then(|n| n.get(c).cloned())
                .unwrap_or_else(|| format!("class_{c}")),
            iou: iou.map(|v| 100.0 * v),
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricsReport {
        overall_acc: 100.0 * trace as f64 / total_f,
        avg_class_acc: 100.0 * mean(&accs),
        miou: 100.0 * mean(&ious),
        fw_acc: 100.0 * fw,
        per_class_iou: per_class,
        confusion: cm.rows(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned per-class IoU listing followed by the summary metrics.
    pub fn table(&self) -> String {
        let width = self
            .per_class_iou
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        for c in &self.per_class_iou {
            let v = c.iou.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
            out.push_str(&format!("{:>3} {:<width$} {v:>6}\n", c.class, c.name));
        }
        out.push_str(&format!(
            "overall acc {:.1}  avg class acc {:.1}  mIoU {:.1}  fw acc {:.1}\n",
            self.overall_acc, self.avg_class_acc, self.miou, self.fw_acc
        ));
        out
    }
}

/// The frozen segmenter used to score translations.
pub enum Evaluator<'a> {
    Network(&'a dyn Segment),
    /// Returns the source ground truth as its prediction; a sanity oracle.
    GroundTruthEcho,
}

impl Evaluator<'_> {
    fn predict(&self, translated: &crate::types::Image, source: &LabeledSample) -> Result<SegMask> {
        match self {
            Evaluator::Network(s) => Ok(s.segment(translated)?.argmax()),
            Evaluator::GroundTruthEcho => {
                // IGNORE pixels are not scored, any class will do there
                let labels = source.mask.labels().mapv(|l| if l == IGNORE { 0 } else { l });
                SegMask::new(labels, source.mask.num_classes())
            }
        }
    }

    fn num_classes(&self) -> Option<usize> {
        match self {
            Evaluator::Network(s) => Some(s.num_classes()),
            Evaluator::GroundTruthEcho => None,
        }
    }
}

/// Translates each (already center-cropped) source sample, segments the
/// output and scores it against the source mask.
pub fn evaluate_translation<T, I>(
    generator: &T,
    evaluator: &Evaluator<'_>,
    samples: I,
    taxonomy: &ClassTaxonomy,
) -> Result<MetricsReport>
where
    T: Translate + ?Sized,
    I: IntoIterator<Item = LabeledSample>,
{
    let k = taxonomy.num_classes();
    if let Some(ek) = evaluator.num_classes() {
        if ek != k {
            return Err(Error::Taxonomy(format!(
                "evaluation segmenter predicts {ek} classes, taxonomy has {k}"
            )));
        }
    }
    let mut cm = ConfusionMatrix::new(k);
    for sample in samples {
        if sample.mask.num_classes() != k {
            return Err(Error::Taxonomy(format!(
                "sample mask has {} classes, taxonomy has {k}",
                sample.mask.num_classes()
            )));
        }
        let translated = generator.translate(&sample.image)?;
        let pred = evaluator.predict(&translated, &sample)?;
        cm.accumulate(&pred, &sample.mask)?;
    }
    metrics_from_confusion(&cm, Some(taxonomy.names()))
}
