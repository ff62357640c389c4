//! Confusion matrices and mean intersection-over-union.

use ndarray::Array2;

use crate::error::{Error, Result};

/// `K x K` pixel counts, rows are ground truth and columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn add(&mut self, truth: &Array2<u8>, prediction: &Array2<u8>) -> Result<()> {
        if truth.dim() != prediction.dim() {
            return Err(Error::Shape(format!(
                "labels {:?} vs prediction {:?}",
                truth.dim(),
                prediction.dim()
            )));
        }
        let k = self.num_classes();
        for (&t, &p) in truth.iter().zip(prediction.iter()) {
            let (t, p) = (t as usize, p as usize);
            if t >= k || p >= k {
                return Err(Error::Shape(format!("class index outside {k} classes")));
            }
            self.counts[[t, p]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    /// IoU per class; `None` for classes absent from both truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes();
        (0..k)
            .map(|c| {
                let tp = self.counts[[c, c]];
                let fn_ = self.counts.row(c).sum() - tp;
                let fp = self.counts.column(c).sum() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes with a nonzero union.
pub fn compute_miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.num_classes() == 0 || cm.total() == 0 {
        return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
    }
    let ious: Vec<f64> = cm.per_class_iou().into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}
