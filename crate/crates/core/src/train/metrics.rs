//! Point-level confusion matrices and mIoU.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    /// `counts[gt * classes + pred]`.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds one observation; negative ground truth is ignored.
    pub fn add(&mut self, gt: i64, pred: usize) -> Result<()> {
        if gt < 0 {
            return Ok(());
        }
        let g = gt as usize;
        if g >= self.classes || pred >= self.classes {
            return Err(Error::Input(format!(
                "label {gt} or prediction {pred} outside {} classes",
                self.classes
            )));
        }
        self.counts[g * self.classes + pred] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, gt: &[i64], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::dim("confusion", format!("{} labels vs {} predictions", gt.len(), pred.len())));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.add(g, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for classes absent from both ground truth and
    /// predictions.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let gt: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::EmptySupervision);
        }
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::EmptySupervision);
        }
        let tp: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(tp as f64 / self.total() as f64)
    }
}
