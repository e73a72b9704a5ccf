//! Label masks, confusion matrices, IoU and corruption error.

use std::collections::BTreeMap;

use ndtensor::Tensor;

use crate::corruption::{Category, CATALOG, SEVERITIES};
use crate::error::{DarnError, Result};

/// Integer label mask `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DarnError::Geometry(format!(
                "mask shape {shape:?} needs {} labels, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Mask { shape, data })
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn select(&self, indices: &[usize]) -> Mask {
        let hw = self.shape[1] * self.shape[2];
        let mut data = Vec::with_capacity(indices.len() * hw);
        for &i in indices {
            data.extend_from_slice(&self.data[i * hw..(i + 1) * hw]);
        }
        Mask {
            shape: [indices.len(), self.shape[1], self.shape[2]],
            data,
        }
    }
}

/// Per-pixel argmax over the class axis of `[B, K, H, W]` logits.
/// Ties resolve to the lowest class index.
pub fn argmax(logits: &Tensor) -> Result<Mask> {
    let s = logits.shape();
    if s.len() != 4 || s[1] == 0 || s[1] > 256 {
        return Err(DarnError::Geometry(format!("argmax expects [B, K<=256, H, W], got {s:?}")));
    }
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let x = logits.data();
    let mut data = Vec::with_capacity(b * hw);
    for n in 0..b {
        for r in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if x[(n * k + c) * hw + r] > x[(n * k + best) * hw + r] {
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    Mask::new([b, s[2], s[3]], data)
}

/// `counts[target * k + pred]`: rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, pred: &Mask, target: &Mask) -> Result<()> {
        if pred.shape != target.shape {
            return Err(DarnError::Geometry(format!(
                "prediction {:?} and target {:?} differ in shape",
                pred.shape, target.shape
            )));
        }
        let k = self.k;
        if let Some(bad) = pred.data.iter().chain(&target.data).find(|&&v| v as usize >= k) {
            return Err(DarnError::Domain(format!("label {bad} outside 0..{k}")));
        }
        for (&p, &t) in pred.data.iter().zip(&target.data) {
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn get(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.k + pred]
    }

    /// IoU per class; `None` where the class is absent from both masks.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn record(&self) -> MetricRecord {
        let per_class_iou = self.per_class_iou();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MetricRecord {
            per_class_iou,
            miou,
            confusion: self.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

pub fn miou(pred: &Mask, target: &Mask, k: usize) -> Result<MetricRecord> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, target)?;
    Ok(cm.record())
}

/// Corruption error summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MceReport {
    /// `(name, mean clamped degradation over severities)`.
    pub per_corruption: Vec<(String, f64)>,
    pub per_category: Vec<(Category, f64)>,
    pub mean: f64,
}

/// Clamped relative degradation `1 − corrupted/clean`.
pub fn degradation(clean: f64, corrupted: f64) -> f64 {
    (1.0 - corrupted / clean).clamp(0.0, 1.0)
}

/// Mean corruption error over an explicit catalogue of `(category, name)`
/// pairs; the grid maps `(name, severity)` to mIoU and must hold severities 1..=5.
pub fn mce_with_catalog(
    clean: f64,
    grid: &BTreeMap<(String, u8), f64>,
    catalog: &[(Category, &str)],
) -> Result<MceReport> {
    if !(clean > 0.0) {
        return Err(DarnError::Domain(format!("clean mIoU {clean} must be positive")));
    }
    let mut per_corruption = Vec::new();
    let mut by_cat: Vec<(Category, Vec<f64>)> = Vec::new();
    for &(cat, name) in catalog {
        let mut sum = 0.0;
        for s in SEVERITIES {
            let m = grid.get(&(name.to_string(), s)).ok_or_else(|| {
                DarnError::IncompleteGrid(format!("missing `{name}` at severity {s}"))
            })?;
            sum += degradation(clean, *m);
        }
        let mean = sum / SEVERITIES.len() as f64;
        per_corruption.push((name.to_string(), mean));
        match by_cat.iter_mut().find(|(c, _)| *c == cat) {
            Some((_, v)) => v.push(mean),
            None => by_cat.push((cat, vec![mean])),
        }
    }
    if by_cat.is_empty() {
        return Err(DarnError::IncompleteGrid("empty corruption catalogue".into()));
    }
    let per_category: Vec<(Category, f64)> = by_cat
        .into_iter()
        .map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let mean = per_category.iter().map(|(_, v)| v).sum::<f64>() / per_category.len() as f64;
    Ok(MceReport {
        per_corruption,
        per_category,
        mean,
    })
}

/// [`mce_with_catalog`] over the built-in eight-corruption suite.
pub fn mce(clean: f64, grid: &BTreeMap<(String, u8), f64>) -> Result<MceReport> {
    let catalog: Vec<(Category, &str)> = CATALOG.iter().map(|c| (c.category, c.name)).collect();
    mce_with_catalog(clean, grid, &catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_score_one() {
        let m = Mask::new([1, 2, 2], vec![0, 1, 2, 1]).unwrap();
        let r = miou(&m, &m, 4).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class_iou[3], None);
    }

    #[test]
    fn full_disagreement_scores_zero() {
        let a = Mask::new([1, 1, 4], vec![0, 0, 1, 1]).unwrap();
        let b = Mask::new([1, 1, 4], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(miou(&a, &b, 2).unwrap().miou, 0.0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::from_vec(vec![1, 2, 1, 2], vec![1.0, 0.0, 1.0, 2.0]);
        assert_eq!(argmax(&t).unwrap().data, vec![0, 1]);
    }

    #[test]
    fn category_average() {
        let cat = [(Category::Noise, "a"), (Category::Noise, "b")];
        let mut grid = BTreeMap::new();
        for s in SEVERITIES {
            grid.insert(("a".to_string(), s), 0.8);
            grid.insert(("b".to_string(), s), 0.6);
        }
        let r = mce_with_catalog(1.0, &grid, &cat).unwrap();
        assert!((r.per_category[0].1 - 0.3).abs() < 1e-12);
        grid.remove(&("b".to_string(), 3));
        assert!(matches!(
            mce_with_catalog(1.0, &grid, &cat),
            Err(DarnError::IncompleteGrid(_))
        ));
    }
}
