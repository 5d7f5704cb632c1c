//! Voxel confusion counts and the overlap metrics derived from them. All
//! metrics are percentages; an empty denominator (class absent from both
//! prediction and ground truth) scores 100.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn correct(&self) -> u64 {
        self.tp.iter().sum()
    }

    pub fn check(&self) -> bool {
        (0..self.classes()).all(|c| self.tp[c] + self.fp[c] + self.fn_[c] + self.tn[c] == self.total)
    }
}

pub fn confusion(pred: &[u16], gt: &[u16], classes: usize) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut tp = vec![0u64; classes];
    let mut pred_count = vec![0u64; classes];
    let mut gt_count = vec![0u64; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(Error::LabelRange {
                value: p.max(g),
                classes,
            });
        }
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let total = pred.len() as u64;
    let fp: Vec<u64> = (0..classes).map(|c| pred_count[c] - tp[c]).collect();
    let fn_: Vec<u64> = (0..classes).map(|c| gt_count[c] - tp[c]).collect();
    let tn = (0..classes).map(|c| total - tp[c] - fp[c] - fn_[c]).collect();
    Ok(ConfusionCounts { tp, fp, fn_, tn, total })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_iou(c: &ConfusionCounts, k: usize) -> f64 {
    100.0 * ratio(c.tp[k], c.tp[k] + c.fp[k] + c.fn_[k])
}

pub fn class_dice(c: &ConfusionCounts, k: usize) -> f64 {
    100.0 * ratio(2 * c.tp[k], 2 * c.tp[k] + c.fp[k] + c.fn_[k])
}

pub fn class_recall(c: &ConfusionCounts, k: usize) -> f64 {
    100.0 * ratio(c.tp[k], c.tp[k] + c.fn_[k])
}

fn averaged(c: &ConfusionCounts, include_background: bool, f: fn(&ConfusionCounts, usize) -> f64) -> f64 {
    let start = if include_background { 0 } else { 1 };
    let ks: Vec<usize> = (start..c.classes()).collect();
    if ks.is_empty() {
        return 100.0;
    }
    ks.iter().map(|&k| f(c, k)).sum::<f64>() / ks.len() as f64
}

/// Mean foreground IoU.
pub fn miou(c: &ConfusionCounts) -> f64 {
    averaged(c, false, class_iou)
}

/// Mean foreground Dice.
pub fn dice(c: &ConfusionCounts) -> f64 {
    averaged(c, false, class_dice)
}

/// Mean foreground recall.
pub fn recall(c: &ConfusionCounts) -> f64 {
    averaged(c, false, class_recall)
}

/// Voxel accuracy over all classes.
pub fn accuracy(c: &ConfusionCounts) -> f64 {
    100.0 * ratio(c.correct(), c.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub iou: f64,
    pub dice: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "Dice")]
    pub dice: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "Acc")]
    pub accuracy: f64,
    pub per_class: BTreeMap<String, ClassScores>,
}

impl Scores {
    pub fn from_counts(c: &ConfusionCounts, include_background: bool) -> Self {
        let per_class = (0..c.classes())
            .map(|k| {
                (
                    k.to_string(),
                    ClassScores {
                        iou: class_iou(c, k),
                        dice: class_dice(c, k),
                        recall: class_recall(c, k),
                    },
                )
            })
            .collect();
        Scores {
            miou: averaged(c, include_background, class_iou),
            dice: averaged(c, include_background, class_dice),
            recall: averaged(c, include_background, class_recall),
            accuracy: accuracy(c),
            per_class,
        }
    }

    /// Unweighted mean over cases.
    pub fn mean(all: &[Scores]) -> Option<Scores> {
        let first = all.first()?;
        let n = all.len() as f64;
        let avg = |f: &dyn Fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
        let per_class = first
            .per_class
            .keys()
            .map(|k| {
                (
                    k.clone(),
                    ClassScores {
                        iou: avg(&|s| s.per_class[k].iou),
                        dice: avg(&|s| s.per_class[k].dice),
                        recall: avg(&|s| s.per_class[k].recall),
                    },
                )
            })
            .collect();
        Some(Scores {
            miou: avg(&|s| s.miou),
            dice: avg(&|s| s.dice),
            recall: avg(&|s| s.recall),
            accuracy: avg(&|s| s.accuracy),
            per_class,
        })
    }
}
