//! Pixel confusion counts and the F1 / IoU / Dice metrics built on them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Prediction and ground truth are both empty.
    pub fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn precision(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// `TP / (TP + FN + FP)`
    pub fn iou(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fn_ + self.fp)
    }

    /// `2 TP / (2 TP + FN + FP)`
    pub fn dice(&self) -> f64 {
        self.ratio(2 * self.tp, 2 * self.tp + self.fn_ + self.fp)
    }

    /// 0/0 is 1 when nothing was predicted or annotated, otherwise 0.
    fn ratio(&self, num: u64, den: u64) -> f64 {
        if den == 0 {
            if self.both_empty() {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Pool counts over the dataset, then apply the formulas once.
    #[default]
    Micro,
    /// Apply the formulas per image, then average.
    Macro,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Micro => "micro",
            Aggregation::Macro => "macro",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "macro" => Ok(Aggregation::Macro),
            _ => Err(Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    pub aggregation: Aggregation,
    pub n_images: usize,
}

fn is_binary<T: Real>(v: T) -> bool {
    v == T::zero() || v == T::one()
}

/// Pixelwise tallies over the whole tensor.
pub fn confusion<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    count(pred.data(), gt.data())
}

fn count<T: Real>(pred: &[T], gt: &[T]) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if !is_binary(p) || !is_binary(g) {
            return Err(Error::NonBinaryInput(format!("found values {p:?} / {g:?}")));
        }
        match (p == T::one(), g == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// One [`ConfusionCounts`] per batch item.
pub fn confusion_per_image<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<ConfusionCounts>> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    par::map_indexed(pred.batch(), |b| count(pred.item(b), gt.item(b)))
        .into_iter()
        .collect()
}

pub fn compute_metrics(counts: &[ConfusionCounts], aggregation: Aggregation) -> Result<MetricReport> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("no images to score".into()));
    }
    let (f1, iou, dice) = match aggregation {
        Aggregation::Micro => {
            let c: ConfusionCounts = counts.iter().copied().sum();
            (c.f1(), c.iou(), c.dice())
        }
        Aggregation::Macro => {
            let n = counts.len() as f64;
            let (f, i, d) = counts
                .iter()
                .fold((0.0, 0.0, 0.0), |(f, i, d), c| (f + c.f1(), i + c.iou(), d + c.dice()));
            (f / n, i / n, d / n)
        }
    };
    Ok(MetricReport {
        f1,
        iou,
        dice,
        aggregation,
        n_images: counts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec([1, 1, 2, v.len() / 2], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_two_by_two() {
        let c = confusion(&mask(&[1.0, 1.0, 0.0, 0.0]), &mask(&[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        let r = compute_metrics(&[c], Aggregation::Micro).unwrap();
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.dice - 0.5).abs() < 1e-15);
        assert!((r.f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_and_complement() {
        let a = mask(&[1.0, 0.0, 1.0, 1.0]);
        let c = confusion(&a, &a).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let na = a.map(|v| 1.0 - v);
        let c = confusion(&na, &a).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn rejects_non_binary() {
        let a = mask(&[1.0, 0.5, 0.0, 0.0]);
        assert!(matches!(confusion(&a, &a), Err(Error::NonBinaryInput(_))));
    }

    #[test]
    fn empty_vs_empty_scores_one() {
        let c = ConfusionCounts {
            tn: 9,
            ..Default::default()
        };
        for agg in [Aggregation::Micro, Aggregation::Macro] {
            let r = compute_metrics(&[c, c], agg).unwrap();
            assert_eq!((r.f1, r.iou, r.dice), (1.0, 1.0, 1.0));
        }
        // Missing every positive is a zero, not a one.
        let miss = ConfusionCounts {
            fn_: 3,
            tn: 6,
            ..Default::default()
        };
        assert_eq!(miss.f1(), 0.0);
        assert_eq!(miss.iou(), 0.0);
    }

    #[test]
    fn macro_averages_per_image() {
        let perfect = ConfusionCounts {
            tp: 4,
            tn: 4,
            ..Default::default()
        };
        let half = ConfusionCounts {
            tp: 1,
            fp: 1,
            fn_: 1,
            tn: 1,
        };
        let r = compute_metrics(&[perfect, half], Aggregation::Macro).unwrap();
        assert!((r.dice - 0.75).abs() < 1e-15);
        assert!(compute_metrics(&[], Aggregation::Micro).is_err());
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
    }

    proptest! {
        #[test]
        fn iou_below_dice_within_unit_interval(c in counts()) {
            let (iou, dice, f1) = (c.iou(), c.dice(), c.f1());
            prop_assert!(0.0 <= iou && iou <= dice && dice <= 1.0);
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn micro_dice_iou_identity(cs in proptest::collection::vec(counts(), 1..8)) {
            let r = compute_metrics(&cs, Aggregation::Micro).unwrap();
            prop_assert!((r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
        }
    }
}
