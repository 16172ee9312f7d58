//! Segmentation metrics over the field of view: confusion counts,
//! sensitivity / specificity / accuracy, ROC sweep and AUC.

use std::fmt;

use crate::error::{EvalError, ShapeError};
use crate::raster::{BinaryMask, GrayImage};

/// Default operating point for binary predictions.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// A ratio metric; `Undefined` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Metric::Undefined
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.4}"),
            Metric::Undefined => f.write_str("undefined"),
        }
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// TP / (TP + FN).
    pub fn sn(&self) -> Metric {
        Metric::ratio(self.tp, self.tp + self.fn_)
    }

    /// TN / (TN + FP).
    pub fn sp(&self) -> Metric {
        Metric::ratio(self.tn, self.tn + self.fp)
    }

    /// (TP + TN) / (TP + FP + TN + FN).
    pub fn acc(&self) -> Metric {
        Metric::ratio(self.tp + self.tn, self.total())
    }

    pub fn tpr(&self) -> Metric {
        self.sn()
    }

    /// FP / (FP + TN).
    pub fn fpr(&self) -> Metric {
        Metric::ratio(self.fp, self.fp + self.tn)
    }
}

fn same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<(), ShapeError> {
    if a != b {
        return Err(ShapeError::new(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// Counts over pixels with `fov = 1`.
pub fn confusion(pred: &BinaryMask, truth: &BinaryMask, fov: &BinaryMask) -> Result<ConfusionCounts, EvalError> {
    same_shape(pred.dims(), truth.dims(), "prediction vs truth")?;
    same_shape(pred.dims(), fov.dims(), "prediction vs fov")?;
    let mut c = ConfusionCounts::default();
    for ((&p, &t), &m) in pred.as_slice().iter().zip(truth.as_slice()).zip(fov.as_slice()) {
        if m == 0 {
            continue;
        }
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `prob >= threshold` as a mask.
pub fn binarize(prob: &GrayImage, threshold: f32) -> BinaryMask {
    let data = prob.as_slice().iter().map(|&p| u8::from(p >= threshold)).collect();
    BinaryMask::from_vec(prob.width(), prob.height(), data).expect("same size")
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThresholdStrategy {
    /// Every distinct probability value: the exact empirical curve.
    #[default]
    AllDistinct,
    /// `K` evenly spaced thresholds from 1 down to 0.
    Grid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Pixels with `prob >= threshold` count as positive; the leading point
    /// uses `+inf`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points ordered by decreasing threshold, from (0, 0) to (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

fn scored_pixels(prob: &GrayImage, truth: &BinaryMask, fov: &BinaryMask) -> Result<Vec<(f64, bool)>, EvalError> {
    same_shape(prob.dims(), truth.dims(), "probabilities vs truth")?;
    same_shape(prob.dims(), fov.dims(), "probabilities vs fov")?;
    let px: Vec<(f64, bool)> = prob
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .zip(fov.as_slice())
        .filter(|(_, &m)| m != 0)
        .map(|((&p, &t), _)| (f64::from(p), t != 0))
        .collect();
    if px.is_empty() {
        return Err(EvalError::EmptyFov);
    }
    let positives = px.iter().filter(|p| p.1).count();
    let negatives = px.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    Ok(px)
}

pub fn roc(
    prob: &GrayImage,
    truth: &BinaryMask,
    fov: &BinaryMask,
    strategy: ThresholdStrategy,
) -> Result<RocCurve, EvalError> {
    let mut px = scored_pixels(prob, truth, fov)?;
    px.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = px.iter().filter(|p| p.1).count();
    let neg = px.len() - pos;
    let (pf, nf) = (pos as f64, neg as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    let advance_to = |t: f64, tp: &mut usize, fp: &mut usize, i: &mut usize| {
        while *i < px.len() && px[*i].0 >= t {
            if px[*i].1 {
                *tp += 1;
            } else {
                *fp += 1;
            }
            *i += 1;
        }
    };
    match strategy {
        ThresholdStrategy::AllDistinct => {
            while i < px.len() {
                let t = px[i].0;
                advance_to(t, &mut tp, &mut fp, &mut i);
                points.push(RocPoint {
                    threshold: t,
                    fpr: fp as f64 / nf,
                    tpr: tp as f64 / pf,
                });
            }
        }
        ThresholdStrategy::Grid(k) => {
            let k = k.max(2);
            for j in 0..k {
                let t = 1.0 - j as f64 / (k - 1) as f64;
                // The last grid threshold must admit every pixel.
                let t = if j == k - 1 { f64::NEG_INFINITY } else { t };
                advance_to(t, &mut tp, &mut fp, &mut i);
                points.push(RocPoint {
                    threshold: t.max(0.0),
                    fpr: fp as f64 / nf,
                    tpr: tp as f64 / pf,
                });
            }
        }
    }
    Ok(RocCurve {
        points,
        positives: pos,
        negatives: neg,
    })
}

/// Trapezoidal area under a ROC curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Mann-Whitney estimate: the probability that a random vessel pixel scores
/// above a random background pixel, ties counted one half.
pub fn auc_rank(prob: &GrayImage, truth: &BinaryMask, fov: &BinaryMask) -> Result<f64, EvalError> {
    let mut px = scored_pixels(prob, truth, fov)?;
    px.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mid-ranks, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < px.len() {
        let mut j = i;
        while j < px.len() && px[j].0 == px[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += mid * px[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let pos = px.iter().filter(|p| p.1).count() as f64;
    let neg = px.len() as f64 - pos;
    let u = rank_sum_pos - pos * (pos + 1.0) / 2.0;
    Ok(u / (pos * neg))
}

/// Metrics of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageReport {
    pub image_id: String,
    pub counts: ConfusionCounts,
    pub auc: Option<f64>,
}

impl ImageReport {
    pub fn evaluate(
        image_id: impl Into<String>,
        prob: &GrayImage,
        truth: &BinaryMask,
        fov: &BinaryMask,
        threshold: f32,
        strategy: ThresholdStrategy,
    ) -> Result<(Self, Option<RocCurve>), EvalError> {
        let counts = confusion(&binarize(prob, threshold), truth, fov)?;
        if counts.total() == 0 {
            return Err(EvalError::EmptyFov);
        }
        let curve = match roc(prob, truth, fov, strategy) {
            Ok(c) => Some(c),
            Err(EvalError::SingleClass { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok((
            Self {
                image_id: image_id.into(),
                counts,
                auc: curve.as_ref().map(auc),
            },
            curve,
        ))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = xs.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `image_id,Sn,Sp,Acc,AUC` with one row per image followed by a `mean`
/// row (averaging the defined values of each column, in image order).
pub fn report_csv(reports: &[ImageReport]) -> String {
    let mut out = String::from("image_id,Sn,Sp,Acc,AUC\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.image_id,
            r.counts.sn(),
            r.counts.sp(),
            r.counts.acc(),
            fmt_opt(r.auc)
        ));
    }
    if !reports.is_empty() {
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            fmt_opt(mean_defined(reports.iter().map(|r| r.counts.sn().value()))),
            fmt_opt(mean_defined(reports.iter().map(|r| r.counts.sp().value()))),
            fmt_opt(mean_defined(reports.iter().map(|r| r.counts.acc().value()))),
            fmt_opt(mean_defined(reports.iter().map(|r| r.auc))),
        ));
    }
    out
}

/// `threshold,fpr,tpr` rows.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}
