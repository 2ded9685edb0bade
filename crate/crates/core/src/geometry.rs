//! Axis-aligned box arithmetic: IoU, soft targets from overlap, the
//! center/log-size regression parameterization and Smooth-L1.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Axis-aligned box with `x_max > x_min` and `y_max > y_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(contract(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }
}

/// Intersection over union; 0 for disjoint or edge-touching boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// How qualifying candidates are weighted before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapWeight {
    /// Weight proportional to IoU.
    #[default]
    Iou,
    SquaredIou,
    /// Every qualifying candidate gets equal mass.
    Uniform,
}

impl OverlapWeight {
    fn apply(self, iou: f64) -> f64 {
        match self {
            OverlapWeight::Iou => iou,
            OverlapWeight::SquaredIou => iou * iou,
            OverlapWeight::Uniform => 1.0,
        }
    }
}

/// Rule turning candidate overlaps into a target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetRule {
    pub threshold: f64,
    pub weight: OverlapWeight,
    /// One-hot on the best-overlapping candidate when none clears the
    /// threshold. When false such phrases get no target.
    pub fallback_to_best: bool,
}

impl Default for TargetRule {
    fn default() -> Self {
        TargetRule {
            threshold: 0.5,
            weight: OverlapWeight::Iou,
            fallback_to_best: true,
        }
    }
}

/// First index of the largest IoU.
pub fn best_overlap(candidates: &[BBox], gold: &BBox) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in candidates.iter().enumerate() {
        let v = iou(c, gold);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best
}

/// Target distribution from overlaps under an explicit rule.
pub fn soft_targets_with(candidates: &[BBox], gold: &BBox, rule: &TargetRule) -> Option<Vec<f64>> {
    let ious: Vec<f64> = candidates.iter().map(|c| iou(c, gold)).collect();
    targets_from_overlaps(&ious, rule)
}

/// Target distribution from precomputed overlaps.
pub fn targets_from_overlaps(ious: &[f64], rule: &TargetRule) -> Option<Vec<f64>> {
    if ious.is_empty() {
        return None;
    }
    let mut w: Vec<f64> = ious
        .iter()
        .map(|&v| {
            if v >= rule.threshold && v > 0.0 {
                rule.weight.apply(v)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
        return Some(w);
    }
    if !rule.fallback_to_best {
        return None;
    }
    let best = crate::numkernel::argmax(ious.iter().copied());
    let mut one_hot = vec![0.0; ious.len()];
    one_hot[best] = 1.0;
    Some(one_hot)
}

/// IoU-weighted targets over candidates with `IoU >= threshold`, falling
/// back to one-hot on the best-overlapping candidate.
///
/// # Panics
/// If `candidates` is empty.
pub fn soft_targets(candidates: &[BBox], gold: &BBox, threshold: f64) -> Vec<f64> {
    assert!(!candidates.is_empty(), "soft_targets needs at least one candidate");
    let rule = TargetRule {
        threshold,
        ..TargetRule::default()
    };
    soft_targets_with(candidates, gold, &rule).expect("fallback always yields a target")
}

/// Offsets of `gold` relative to `anchor`: normalized center shift and log
/// size ratio, `[dx, dy, dw, dh]`.
pub fn encode_box_deltas(gold: &BBox, anchor: &BBox) -> [f64; 4] {
    let (gx, gy) = gold.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gold.width() / aw).ln(),
        (gold.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box_deltas`].
pub fn decode_box_deltas(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].exp();
    let h = ah * deltas[3].exp();
    BBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`].
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn regression_loss(predicted: &[f64; 4], target: &[f64; 4]) -> f64 {
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1(p - t))
        .sum()
}

/// Gradient of [`regression_loss`] with respect to `predicted`.
pub fn regression_loss_grad(predicted: &[f64; 4], target: &[f64; 4]) -> [f64; 4] {
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = smooth_l1_grad(predicted[i] - target[i]);
    }
    g
}
