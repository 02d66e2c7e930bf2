//! Axis-aligned boxes, IoU, per-class NMS, offset encoding and the smooth L1
//! primitive shared by both detection branches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest log-space scale offset accepted by [`decode_offset`].
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Axis-aligned rectangle in continuous image coordinates.
///
/// Stored as corners with `x1 < x2` and `y1 < y2`. Pixel `(row i, col j)` has its
/// center at `(j + 0.5, i + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clips to `[0, width] x [0, height]`; `None` when nothing of positive extent remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .ok()
    }

    pub fn is_inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// Regression target `(t_x, t_y, t_h, t_w)` of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub tx: f64,
    pub ty: f64,
    pub th: f64,
    pub tw: f64,
}

impl Offset {
    pub const ZERO: Offset = Offset { tx: 0.0, ty: 0.0, th: 0.0, tw: 0.0 };

    pub fn new(tx: f64, ty: f64, th: f64, tw: f64) -> Self {
        Self { tx, ty, th, tw }
    }

    /// Component order used by the regression heads.
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.th, self.tw]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { tx: v[0], ty: v[1], th: v[2], tw: v[3] }
    }
}

/// A scored, classified box. `class_id` indexes foreground classes from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(class_id: usize, bbox: BBox, score: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0,1]");
        Self { class_id, bbox, score }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `scores` in descending order, ties broken by ascending index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy per-class non-maximum suppression.
///
/// A detection is dropped when a higher-scoring kept detection of the same
/// class overlaps it with IoU strictly above `iou_threshold`. The result is
/// sorted by descending score (input order breaks ties).
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<Detection> = Vec::new();
    for i in argsort_desc(&scores) {
        let cand = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

pub fn encode_offset(anchor: &BBox, target: &BBox) -> Offset {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Offset {
        tx: (tx - ax) / aw,
        ty: (ty - ay) / ah,
        th: (target.height() / ah).ln(),
        tw: (target.width() / aw).ln(),
    }
}

/// Inverse of [`encode_offset`]. Scale offsets are clamped to
/// `±MAX_LOG_SCALE` so the decoded box always has finite positive extent.
pub fn decode_offset(anchor: &BBox, t: &Offset) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + t.tx * aw;
    let cy = ay + t.ty * ah;
    let w = aw * t.tw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ah * t.th.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox::from_center_size(cx, cy, w, h).unwrap_or(*anchor)
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
