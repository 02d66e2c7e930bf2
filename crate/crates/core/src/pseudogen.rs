//! Online pseudo-supervision: iterative refinement of a weak image's
//! detections until they are stable for three consecutive iterations, and the
//! semi-strong pool that collects the confidently annotated images.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{decode_offset, iou, nms, BBox, Detection, Offset};
use crate::netcore::{IntegralImage, ModelParams};
use crate::oam_losses::assign_targets;
use crate::synthworld::{GtObject, SceneRecord, Tier};

/// Class probabilities (`C+1`, index 0 background) and per-class offsets for
/// one input box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPrediction {
    pub probs: Vec<f64>,
    pub offsets: Vec<Offset>,
}

/// Anything that scores and regresses arbitrary boxes of an image.
pub trait BoxPredictor {
    fn classes(&self) -> usize;
    fn predict(&self, scene: &SceneRecord, integral: &IntegralImage, boxes: &[BBox]) -> Result<Vec<BoxPrediction>>;
}

/// The annotation branch's classification and regression heads.
#[derive(Debug, Clone, Copy)]
pub struct OamPredictor<'a> {
    pub params: &'a ModelParams,
}

impl BoxPredictor for OamPredictor<'_> {
    fn classes(&self) -> usize {
        self.params.classes()
    }

    fn predict(&self, _scene: &SceneRecord, integral: &IntegralImage, boxes: &[BBox]) -> Result<Vec<BoxPrediction>> {
        let s = self.params.config.pool_size;
        let features = boxes.iter().map(|b| integral.pool(b, s)).collect::<Result<Vec<_>>>()?;
        let fwd = self.params.oam_forward(&features);
        let c = self.classes();
        Ok((0..boxes.len())
            .map(|r| BoxPrediction {
                probs: fwd.probs(r).to_vec(),
                offsets: (0..c).map(|k| Offset::from_slice(fwd.offset(r, k))).collect(),
            })
            .collect())
    }
}

/// Frozen perfect detector: a box matching a ground-truth object at IoU >=
/// `fg_iou` is classified as that object with probability 1 and regressed
/// exactly onto it; anything else is background.
#[derive(Debug, Clone, Copy)]
pub struct GtOracle {
    pub classes: usize,
    pub fg_iou: f64,
}

impl BoxPredictor for GtOracle {
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, scene: &SceneRecord, _integral: &IntegralImage, boxes: &[BBox]) -> Result<Vec<BoxPrediction>> {
        let targets = assign_targets(boxes, &scene.gt, self.fg_iou);
        Ok(targets
            .iter()
            .map(|t| {
                let mut probs = vec![0.0; self.classes + 1];
                probs[t.class] = 1.0;
                let mut offsets = vec![Offset::ZERO; self.classes];
                if let Some(v) = t.offset {
                    offsets[t.class - 1] = v;
                }
                BoxPrediction { probs, offsets }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    /// Maximum refinement iterations (K).
    pub max_iters: usize,
    /// Consecutive stable iterations required.
    pub stable_iters: usize,
    pub nms_iou: f64,
    /// IoU at which two same-class boxes count as the same object.
    pub match_iou: f64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self { max_iters: 30, stable_iters: 3, nms_iou: 0.5, match_iou: 0.5 }
    }
}

/// One refinement step: classify `boxes`, keep proposals whose arg-max class
/// is a labeled foreground class, move them by that class's offsets, clip and
/// suppress.
pub fn refine<P: BoxPredictor + ?Sized>(
    predictor: &P,
    scene: &SceneRecord,
    integral: &IntegralImage,
    boxes: &[BBox],
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let preds = predictor.predict(scene, integral, boxes)?;
    let (w, h) = (integral.width() as f64, integral.height() as f64);
    let mut dets = Vec::new();
    for (b, p) in boxes.iter().zip(&preds) {
        let best = (0..p.probs.len()).max_by(|&i, &j| p.probs[i].total_cmp(&p.probs[j]).then(j.cmp(&i))).unwrap_or(0);
        if best == 0 || !scene.has_label(best - 1) {
            continue;
        }
        let class = best - 1;
        if let Some(moved) = decode_offset(b, &p.offsets[class]).clip(w, h) {
            dets.push(Detection::new(class, moved, p.probs[best].clamp(0.0, 1.0)));
        }
    }
    Ok(nms(&dets, nms_iou))
}

/// Same-size sets whose boxes pair up one-to-one, greedily by descending IoU,
/// with matching classes and IoU >= `match_iou`.
pub fn converged(current: &[Detection], previous: &[Detection], match_iou: f64) -> bool {
    if current.len() != previous.len() {
        return false;
    }
    let mut pairs = Vec::new();
    for (i, a) in current.iter().enumerate() {
        for (j, b) in previous.iter().enumerate() {
            if a.class_id == b.class_id {
                let v = iou(&a.bbox, &b.bbox);
                if v >= match_iou {
                    pairs.push((v, i, j));
                }
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used_cur = vec![false; current.len()];
    let mut used_prev = vec![false; previous.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !used_cur[i] && !used_prev[j] {
            used_cur[i] = true;
            used_prev[j] = true;
            matched += 1;
        }
    }
    matched == current.len()
}

/// Per-box mean, over `history`, of the best same-class IoU in each
/// iteration, counting IoU below `match_iou` as zero.
pub fn average_overlap(initial: &[Detection], history: &[Vec<Detection>], match_iou: f64) -> Vec<f64> {
    initial
        .iter()
        .map(|d| {
            if history.is_empty() {
                return 0.0;
            }
            let total: f64 = history
                .iter()
                .map(|set| {
                    let best = set
                        .iter()
                        .filter(|o| o.class_id == d.class_id)
                        .map(|o| iou(&d.bbox, &o.bbox))
                        .fold(0.0, f64::max);
                    if best >= match_iou {
                        best
                    } else {
                        0.0
                    }
                })
                .sum();
            total / history.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoBox {
    pub class_id: usize,
    pub bbox: BBox,
    /// Box-level confidence in `[0, 1]`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiStrongEntry {
    pub image_id: usize,
    pub boxes: Vec<PseudoBox>,
    /// First of the stable iterations.
    pub t: usize,
    /// Epoch in which the entry was (re)generated.
    pub epoch: usize,
}

impl SemiStrongEntry {
    /// Image-level confidence `1 / T`.
    pub fn global_weight(&self) -> f64 {
        1.0 / self.t as f64
    }

    pub fn as_ground_truth(&self) -> Vec<GtObject> {
        self.boxes.iter().map(|b| GtObject { class_id: b.class_id, bbox: b.bbox }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    NoDetections,
    NoConvergence,
    ClassMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnnotationOutcome {
    Accepted(SemiStrongEntry),
    Rejected(Rejection),
}

/// Iterative pseudo-annotation of one weak image.
///
/// The initial set comes from refining the image's own proposals. Each
/// iteration `t = 1..=K` refines the previous set's boxes; after three
/// consecutive iterations equal to their predecessor (per [`converged`]),
/// `T = t + 1 - 3`. The initial boxes become the annotation, weighted by their
/// average overlap with every later iteration, with image weight `1 / T`.
pub fn generate_annotation<P: BoxPredictor + ?Sized>(
    scene: &SceneRecord,
    integral: &IntegralImage,
    predictor: &P,
    cfg: &AnnotationConfig,
) -> Result<AnnotationOutcome> {
    debug_assert_eq!(scene.tier, Tier::Weak, "only weak images are pseudo-annotated");
    let initial = refine(predictor, scene, integral, &scene.proposals.boxes, cfg.nms_iou)?;
    if initial.is_empty() {
        return Ok(AnnotationOutcome::Rejected(Rejection::NoDetections));
    }
    let mut previous = initial.clone();
    let mut history: Vec<Vec<Detection>> = Vec::new();
    let mut counter = 0;
    let mut first_stable = None;
    for t in 1..=cfg.max_iters {
        let boxes: Vec<BBox> = previous.iter().map(|d| d.bbox).collect();
        let current = refine(predictor, scene, integral, &boxes, cfg.nms_iou)?;
        if current.is_empty() {
            return Ok(AnnotationOutcome::Rejected(Rejection::NoDetections));
        }
        let stable = converged(&current, &previous, cfg.match_iou);
        history.push(current.clone());
        if stable {
            counter += 1;
            if counter == cfg.stable_iters {
                first_stable = Some(t + 1 - counter);
                break;
            }
        } else {
            counter = 0;
        }
        previous = current;
    }
    let Some(t) = first_stable else {
        return Ok(AnnotationOutcome::Rejected(Rejection::NoConvergence));
    };
    if !scene.labels.iter().all(|&c| initial.iter().any(|d| d.class_id == c)) {
        return Ok(AnnotationOutcome::Rejected(Rejection::ClassMismatch));
    }
    let weights = average_overlap(&initial, &history, cfg.match_iou);
    let boxes = initial
        .iter()
        .zip(weights)
        .map(|(d, w)| PseudoBox { class_id: d.class_id, bbox: d.bbox, weight: w.clamp(0.0, 1.0) })
        .collect();
    Ok(AnnotationOutcome::Accepted(SemiStrongEntry { image_id: scene.id, boxes, t, epoch: 0 }))
}

/// Confidently annotated weak images, keyed by image id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SemiStrongPool {
    entries: BTreeMap<usize, SemiStrongEntry>,
}

impl SemiStrongPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: usize) -> Option<&SemiStrongEntry> {
        self.entries.get(&image_id)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &SemiStrongEntry> {
        self.entries.values()
    }

    /// Accept inserts or replaces (stamping `epoch`); reject evicts. Returns
    /// the change in pool size.
    pub fn update(&mut self, image_id: usize, outcome: &AnnotationOutcome, epoch: usize) -> i64 {
        match outcome {
            AnnotationOutcome::Accepted(entry) => {
                let mut entry = entry.clone();
                entry.image_id = image_id;
                entry.epoch = epoch;
                if self.entries.insert(image_id, entry).is_some() {
                    0
                } else {
                    1
                }
            }
            AnnotationOutcome::Rejected(_) => -(self.entries.remove(&image_id).is_some() as i64),
        }
    }
}

/// Per-epoch pool export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub epoch: usize,
    pub size: usize,
    /// `size / |weak images|`.
    pub fraction: f64,
    pub attempts: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<Rejection, usize>,
    /// Histogram of `T` over the pool's entries.
    pub t_histogram: BTreeMap<usize, usize>,
}

impl PoolSnapshot {
    pub fn of(pool: &SemiStrongPool, epoch: usize, n_weak: usize) -> Self {
        let mut t_histogram = BTreeMap::new();
        for e in pool.entries() {
            *t_histogram.entry(e.t).or_insert(0) += 1;
        }
        Self {
            epoch,
            size: pool.len(),
            fraction: if n_weak == 0 { 0.0 } else { pool.len() as f64 / n_weak as f64 },
            attempts: 0,
            accepted: 0,
            rejected: BTreeMap::new(),
            t_histogram,
        }
    }
}
