//! Detection metrics: per-class average precision, mAP at IoU 0.5 and AP
//! averaged over IoU thresholds 0.50, 0.55, ..., 0.95.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{argsort_desc, iou, BBox, Detection};
use crate::netcore::IntegralImage;
use crate::pseudogen::BoxPredictor;
use crate::supervised::{detect, DetectConfig};
use crate::synthworld::{GtObject, SceneRecord};

/// A detection of one class tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// A ground-truth box of one class tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: BBox,
}

/// Average precision of one class's detections against its ground truth.
///
/// Detections are visited by descending score (input index breaks ties);
/// each claims the highest-IoU still-unmatched ground-truth box of its image
/// and is a true positive iff that IoU reaches `iou_threshold`. AP is the
/// area under the precision envelope over recall. `None` when there is no
/// ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(j);
    }
    let mut matched = vec![false; gts.len()];
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for i in argsort_desc(&scores) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for &j in by_image.get(&d.image).map(Vec::as_slice).unwrap_or(&[]) {
            if matched[j] {
                continue;
            }
            let v = iou(&d.bbox, &gts[j].bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let hit = match best {
            Some((j, v)) if v >= iou_threshold => {
                matched[j] = true;
                true
            }
            _ => false,
        };
        tp_flags.push(hit);
    }
    Some(area_under_envelope(&tp_flags, gts.len()))
}

/// Continuous-area AP from the ranked true-positive flags.
fn area_under_envelope(tp_flags: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap.clamp(0.0, 1.0)
}

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub gt_count: usize,
    pub detections: usize,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub images: usize,
    pub map50: f64,
    pub ap50_95: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes without ground truth, left out of the means.
    pub excluded_classes: Vec<usize>,
}

impl Metrics {
    pub fn write_json(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let doc = serde_json::json!({ "meta": meta, "metrics": self });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(path, e))
    }

    /// One row per class plus a final `mean` row.
    pub fn write_csv<W: Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class", "gt_count", "detections", "ap50", "ap50_95"])?;
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for c in &self.per_class {
            out.write_record([
                c.class_id.to_string(),
                c.gt_count.to_string(),
                c.detections.to_string(),
                fmt(c.ap50),
                fmt(c.ap50_95),
            ])?;
        }
        out.write_record(["mean".into(), String::new(), String::new(), fmt(Some(self.map50)), fmt(Some(self.ap50_95))])?;
        out.flush()?;
        Ok(())
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Metrics of per-image detections against per-image ground truth.
pub fn evaluate_detections(dets: &[Vec<Detection>], gts: &[Vec<GtObject>], classes: usize) -> Metrics {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let thresholds = coco_thresholds();
    let mut per_class = Vec::with_capacity(classes);
    let mut excluded = Vec::new();
    for c in 0..classes {
        let cd: Vec<ScoredBox> = dets
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| {
                ds.iter().filter(|d| d.class_id == c).map(move |d| ScoredBox { image, bbox: d.bbox, score: d.score })
            })
            .collect();
        let cg: Vec<GtBox> = gts
            .iter()
            .enumerate()
            .flat_map(|(image, gs)| gs.iter().filter(|g| g.class_id == c).map(move |g| GtBox { image, bbox: g.bbox }))
            .collect();
        let aps: Vec<Option<f64>> = thresholds.iter().map(|&t| average_precision(&cd, &cg, t)).collect();
        if cg.is_empty() {
            log::warn!("class {c} has no ground truth; excluded from the mean");
            excluded.push(c);
        }
        per_class.push(ClassMetrics {
            class_id: c,
            gt_count: cg.len(),
            detections: cd.len(),
            ap50: aps[0],
            ap50_95: aps[0].map(|_| mean_defined(aps.iter().copied())),
        });
    }
    Metrics {
        images: dets.len(),
        map50: mean_defined(per_class.iter().map(|c| c.ap50)),
        ap50_95: mean_defined(per_class.iter().map(|c| c.ap50_95)),
        per_class,
        excluded_classes: excluded,
    }
}

/// Runs `predictor` over `scenes` and scores the result.
pub fn evaluate<P: BoxPredictor + ?Sized>(predictor: &P, scenes: &[SceneRecord], cfg: &DetectConfig) -> Result<Metrics> {
    let mut dets = Vec::with_capacity(scenes.len());
    for s in scenes {
        let ii = IntegralImage::new(&s.grid);
        dets.push(detect(predictor, s, &ii, cfg)?);
    }
    let gts: Vec<Vec<GtObject>> = scenes.iter().map(|s| s.gt.clone()).collect();
    Ok(evaluate_detections(&dets, &gts, predictor.classes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sb(image: usize, bbox: BBox, score: f64) -> ScoredBox {
        ScoredBox { image, bbox, score }
    }

    #[test]
    fn exact_detections_score_one() {
        let g = [GtBox { image: 0, bbox: b(0., 0., 5., 5.) }, GtBox { image: 1, bbox: b(2., 2., 9., 9.) }];
        let d = [sb(0, g[0].bbox, 0.9), sb(1, g[1].bbox, 0.8)];
        assert_eq!(average_precision(&d, &g, 0.5), Some(1.0));
    }

    #[test]
    fn no_detections_score_zero_and_no_gt_is_undefined() {
        let g = [GtBox { image: 0, bbox: b(0., 0., 5., 5.) }];
        assert_eq!(average_precision(&[], &g, 0.5), Some(0.0));
        assert_eq!(average_precision(&[sb(0, b(0., 0., 1., 1.), 0.3)], &[], 0.5), None);
    }

    #[test]
    fn order_of_tp_and_fp_matters() {
        let g = [GtBox { image: 0, bbox: b(0., 0., 10., 10.) }];
        let tp = sb(0, b(0., 0., 10., 10.), 0.9);
        let fp = sb(0, b(20., 20., 30., 30.), 0.5);
        assert!((average_precision(&[tp, fp], &g, 0.5).unwrap() - 1.0).abs() < 1e-12);
        let tp_low = ScoredBox { score: 0.4, ..tp };
        assert!((average_precision(&[tp_low, fp], &g, 0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicates_count_once() {
        let g = [GtBox { image: 0, bbox: b(0., 0., 10., 10.) }, GtBox { image: 0, bbox: b(50., 50., 60., 60.) }];
        let d = [sb(0, b(0., 0., 10., 10.), 0.9), sb(0, b(0., 0., 10., 10.5), 0.8)];
        // TP then FP; recall caps at 0.5
        assert!((average_precision(&d, &g, 0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn excluded_classes_leave_the_mean() {
        let gts = vec![vec![GtObject { class_id: 0, bbox: b(0., 0., 8., 8.) }]];
        let dets = vec![vec![Detection::new(0, b(0., 0., 8., 8.), 0.7), Detection::new(1, b(9., 9., 12., 12.), 0.9)]];
        let m = evaluate_detections(&dets, &gts, 2);
        assert_eq!(m.excluded_classes, vec![1]);
        assert_eq!(m.map50, 1.0);
        assert_eq!(m.ap50_95, 1.0);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(2).unwrap().starts_with("1,0,1,,"));
        assert!(text.ends_with("mean,,,1.000000,1.000000\n"));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<ScoredBox>, Vec<GtBox>)> {
        let bx = (0.0..20.0f64, 0.0..20.0f64, 2.0..10.0f64, 2.0..10.0f64).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h));
        (
            prop::collection::vec((0usize..3, bx.clone(), 0.0..1.0f64).prop_map(|(i, bb, s)| sb(i, bb, s)), 0..10),
            prop::collection::vec((0usize..3, bx).prop_map(|(image, bbox)| GtBox { image, bbox }), 1..6),
        )
    }

    proptest! {
        #[test]
        fn ap_is_bounded((d, g) in arb_case(), thr in 0.3..0.9f64) {
            let ap = average_precision(&d, &g, thr).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn adding_a_correct_detection_never_hurts((d, g) in arb_case(), pick in 0usize..6, score in 0.0..1.0f64) {
            // the added box is exact; it only claims a gt nobody else could match
            let j = pick % g.len();
            let target = g[j];
            let claimed = d.iter().any(|x| x.image == target.image && iou(&x.bbox, &target.bbox) >= 0.5);
            prop_assume!(!claimed);
            let before = average_precision(&d, &g, 0.5).unwrap();
            let mut more = d.clone();
            more.push(sb(target.image, target.bbox, score));
            let after = average_precision(&more, &g, 0.5).unwrap();
            prop_assert!(after >= before - 1e-12, "{before} -> {after}");
        }
    }
}
