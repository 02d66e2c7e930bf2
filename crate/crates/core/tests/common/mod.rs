//! Helpers shared by the integration tests: a central finite-difference
//! gradient checker, exhaustive reference implementations of NMS, detection
//! and average precision, and the hand-built oracle checkpoint.

#![allow(dead_code)]

use oamdet::geometry::{BBox, Detection, Offset, MAX_LOG_SCALE};
use oamdet::netcore::{ModelConfig, ModelParams, Network};
use oamdet::pseudogen::BoxPrediction;
use oamdet::synthworld::WorldConfig;
use oamdet::supervised::DetectConfig;

/// Relative error `||a - n|| / (||a|| + ||n||)` between the analytic gradient
/// `a` and central differences `n`, taken over every parameter.
pub fn fd_relative_error<F>(params: &ModelParams, analytic: &Network, h: f64, mut loss: F) -> f64
where
    F: FnMut(&ModelParams) -> f64,
{
    let base = params.net.flatten();
    let grad = analytic.flatten();
    assert_eq!(base.len(), grad.len());
    let mut probe = params.clone();
    let mut numeric = vec![0.0; base.len()];
    for k in 0..base.len() {
        let mut theta = base.clone();
        theta[k] = base[k] + h;
        probe.net.set_flat(&theta);
        let up = loss(&probe);
        theta[k] = base[k] - h;
        probe.net.set_flat(&theta);
        let down = loss(&probe);
        numeric[k] = (up - down) / (2.0 * h);
    }
    let diff: f64 = grad.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (norm_a + norm_n).max(1e-10)
}

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// Rank of every detection: descending score, lower index first on ties.
fn ranks(scores: &[f64]) -> Vec<usize> {
    let n = scores.len();
    (0..n)
        .map(|i| (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count())
        .collect()
}

/// Greedy NMS characterized without simulating it: the kept set is the unique
/// subset `S` in which a detection belongs to `S` iff no better-ranked member
/// of `S` of the same class overlaps it above the threshold. Found by trying
/// every subset. Returns kept indices by rank.
pub fn brute_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    assert!(n <= 16, "exhaustive reference is exponential");
    let rank = ranks(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
    let mut solutions = Vec::new();
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| {
                member(j) && rank[j] < rank[i] && dets[j].class_id == dets[i].class_id && ref_iou(&dets[j].bbox, &dets[i].bbox) > thr
            });
            member(i) == !blocked
        });
        if consistent {
            solutions.push(mask);
        }
    }
    assert_eq!(solutions.len(), 1, "fixed point must be unique");
    let mut kept: Vec<usize> = (0..n).filter(|&i| solutions[0] & (1 << i) != 0).collect();
    kept.sort_by_key(|&i| rank[i]);
    kept
}

fn ref_decode(anchor: &BBox, t: &Offset) -> Option<[f64; 4]> {
    let [x1, y1, x2, y2] = anchor.corners();
    let (w, h) = (x2 - x1, y2 - y1);
    let (cx, cy) = (x1 + w / 2.0 + t.tx * w, y1 + h / 2.0 + t.ty * h);
    let nw = w * t.tw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let nh = h * t.th.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let c = [cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0, cy + nh / 2.0];
    (c[0] < c[2] && c[1] < c[3]).then_some(c)
}

/// Exhaustive reference of the detection rule: every (box, class) pair at or
/// above the threshold, decoded and clipped, filtered by [`brute_nms`], then
/// the top `max_dets`.
pub fn brute_detect(boxes: &[BBox], preds: &[BoxPrediction], width: f64, height: f64, cfg: &DetectConfig) -> Vec<Detection> {
    let mut cands: Vec<Detection> = Vec::new();
    for (b, p) in boxes.iter().zip(preds) {
        for c in 0..p.offsets.len() {
            if p.probs[c + 1] < cfg.score_threshold {
                continue;
            }
            let Some(raw) = ref_decode(b, &p.offsets[c]) else { continue };
            let x1 = raw[0].max(0.0).min(width);
            let y1 = raw[1].max(0.0).min(height);
            let x2 = raw[2].max(0.0).min(width);
            let y2 = raw[3].max(0.0).min(height);
            if x1 < x2 && y1 < y2 {
                cands.push(Detection { class_id: c, bbox: BBox::new(x1, y1, x2, y2).unwrap(), score: p.probs[c + 1] });
            }
        }
    }
    let classes: Vec<usize> = {
        let mut v: Vec<usize> = cands.iter().map(|d| d.class_id).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut kept: Vec<usize> = Vec::new();
    for c in classes {
        let idx: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].class_id == c).collect();
        let sub: Vec<Detection> = idx.iter().map(|&i| cands[i]).collect();
        kept.extend(brute_nms(&sub, cfg.nms_iou).into_iter().map(|k| idx[k]));
    }
    let scores: Vec<f64> = cands.iter().map(|d| d.score).collect();
    let rank = ranks(&scores);
    kept.sort_by_key(|&i| rank[i]);
    kept.truncate(cfg.max_dets);
    kept.into_iter().map(|i| cands[i]).collect()
}

/// Reference average precision for one class: detections `(image, box,
/// score)` against ground truth `(image, box)`.
///
/// Each ranked detection claims the highest-IoU unclaimed ground truth of its
/// image (first listed wins ties); AP is `sum over true positives of
/// max precision at that rank or later, / #gt`.
pub fn brute_ap(dets: &[(usize, BBox, f64)], gts: &[(usize, BBox)], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let rank = ranks(&dets.iter().map(|d| d.2).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by_key(|&i| rank[i]);
    let mut claimed = vec![false; gts.len()];
    let mut tp = Vec::new();
    for &i in &order {
        let (img, bb, _) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, (gi, gb)) in gts.iter().enumerate() {
            if *gi != img || claimed[j] {
                continue;
            }
            let v = ref_iou(&bb, gb);
            match best {
                Some((_, bv)) if bv >= v => {}
                _ => best = Some((j, v)),
            }
        }
        let hit = matches!(best, Some((_, v)) if v >= thr);
        if let (true, Some((j, _))) = (hit, best) {
            claimed[j] = true;
        }
        tp.push(hit);
    }
    let precision: Vec<f64> =
        (0..tp.len()).map(|k| tp[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64).collect();
    let mut ap = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / gts.len() as f64;
        }
    }
    Some(ap)
}

/// Encoder gain and class-logit scale of the oracle checkpoint.
pub const ORACLE_GAIN: f64 = 3.0;
pub const ORACLE_LOGIT: f64 = 20.0;

/// A detector that is exact on noise-free worlds whose proposals are the
/// ground-truth boxes: one encoder unit per class measures the correlation of
/// the pooled region with that class's signature, and the classifier turns
/// the matching unit into a confident logit. Both branches share it.
pub fn oracle_params(world: &WorldConfig, pool_size: usize) -> ModelParams {
    let c = world.classes;
    let cfg = ModelConfig { channels: world.channels, pool_size, hidden: c, classes: c, shared_encoder: true };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut params = ModelParams::init(cfg.clone(), &mut rng);
    let signatures = world.signatures();
    let cells = (pool_size * pool_size) as f64;
    let f = cfg.feature_dim();
    let net = &mut params.net;
    for (k, s) in signatures.iter().enumerate() {
        let norm2: f64 = s.iter().map(|v| v * v).sum();
        for cell in 0..pool_size * pool_size {
            for (ch, v) in s.iter().enumerate() {
                net.encoder.weight[k * f + cell * world.channels + ch] = ORACLE_GAIN * v / (norm2 * cells);
            }
        }
    }
    net.encoder.bias.iter_mut().for_each(|b| *b = 0.0);
    for head in [&mut net.cls, &mut net.sup_cls] {
        head.weight.iter_mut().for_each(|w| *w = 0.0);
        head.bias.iter_mut().for_each(|b| *b = 0.0);
        for k in 0..c {
            head.weight[(k + 1) * c + k] = ORACLE_LOGIT;
        }
    }
    for head in [&mut net.score, &mut net.reg, &mut net.sup_reg] {
        head.weight.iter_mut().for_each(|w| *w = 0.0);
        head.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    params.velocity = params.net.zeros_like();
    params
}

/// Sample mean and (n - 1)-normalized standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}
