//! The fully supervised branch: its confidence-weighted training loss over
//! strong and semi-strong images, and test-time detection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_offset, nms, BBox, Detection, Offset};
use crate::netcore::{IntegralImage, ModelParams, Network, SupOutputGrad};
use crate::oam_losses::{assign_targets, detection_loss, sample_proposals, DetectionLoss, ProposalSample};
use crate::pseudogen::{BoxPrediction, BoxPredictor, SemiStrongPool};
use crate::synthworld::SceneRecord;

/// One image of a supervised batch with its sampled targets and weights.
#[derive(Debug, Clone)]
pub struct SupImage<'a> {
    /// Pooled features of the scene's proposals.
    pub features: &'a [Vec<f64>],
    pub sample: ProposalSample,
    /// Per-sampled-proposal weight `ω_i`.
    pub weights: Vec<f64>,
    /// Image weight: 1 for strong images, `1 / T` for semi-strong ones.
    pub image_weight: f64,
    pub strong: bool,
}

impl<'a> SupImage<'a> {
    /// Strong image: targets from ground truth, unit weights.
    pub fn strong<R: Rng>(
        scene: &SceneRecord,
        features: &'a [Vec<f64>],
        batch: usize,
        fg_fraction: f64,
        fg_iou: f64,
        rng: &mut R,
    ) -> Self {
        let targets = assign_targets(&scene.proposals.boxes, &scene.gt, fg_iou);
        let sample = sample_proposals(&targets, batch, fg_fraction, rng);
        let weights = vec![1.0; sample.len()];
        Self { features, sample, weights, image_weight: 1.0, strong: true }
    }

    /// Semi-strong image: targets from the pool's pseudo-boxes; foreground
    /// proposals take the weight of their matched pseudo-box, background 1.
    pub fn semi_strong<R: Rng>(
        scene: &SceneRecord,
        pool: &SemiStrongPool,
        features: &'a [Vec<f64>],
        batch: usize,
        fg_fraction: f64,
        fg_iou: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let entry = pool.get(scene.id).ok_or(Error::MissingSemiStrong(scene.id))?;
        let targets = assign_targets(&scene.proposals.boxes, &entry.as_ground_truth(), fg_iou);
        let sample = sample_proposals(&targets, batch, fg_fraction, rng);
        let weights = sample.targets.iter().map(|t| t.matched.map_or(1.0, |j| entry.boxes[j].weight)).collect();
        Ok(Self { features, sample, weights, image_weight: entry.global_weight(), strong: false })
    }
}

/// `L_cls = -(image_weight / M) sum_i ω_i log p_i[u_i]` plus, for strong
/// images only, the smooth-L1 regression loss over foreground proposals.
pub fn l2b_loss(params: &ModelParams, image: &SupImage, grads: Option<&mut Network>) -> Result<DetectionLoss> {
    let fwd = params.supervised_forward(image.features);
    let mut dout = grads.is_some().then(|| SupOutputGrad::zeros(fwd.len(), params.classes()));
    let g = dout.as_mut().map(|d| (d.cls.as_mut_slice(), d.reg.as_mut_slice()));
    let loss = detection_loss(&fwd, &image.sample, Some(&image.weights), image.image_weight, image.strong, g);
    if let (Some(grads), Some(d)) = (grads, dout) {
        params.backward_supervised(&fwd, &d, grads)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SupBranchLoss {
    pub strong_cls: f64,
    pub strong_reg: f64,
    pub semi_cls: f64,
    /// Semi-strong images in the batch.
    pub semi_images: usize,
}

impl SupBranchLoss {
    pub fn total(&self) -> f64 {
        self.strong_cls + self.strong_reg + self.semi_cls
    }
}

/// Sum of [`l2b_loss`] over a batch.
pub fn supervised_branch_loss(
    params: &ModelParams,
    batch: &[SupImage],
    mut grads: Option<&mut Network>,
) -> Result<SupBranchLoss> {
    let mut out = SupBranchLoss::default();
    for image in batch {
        let l = l2b_loss(params, image, grads.as_deref_mut())?;
        if image.strong {
            out.strong_cls += l.cls;
            out.strong_reg += l.reg;
        } else {
            out.semi_cls += l.cls;
            out.semi_images += 1;
        }
    }
    Ok(out)
}

/// The supervised branch's heads as a [`BoxPredictor`].
#[derive(Debug, Clone, Copy)]
pub struct SupervisedPredictor<'a> {
    pub params: &'a ModelParams,
}

impl BoxPredictor for SupervisedPredictor<'_> {
    fn classes(&self) -> usize {
        self.params.classes()
    }

    fn predict(&self, _scene: &SceneRecord, integral: &IntegralImage, boxes: &[BBox]) -> Result<Vec<BoxPrediction>> {
        let s = self.params.config.pool_size;
        let features = boxes.iter().map(|b| integral.pool(b, s)).collect::<Result<Vec<_>>>()?;
        let fwd = self.params.supervised_forward(&features);
        let c = self.classes();
        Ok((0..boxes.len())
            .map(|r| BoxPrediction {
                probs: fwd.probs(r).to_vec(),
                offsets: (0..c).map(|k| Offset::from_slice(fwd.offset(r, k))).collect(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.5, max_dets: 100 }
    }
}

/// Turns per-box predictions into final detections: every foreground class
/// scoring at least the threshold yields its decoded, clipped box; then
/// per-class NMS and the top `max_dets` by score.
pub fn detections_from(
    boxes: &[BBox],
    preds: &[BoxPrediction],
    width: f64,
    height: f64,
    cfg: &DetectConfig,
) -> Vec<Detection> {
    let mut cands = Vec::new();
    for (b, p) in boxes.iter().zip(preds) {
        for (c, off) in p.offsets.iter().enumerate() {
            let score = p.probs[c + 1];
            if score < cfg.score_threshold {
                continue;
            }
            if let Some(bx) = decode_offset(b, off).clip(width, height) {
                cands.push(Detection::new(c, bx, score.clamp(0.0, 1.0)));
            }
        }
    }
    let mut kept = nms(&cands, cfg.nms_iou);
    kept.truncate(cfg.max_dets);
    kept
}

/// Detections of `predictor` on the scene's own proposals.
pub fn detect<P: BoxPredictor + ?Sized>(
    predictor: &P,
    scene: &SceneRecord,
    integral: &IntegralImage,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let boxes = &scene.proposals.boxes;
    let preds = predictor.predict(scene, integral, boxes)?;
    Ok(detections_from(boxes, &preds, integral.width() as f64, integral.height() as f64, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::netcore::ModelConfig;
    use crate::oam_losses::ProposalTarget;
    use crate::pseudogen::{AnnotationOutcome, PseudoBox, SemiStrongEntry};
    use crate::synthworld::{FeatureGrid, GtObject, ProposalSet, Tier};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn params(seed: u64) -> ModelParams {
        let cfg = ModelConfig { channels: 2, pool_size: 2, hidden: 5, classes: 3, shared_encoder: false };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn features(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn sample(classes: &[usize]) -> ProposalSample {
        let targets = classes
            .iter()
            .map(|&c| {
                if c == 0 {
                    ProposalTarget::BACKGROUND
                } else {
                    ProposalTarget { class: c, offset: Some(Offset::new(0.1, -0.2, 0.05, 0.0)), matched: Some(0) }
                }
            })
            .collect();
        ProposalSample::all(targets)
    }

    #[test]
    fn single_weighted_proposal_value() {
        let mut p = params(0);
        p.net.sup_cls.weight.iter_mut().for_each(|w| *w = 0.0);
        // p[0] = e^{z0} / (e^{z0} + 3) = e^-1  =>  e^{z0} = 3 / (e - 1)
        let z0 = (3.0 / (std::f64::consts::E - 1.0)).ln();
        p.net.sup_cls.bias = vec![z0, 0.0, 0.0, 0.0];
        let feats = features(1, 1);
        let img = SupImage { features: &feats, sample: sample(&[0]), weights: vec![0.5], image_weight: 1.0, strong: false };
        let l = l2b_loss(&p, &img, None).unwrap();
        assert!((l.cls - 0.5).abs() < 1e-12, "{}", l.cls);
        assert_eq!(l.reg, 0.0);
    }

    #[test]
    fn image_weight_halves_semi_strong_loss() {
        let p = params(2);
        let feats = features(5, 3);
        let strong = SupImage { features: &feats, sample: sample(&[1, 0, 2, 0, 3]), weights: vec![1.0; 5], image_weight: 1.0, strong: true };
        let semi = SupImage { image_weight: 0.5, strong: false, ..strong.clone() };
        let ls = l2b_loss(&p, &strong, None).unwrap();
        let lw = l2b_loss(&p, &semi, None).unwrap();
        assert!((lw.cls - 0.5 * ls.cls).abs() < 1e-12);
        assert!(ls.reg > 0.0);
        assert_eq!(lw.reg, 0.0);
    }

    #[test]
    fn loss_is_linear_in_proposal_weights() {
        let p = params(4);
        let feats = features(4, 5);
        let base = SupImage { features: &feats, sample: sample(&[1, 0, 2, 0]), weights: vec![0.3, 1.0, 0.7, 0.2], image_weight: 0.25, strong: false };
        let l0 = l2b_loss(&p, &base, None).unwrap().cls;
        for lambda in [0.1, 2.0, 7.5] {
            let scaled = SupImage { weights: base.weights.iter().map(|w| w * lambda).collect(), ..base.clone() };
            let l = l2b_loss(&p, &scaled, None).unwrap().cls;
            assert!((l - lambda * l0).abs() < 1e-12 * l0.abs().max(1.0));
        }
    }

    #[test]
    fn perfect_strong_predictions_have_near_zero_loss() {
        let mut p = params(6);
        p.net.sup_cls.weight.iter_mut().for_each(|w| *w = 0.0);
        p.net.sup_reg.weight.iter_mut().for_each(|w| *w = 0.0);
        p.net.sup_reg.bias = vec![0.0; 12];
        p.net.sup_cls.bias = vec![-40.0, 40.0, -40.0, -40.0];
        let feats = features(2, 7);
        let targets = vec![
            ProposalTarget { class: 1, offset: Some(Offset::ZERO), matched: Some(0) },
            ProposalTarget { class: 1, offset: Some(Offset::ZERO), matched: Some(0) },
        ];
        let img = SupImage { features: &feats, sample: ProposalSample::all(targets), weights: vec![1.0; 2], image_weight: 1.0, strong: true };
        let l = l2b_loss(&p, &img, None).unwrap();
        assert!(l.total() < 1e-12);
    }

    fn scene() -> SceneRecord {
        let gt = vec![GtObject { class_id: 1, bbox: b(2.0, 2.0, 12.0, 12.0) }];
        SceneRecord {
            id: 4,
            grid: FeatureGrid::filled(16, 16, &[0.0, 0.0]),
            labels: vec![1],
            gt,
            tier: Tier::Weak,
            proposals: ProposalSet { image_id: 4, boxes: vec![b(2.0, 2.0, 12.0, 12.5), b(0.0, 0.0, 4.0, 4.0)] },
        }
    }

    #[test]
    fn semi_strong_weights_follow_pseudo_boxes() {
        let s = scene();
        let mut pool = SemiStrongPool::new();
        let feats = features(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = SupImage::semi_strong(&s, &pool, &feats, 32, 0.25, 0.5, &mut rng);
        assert!(matches!(err, Err(Error::MissingSemiStrong(4))));
        let entry = SemiStrongEntry {
            image_id: 4,
            boxes: vec![PseudoBox { class_id: 1, bbox: b(2.0, 2.0, 12.0, 12.0), weight: 0.6 }],
            t: 4,
            epoch: 0,
        };
        pool.update(4, &AnnotationOutcome::Accepted(entry), 0);
        let img = SupImage::semi_strong(&s, &pool, &feats, 32, 1.0, 0.5, &mut rng).unwrap();
        assert_eq!(img.image_weight, 0.25);
        for (t, w) in img.sample.targets.iter().zip(&img.weights) {
            assert_eq!(*w, if t.is_foreground() { 0.6 } else { 1.0 });
        }
        assert_eq!(img.sample.foreground(), 1);
    }

    /// Detector that reports fixed predictions regardless of the image.
    struct Fixed(Vec<BoxPrediction>);

    impl BoxPredictor for Fixed {
        fn classes(&self) -> usize {
            self.0[0].offsets.len()
        }
        fn predict(&self, _: &SceneRecord, _: &IntegralImage, _: &[BBox]) -> Result<Vec<BoxPrediction>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn background_only_detects_nothing() {
        let s = scene();
        let ii = IntegralImage::new(&s.grid);
        let bg = BoxPrediction { probs: vec![0.99, 0.005, 0.005], offsets: vec![Offset::ZERO; 2] };
        let dets = detect(&Fixed(vec![bg.clone(), bg]), &s, &ii, &DetectConfig::default()).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn single_confident_proposal_is_decoded() {
        let s = scene();
        let ii = IntegralImage::new(&s.grid);
        let shift = Offset::new(0.1, 0.0, 0.0, 0.0);
        let hit = BoxPrediction { probs: vec![0.02, 0.02, 0.96], offsets: vec![Offset::ZERO, shift] };
        let miss = BoxPrediction { probs: vec![1.0, 0.0, 0.0], offsets: vec![Offset::ZERO; 2] };
        let dets = detect(&Fixed(vec![hit, miss]), &s, &ii, &DetectConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert_eq!(dets[0].score, 0.96);
        let want = decode_offset(&s.proposals.boxes[0], &shift);
        assert!(iou(&dets[0].bbox, &want) > 1.0 - 1e-12);
    }

    #[test]
    fn max_dets_keeps_the_best() {
        let boxes: Vec<BBox> = (0..6).map(|i| b(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 8.0, 8.0)).collect();
        let preds: Vec<BoxPrediction> = (0..6)
            .map(|i| BoxPrediction { probs: vec![0.0, 0.1 + 0.1 * i as f64], offsets: vec![Offset::ZERO] })
            .collect();
        let cfg = DetectConfig { max_dets: 2, ..Default::default() };
        let dets = detections_from(&boxes, &preds, 100.0, 100.0, &cfg);
        assert_eq!(dets.len(), 2);
        assert!((dets[0].score - 0.6).abs() < 1e-12 && (dets[1].score - 0.5).abs() < 1e-12);
    }
}
