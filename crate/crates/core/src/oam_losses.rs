//! Loss terms of the annotation branch: the image-level MIL loss, the
//! proposal classification/regression loss on strong images, and the second
//! forward pass over offset-refined top proposals.
//!
//! Every loss can accumulate its analytic gradient into a [`Network`]. Boxes
//! moved by the second pass are treated as constants: no gradient flows
//! through ROI coordinates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{argsort_desc, decode_offset, encode_offset, iou, smooth_l1, smooth_l1_grad, BBox, Offset};
use crate::netcore::{
    clamped_log_prob, weighted_nll_backward, IntegralImage, ModelParams, Network, OamForward, OamOutputGrad,
    SupForward, LOG_EPS,
};
use crate::synthworld::{GtObject, SceneRecord};

/// Binary cross-entropy between image-level scores and labels, with every
/// log argument clamped to `[eps, 1 - eps]`.
pub fn image_level_loss(alpha: &[f64], y: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(y)
        .map(|(&a, &y)| {
            let a = a.clamp(LOG_EPS, 1.0 - LOG_EPS);
            -((1.0 - y) * (1.0 - a).ln() + y * a.ln())
        })
        .sum()
}

/// `dL_gc / d alpha`; zero where the clamp is active.
pub fn image_level_loss_grad(alpha: &[f64], y: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .zip(y)
        .map(|(&a, &y)| {
            if a <= LOG_EPS || a >= 1.0 - LOG_EPS {
                0.0
            } else {
                -y / a + (1.0 - y) / (1.0 - a)
            }
        })
        .collect()
}

/// Training target of one proposal: `class` 0 is background, `c + 1` is
/// foreground class `c`; `offset` is present iff the proposal is foreground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalTarget {
    pub class: usize,
    pub offset: Option<Offset>,
    /// Index of the matched ground-truth (or pseudo) box, foreground only.
    pub matched: Option<usize>,
}

impl ProposalTarget {
    pub const BACKGROUND: ProposalTarget = ProposalTarget { class: 0, offset: None, matched: None };

    pub fn is_foreground(&self) -> bool {
        self.class >= 1
    }
}

/// Matches every proposal to the ground-truth box of maximal IoU (lowest
/// index on ties); foreground iff that IoU reaches `fg_iou`.
pub fn assign_targets(proposals: &[BBox], gt: &[GtObject], fg_iou: f64) -> Vec<ProposalTarget> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                let v = iou(p, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= fg_iou => ProposalTarget {
                    class: gt[j].class_id + 1,
                    offset: Some(encode_offset(p, &gt[j].bbox)),
                    matched: Some(j),
                },
                _ => ProposalTarget::BACKGROUND,
            }
        })
        .collect()
}

/// Proposal indices and their targets used for one image's proposal loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSample {
    pub indices: Vec<usize>,
    pub targets: Vec<ProposalTarget>,
}

impl ProposalSample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn foreground(&self) -> usize {
        self.targets.iter().filter(|t| t.is_foreground()).count()
    }

    /// Every proposal, in order.
    pub fn all(targets: Vec<ProposalTarget>) -> Self {
        Self { indices: (0..targets.len()).collect(), targets }
    }
}

/// Draws up to `batch` proposals: at most `floor(fg_fraction * batch)`
/// foreground, the remainder background, each chosen uniformly at random.
pub fn sample_proposals<R: Rng>(
    targets: &[ProposalTarget],
    batch: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> ProposalSample {
    let mut fg: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_foreground()).collect();
    let mut bg: Vec<usize> = (0..targets.len()).filter(|&i| !targets[i].is_foreground()).collect();
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n_fg = fg.len().min((fg_fraction * batch as f64).floor() as usize);
    let n_bg = bg.len().min(batch - n_fg);
    let indices: Vec<usize> = fg[..n_fg].iter().chain(&bg[..n_bg]).copied().collect();
    let targets = indices.iter().map(|&i| targets[i]).collect();
    ProposalSample { indices, targets }
}

/// Read access to a classification head (`C+1` logits) and a class-specific
/// regression head (`4C`) evaluated on a list of proposals.
pub trait DetectionHeads {
    fn classes(&self) -> usize;
    fn logits(&self, r: usize) -> &[f64];
    fn offset_of(&self, r: usize, class: usize) -> &[f64];
}

impl DetectionHeads for OamForward {
    fn classes(&self) -> usize {
        OamForward::classes(self)
    }
    fn logits(&self, r: usize) -> &[f64] {
        let c = OamForward::classes(self) + 1;
        &self.cls_logits[r * c..(r + 1) * c]
    }
    fn offset_of(&self, r: usize, class: usize) -> &[f64] {
        self.offset(r, class)
    }
}

impl DetectionHeads for SupForward {
    fn classes(&self) -> usize {
        SupForward::classes(self)
    }
    fn logits(&self, r: usize) -> &[f64] {
        let c = SupForward::classes(self) + 1;
        &self.cls_logits[r * c..(r + 1) * c]
    }
    fn offset_of(&self, r: usize, class: usize) -> &[f64] {
        self.offset(r, class)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetectionLoss {
    pub cls: f64,
    pub reg: f64,
    pub foreground: usize,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Weighted proposal loss shared by both branches:
/// `L_cls = -(scale / M) sum_i w_i log p_i[u_i]` and, when `with_reg`,
/// `L_reg = sum_{fg} sum_k smooth_l1(t_k - v_k)` on the target class offsets.
///
/// `grad`, when given, receives `(d logits, d reg)` laid out like the heads.
pub fn detection_loss<H: DetectionHeads>(
    heads: &H,
    sample: &ProposalSample,
    weights: Option<&[f64]>,
    scale: f64,
    with_reg: bool,
    mut grad: Option<(&mut [f64], &mut [f64])>,
) -> DetectionLoss {
    let m = sample.len();
    let mut out = DetectionLoss::default();
    if m == 0 {
        return out;
    }
    let c1 = heads.classes() + 1;
    for (k, (&r, t)) in sample.indices.iter().zip(&sample.targets).enumerate() {
        let w = weights.map_or(1.0, |w| w[k]) * scale / m as f64;
        let z = heads.logits(r);
        out.cls -= w * clamped_log_prob(z, t.class);
        if let Some((dcls, _)) = grad.as_mut() {
            weighted_nll_backward(z, t.class, w, &mut dcls[r * c1..(r + 1) * c1]);
        }
        if let (true, Some(v)) = (t.is_foreground(), t.offset) {
            out.foreground += 1;
            if !with_reg {
                continue;
            }
            let class = t.class - 1;
            let pred = heads.offset_of(r, class);
            for (i, target) in v.to_array().iter().enumerate() {
                let diff = pred[i] - target;
                out.reg += smooth_l1(diff);
                if let Some((_, dreg)) = grad.as_mut() {
                    dreg[r * 4 * (c1 - 1) + 4 * class + i] += smooth_l1_grad(diff);
                }
            }
        }
    }
    out
}

/// One image entering the annotation-branch loss.
#[derive(Debug, Clone, Copy)]
pub struct OamImage<'a> {
    pub scene: &'a SceneRecord,
    pub integral: &'a IntegralImage,
    /// Pooled features of `scene.proposals`, in order.
    pub features: &'a [Vec<f64>],
    /// Sampled proposals with targets; `Some` exactly for strong images.
    pub sample: Option<&'a ProposalSample>,
}

impl OamImage<'_> {
    pub fn is_strong(&self) -> bool {
        self.sample.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OamLossConfig {
    /// Run the second pass over offset-refined top proposals.
    pub bba: bool,
    /// Top proposals per labeled class for the second pass.
    pub m_top: usize,
    pub fg_iou: f64,
    pub pool_size: usize,
}

/// Loss of one forward pass over one image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PassLoss {
    pub gc: f64,
    pub proposal: DetectionLoss,
    /// Strong image whose proposal set had no foreground.
    pub no_foreground: bool,
    /// Second pass skipped because every moved box was degenerate.
    pub degenerate: bool,
}

impl PassLoss {
    pub fn total(&self) -> f64 {
        self.gc + self.proposal.total()
    }
}

fn pass_loss(
    params: &ModelParams,
    fwd: &OamForward,
    y: &[f64],
    sample: Option<&ProposalSample>,
    grads: Option<&mut Network>,
) -> Result<PassLoss> {
    let c = params.classes();
    let mut loss = PassLoss { gc: image_level_loss(&fwd.alpha, y), ..PassLoss::default() };
    let mut dout = grads.is_some().then(|| OamOutputGrad::zeros(fwd.len(), c));
    if let Some(d) = dout.as_mut() {
        fwd.backward_alpha(&image_level_loss_grad(&fwd.alpha, y), d);
    }
    if let Some(sample) = sample {
        let g = dout.as_mut().map(|d| (d.cls.as_mut_slice(), d.reg.as_mut_slice()));
        loss.proposal = detection_loss(fwd, sample, None, 1.0, true, g);
        loss.no_foreground = loss.proposal.foreground == 0;
    }
    if let (Some(grads), Some(d)) = (grads, dout) {
        params.backward_oam(fwd, &d, grads)?;
    }
    Ok(loss)
}

/// First forward pass: `L_gc` for every image plus `L_p` for strong ones.
pub fn first_pass(params: &ModelParams, image: &OamImage, grads: Option<&mut Network>) -> Result<(OamForward, PassLoss)> {
    let fwd = params.oam_forward(image.features);
    let y = image.scene.label_vector(params.classes());
    let loss = pass_loss(params, &fwd, &y, image.sample, grads)?;
    Ok((fwd, loss))
}

/// Boxes fed to the second pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondPassPlan {
    /// `(labeled class, source proposal)` for every selected proposal.
    pub selected: Vec<(usize, usize)>,
    /// Offset-refined, clipped boxes that survived clipping.
    pub boxes: Vec<BBox>,
}

/// For each labeled class, the `min(m_top, B)` proposals of highest
/// `phi(c, .)` (index breaks ties).
pub fn select_top_proposals(fwd: &OamForward, labels: &[usize], m_top: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &c in labels {
        let scores: Vec<f64> = (0..fwd.len()).map(|r| fwd.phi(c, r)).collect();
        out.extend(argsort_desc(&scores).into_iter().take(m_top).map(|r| (c, r)));
    }
    out
}

pub fn plan_second_pass(fwd: &OamForward, image: &OamImage, m_top: usize) -> SecondPassPlan {
    let selected = select_top_proposals(fwd, &image.scene.labels, m_top);
    let (w, h) = (image.integral.width() as f64, image.integral.height() as f64);
    let boxes = selected
        .iter()
        .filter_map(|&(c, r)| {
            let moved = decode_offset(&image.scene.proposals.boxes[r], &Offset::from_slice(fwd.offset(r, c)));
            moved.clip(w, h)
        })
        .collect();
    SecondPassPlan { selected, boxes }
}

/// Second-pass loss on a fixed set of moved boxes: `L_gc` again, and for
/// strong images `L_p` with targets freshly assigned on the moved boxes.
pub fn second_pass_loss(
    params: &ModelParams,
    image: &OamImage,
    plan: &SecondPassPlan,
    cfg: &OamLossConfig,
    grads: Option<&mut Network>,
) -> Result<PassLoss> {
    if plan.boxes.is_empty() {
        return Ok(PassLoss { degenerate: true, ..PassLoss::default() });
    }
    let features = plan
        .boxes
        .iter()
        .map(|b| image.integral.pool(b, cfg.pool_size))
        .collect::<Result<Vec<_>>>()?;
    let fwd = params.oam_forward(&features);
    let y = image.scene.label_vector(params.classes());
    let sample = image.is_strong().then(|| ProposalSample::all(assign_targets(&plan.boxes, &image.scene.gt, cfg.fg_iou)));
    pass_loss(params, &fwd, &y, sample.as_ref(), grads)
}

pub fn second_pass(
    params: &ModelParams,
    image: &OamImage,
    first: &OamForward,
    cfg: &OamLossConfig,
    grads: Option<&mut Network>,
) -> Result<PassLoss> {
    let plan = plan_second_pass(first, image, cfg.m_top);
    second_pass_loss(params, image, &plan, cfg, grads)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OamBranchLoss {
    pub strong_first: f64,
    pub weak_first: f64,
    pub strong_second: f64,
    pub weak_second: f64,
    /// Strong images whose proposal sample had no foreground.
    pub no_foreground: usize,
    /// Images whose second pass had no valid box.
    pub degenerate_second_pass: usize,
}

impl OamBranchLoss {
    pub fn total(&self) -> f64 {
        self.strong_first + self.weak_first + self.strong_second + self.weak_second
    }
}

/// `L_1B` summed over the batch; the second-pass terms are dropped when
/// `cfg.bba` is off.
pub fn oam_branch_loss(
    params: &ModelParams,
    batch: &[OamImage],
    cfg: &OamLossConfig,
    mut grads: Option<&mut Network>,
) -> Result<OamBranchLoss> {
    let mut out = OamBranchLoss::default();
    for image in batch {
        let (fwd, first) = first_pass(params, image, grads.as_deref_mut())?;
        out.no_foreground += first.no_foreground as usize;
        let second = if cfg.bba {
            let s = second_pass(params, image, &fwd, cfg, grads.as_deref_mut())?;
            out.degenerate_second_pass += s.degenerate as usize;
            s.total()
        } else {
            0.0
        };
        if image.is_strong() {
            out.strong_first += first.total();
            out.strong_second += second;
        } else {
            out.weak_first += first.total();
            out.weak_second += second;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{ModelConfig, SupForward};
    use crate::synthworld::{FeatureGrid, ProposalSet, Tier};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn image_level_loss_examples() {
        assert!(image_level_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-6);
        assert!((image_level_loss(&[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-12);
        assert!((image_level_loss(&[0.5, 0.5], &[1.0, 0.0]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(image_level_loss(&[0.0, 1.0], &[1.0, 0.0]).is_finite());
    }

    #[test]
    fn assignment_examples() {
        let gt = vec![
            GtObject { class_id: 2, bbox: b(0.0, 0.0, 10.0, 10.0) },
            GtObject { class_id: 0, bbox: b(20.0, 20.0, 30.0, 30.0) },
        ];
        let t = assign_targets(&[b(0.0, 0.0, 10.0, 10.0), b(40.0, 40.0, 50.0, 50.0)], &gt, 0.5);
        assert_eq!(t[0].class, 3);
        assert_eq!(t[0].offset, Some(Offset::ZERO));
        assert_eq!(t[1], ProposalTarget::BACKGROUND);

        // IoU 0.6 with the first gt, 0.4 with the second (brute-force max)
        let gt = vec![
            GtObject { class_id: 1, bbox: b(0.0, 0.0, 10.0, 6.0) },
            GtObject { class_id: 4, bbox: b(0.0, 0.0, 10.0, 4.0) },
        ];
        let p = b(0.0, 0.0, 10.0, 10.0);
        assert!((iou(&p, &gt[0].bbox) - 0.6).abs() < 1e-12);
        assert!((iou(&p, &gt[1].bbox) - 0.4).abs() < 1e-12);
        let t = assign_targets(&[p], &gt, 0.5);
        assert_eq!((t[0].class, t[0].matched), (2, Some(0)));

        // equal IoU: lowest gt index wins
        let gt = vec![
            GtObject { class_id: 1, bbox: b(0.0, 0.0, 10.0, 10.0) },
            GtObject { class_id: 2, bbox: b(0.0, 0.0, 10.0, 10.0) },
        ];
        assert_eq!(assign_targets(&[p], &gt, 0.5)[0].matched, Some(0));
    }

    #[test]
    fn sampling_respects_foreground_cap() {
        let mut targets = vec![ProposalTarget::BACKGROUND; 50];
        for t in targets.iter_mut().take(20) {
            *t = ProposalTarget { class: 1, offset: Some(Offset::ZERO), matched: Some(0) };
        }
        let s = sample_proposals(&targets, 32, 0.25, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.len(), 32);
        assert_eq!(s.foreground(), 8);
        let few = sample_proposals(&targets[15..25], 32, 0.25, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((few.len(), few.foreground()), (10, 5));
    }

    fn sup_with_logits(logits: Vec<f64>, reg: Vec<f64>, classes: usize) -> SupForward {
        let cfg = ModelConfig { channels: 1, pool_size: 1, hidden: 1, classes, shared_encoder: true };
        let mut p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let n = p.net.flatten().len();
        p.net.set_flat(&vec![0.0; n]);
        let b = logits.len() / (classes + 1);
        let mut fwd = p.supervised_forward(&vec![vec![0.0]; b]);
        fwd.cls_logits = logits;
        fwd.reg = reg;
        fwd
    }

    #[test]
    fn proposal_loss_examples() {
        // uniform over C+1 = 3 classes, two background proposals
        let fwd = sup_with_logits(vec![0.0; 6], vec![0.0; 16], 2);
        let s = ProposalSample::all(vec![ProposalTarget::BACKGROUND; 2]);
        let l = detection_loss(&fwd, &s, None, 1.0, true, None);
        assert!((l.cls - 3f64.ln()).abs() < 1e-12);
        assert_eq!(l.reg, 0.0);

        // confident correct class, offsets off by (0.5, 0, 0, 0)
        let fwd = sup_with_logits(vec![-50.0, 50.0, -50.0], vec![0.5, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0], 2);
        let t = ProposalTarget { class: 1, offset: Some(Offset::ZERO), matched: Some(0) };
        let l = detection_loss(&fwd, &ProposalSample::all(vec![t]), None, 1.0, true, None);
        assert!(l.cls < 1e-12);
        assert!((l.reg - 0.125).abs() < 1e-12);

        let perfect = sup_with_logits(vec![-50.0, 50.0, -50.0], vec![0.0; 8], 2);
        assert!(detection_loss(&perfect, &ProposalSample::all(vec![t]), None, 1.0, true, None).total() < 1e-12);
    }

    fn toy_scene(tier: Tier) -> (SceneRecord, IntegralImage) {
        let mut grid = FeatureGrid::filled(16, 16, &[0.0, 0.0]);
        for r in 2..8 {
            for c in 3..9 {
                grid.set(r, c, 0, 1.0);
            }
        }
        let gt = vec![GtObject { class_id: 0, bbox: b(3.0, 2.0, 9.0, 8.0) }];
        let boxes = vec![b(3.0, 2.0, 9.0, 8.0), b(10.0, 10.0, 15.0, 15.0)];
        let scene = SceneRecord {
            id: 0,
            labels: vec![0],
            gt,
            tier,
            proposals: ProposalSet { image_id: 0, boxes },
            grid: grid.clone(),
        };
        (scene, IntegralImage::new(&grid))
    }

    fn zero_params(classes: usize) -> ModelParams {
        let cfg = ModelConfig { channels: 2, pool_size: 2, hidden: 3, classes, shared_encoder: true };
        let mut p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let flat: Vec<f64> = p.net.flatten().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
        p.net.set_flat(&flat);
        p
    }

    #[test]
    fn second_pass_selection_and_zero_offsets() {
        let (scene, ii) = toy_scene(Tier::Weak);
        let mut p = zero_params(2);
        p.net.reg = crate::netcore::Linear::zeros(p.net.reg.out_dim, p.net.reg.in_dim);
        let feats: Vec<Vec<f64>> = scene.proposals.boxes.iter().map(|b| ii.pool(b, 2).unwrap()).collect();
        let img = OamImage { scene: &scene, integral: &ii, features: &feats, sample: None };
        let (fwd, _) = first_pass(&p, &img, None).unwrap();
        // brute-force argmax over the two proposals for the single labeled class
        let best = if fwd.phi(0, 0) >= fwd.phi(0, 1) { 0 } else { 1 };
        assert_eq!(select_top_proposals(&fwd, &[0], 1), vec![(0, best)]);
        let plan = plan_second_pass(&fwd, &img, 16);
        assert_eq!(plan.selected.len(), 2); // min(16, B = 2)
        for (bx, &(_, r)) in plan.boxes.iter().zip(&plan.selected) {
            assert_eq!(ii.pool(bx, 2).unwrap(), feats[r]);
        }
    }

    #[test]
    fn weak_images_have_no_proposal_loss_and_bba_off_drops_second_pass() {
        let (weak, ii) = toy_scene(Tier::Weak);
        let (strong, _) = toy_scene(Tier::Strong);
        let p = zero_params(2);
        let feats: Vec<Vec<f64>> = weak.proposals.boxes.iter().map(|b| ii.pool(b, 2).unwrap()).collect();
        let sample = ProposalSample::all(assign_targets(&strong.proposals.boxes, &strong.gt, 0.5));
        let w = OamImage { scene: &weak, integral: &ii, features: &feats, sample: None };
        let s = OamImage { scene: &strong, integral: &ii, features: &feats, sample: Some(&sample) };
        let (_, wl) = first_pass(&p, &w, None).unwrap();
        assert_eq!(wl.proposal, DetectionLoss::default());

        let off = OamLossConfig { bba: false, m_top: 16, fg_iou: 0.5, pool_size: 2 };
        let only_strong = oam_branch_loss(&p, &[s], &off, None).unwrap();
        let (_, sl) = first_pass(&p, &s, None).unwrap();
        assert!((only_strong.total() - (sl.gc + sl.proposal.total())).abs() < 1e-12);

        let on = OamLossConfig { bba: true, ..off };
        let both = oam_branch_loss(&p, &[s, w], &on, None).unwrap();
        let (f_s, _) = first_pass(&p, &s, None).unwrap();
        let (f_w, _) = first_pass(&p, &w, None).unwrap();
        let parts = sl.total()
            + wl.total()
            + second_pass(&p, &s, &f_s, &on, None).unwrap().total()
            + second_pass(&p, &w, &f_w, &on, None).unwrap().total();
        assert!((both.total() - parts).abs() < 1e-12);
        assert!(both.strong_second > 0.0 && both.weak_second > 0.0);
    }
}
