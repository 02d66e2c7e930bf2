//! Joint training of both branches with online pseudo-annotation, plus the
//! ablation matrix over the component switches.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate, Metrics};
use crate::netcore::{Branch, IntegralImage, ModelConfig, ModelParams, SgdConfig};
use crate::oam_losses::{assign_targets, oam_branch_loss, sample_proposals, OamImage, OamLossConfig, ProposalTarget};
use crate::pseudogen::{
    generate_annotation, AnnotationConfig, AnnotationOutcome, OamPredictor, PoolSnapshot, Rejection, SemiStrongPool,
};
use crate::supervised::{supervised_branch_loss, DetectConfig, SupImage, SupervisedPredictor};
use crate::synthworld::{Dataset, SceneRecord, Tier};

/// Component switches: shared encoder, bounding-box augmentation (second
/// pass), and training the supervised branch on pseudo-annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    pub se: bool,
    pub bba: bool,
    pub oam: bool,
}

impl Flags {
    pub const NONE: Flags = Flags { se: false, bba: false, oam: false };
    pub const ALL: Flags = Flags { se: true, bba: true, oam: true };

    /// The incremental chain `{} -> {SE} -> {SE,OAM} -> {SE,OAM,BBA}`.
    pub fn chain() -> Vec<Flags> {
        vec![
            Flags::NONE,
            Flags { se: true, ..Flags::NONE },
            Flags { se: true, oam: true, bba: false },
            Flags::ALL,
        ]
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [(self.se, "SE"), (self.oam, "OAM"), (self.bba, "BBA")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join("+"))
        }
    }
}

impl FromStr for Flags {
    type Err = Error;

    /// Parses `none` or a `+`/`,`-separated subset of `se`, `oam`, `bba`.
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Flags::NONE;
        if s.trim().eq_ignore_ascii_case("none") {
            return Ok(flags);
        }
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "se" => flags.se = true,
                "oam" => flags.oam = true,
                "bba" => flags.bba = true,
                other => return Err(Error::Config(format!("unknown component flag {other:?}"))),
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Trailing epochs trained at `lr * lr_drop`.
    pub lr_drop_epochs: usize,
    pub lr_drop: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub oam_weak_per_batch: usize,
    pub oam_strong_per_batch: usize,
    pub sup_strong_per_batch: usize,
    pub sup_semi_per_batch: usize,
    /// Sampled proposals per image for the proposal losses.
    pub proposal_batch: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    /// Top proposals per labeled class in the second pass.
    pub m_top: usize,
    pub hidden: usize,
    pub pool_size: usize,
    pub flags: Flags,
    pub seed: u64,
    pub annotation: AnnotationConfig,
    pub detect: DetectConfig,
    /// Evaluate on the test split every this many epochs (0: never).
    pub eval_every: usize,
    /// Flag combinations run by the ablation matrix.
    pub ablation: Vec<Flags>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.001,
            lr_drop_epochs: 7,
            lr_drop: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            oam_weak_per_batch: 2,
            oam_strong_per_batch: 2,
            sup_strong_per_batch: 2,
            sup_semi_per_batch: 2,
            proposal_batch: 32,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            m_top: 16,
            hidden: 32,
            pool_size: 3,
            flags: Flags::ALL,
            seed: 0,
            annotation: AnnotationConfig::default(),
            detect: DetectConfig::default(),
            eval_every: 0,
            ablation: Flags::chain(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr_drop > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.lr_drop_epochs > self.epochs {
            return bad("lr_drop_epochs exceeds epochs");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative");
        }
        if self.oam_weak_per_batch + self.oam_strong_per_batch == 0 || self.sup_strong_per_batch + self.sup_semi_per_batch == 0 {
            return bad("empty batch");
        }
        if self.proposal_batch == 0 || !(0.0..=1.0).contains(&self.fg_fraction) || !(0.0..=1.0).contains(&self.fg_iou) {
            return bad("invalid proposal sampling settings");
        }
        if self.m_top == 0 || self.hidden == 0 || self.pool_size == 0 {
            return bad("m_top, hidden and pool_size must be positive");
        }
        if self.annotation.max_iters == 0 || self.annotation.stable_iters == 0 {
            return bad("annotation iteration counts must be positive");
        }
        Ok(())
    }

    /// Learning rate of a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch + self.lr_drop_epochs > self.epochs {
            self.lr * self.lr_drop
        } else {
            self.lr
        }
    }

    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            channels: dataset.config.world.channels,
            pool_size: self.pool_size,
            hidden: self.hidden,
            classes: dataset.classes(),
            shared_encoder: self.flags.se,
        }
    }

    fn loss_config(&self) -> OamLossConfig {
        OamLossConfig { bba: self.flags.bba, m_top: self.m_top, fg_iou: self.fg_iou, pool_size: self.pool_size }
    }
}

/// Per-epoch training summary. Loss columns are means per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub l1b: f64,
    pub l1b_strong_first: f64,
    pub l1b_weak_first: f64,
    pub l1b_second: f64,
    pub l2b: f64,
    pub l2b_strong_cls: f64,
    pub l2b_strong_reg: f64,
    pub l2b_semi_cls: f64,
    pub pool_size: usize,
    pub pool_fraction: f64,
    pub pool_mean_t: f64,
    pub annotation_attempts: usize,
    pub accepted: usize,
    pub rejected_no_detections: usize,
    pub rejected_no_convergence: usize,
    pub rejected_class_mismatch: usize,
    /// Supervised-batch slots filled with semi-strong images.
    pub semi_strong_slots: usize,
    /// Semi-strong slots that fell back to strong images.
    pub fallback_slots: usize,
    /// Mean gradient norm reaching the encoder used by each branch.
    pub encoder_grad_oam: f64,
    pub encoder_grad_sup: f64,
    /// Steps where both losses were positive but one branch put no gradient
    /// on the shared encoder. Always zero when the encoder is shared.
    pub shared_encoder_gaps: usize,
    pub no_foreground_warnings: usize,
    pub degenerate_second_pass: usize,
    pub val_map50: Option<f64>,
    pub val_map50_oam: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub telemetry: Vec<EpochRecord>,
    pub pool_trajectory: Vec<PoolSnapshot>,
    pub pool: SemiStrongPool,
}

/// Endless reshuffled pass over a list of ids.
struct Cycler {
    ids: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(ids: Vec<usize>) -> Self {
        let pos = ids.len();
        Self { ids, pos }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !self.ids.is_empty() {
            if self.pos == self.ids.len() {
                self.ids.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.ids[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Per-scene data reused across iterations.
struct SceneCache {
    integral: IntegralImage,
    features: Vec<Vec<f64>>,
    /// Ground-truth targets of every proposal (strong images only).
    targets: Option<Vec<ProposalTarget>>,
}

fn build_cache(scenes: &[SceneRecord], cfg: &TrainConfig) -> Result<Vec<SceneCache>> {
    scenes
        .iter()
        .map(|s| {
            let integral = IntegralImage::new(&s.grid);
            let features =
                s.proposals.boxes.iter().map(|b| integral.pool(b, cfg.pool_size)).collect::<Result<Vec<_>>>()?;
            let targets = (s.tier == Tier::Strong)
                .then(|| assign_targets(&s.proposals.boxes, &s.gt, cfg.fg_iou));
            Ok(SceneCache { integral, features, targets })
        })
        .collect()
}

#[derive(Default)]
struct EpochAccum {
    l1b: [f64; 3],
    l2b: [f64; 3],
    attempts: usize,
    accepted: usize,
    rejected: [usize; 3],
    semi_slots: usize,
    fallback_slots: usize,
    grad_oam: f64,
    grad_sup: f64,
    gaps: usize,
    no_fg: usize,
    degenerate: usize,
}

/// Trains both branches jointly. Deterministic given the dataset and config.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let strong_ids = dataset.strong_ids();
    let weak_ids = dataset.weak_ids();
    if strong_ids.is_empty() {
        return Err(Error::Config("training needs at least one strong image".into()));
    }
    let cache = build_cache(&dataset.train, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg.model_config(dataset), &mut rng);
    let loss_cfg = cfg.loss_config();
    let mut oam_strong = Cycler::new(strong_ids.clone());
    let mut sup_strong = Cycler::new(strong_ids.clone());
    let mut pool = SemiStrongPool::new();
    let mut telemetry = Vec::with_capacity(cfg.epochs);
    let mut trajectory = Vec::with_capacity(cfg.epochs);

    let weak_per = cfg.oam_weak_per_batch.max(1);
    let iterations = if weak_ids.is_empty() || cfg.oam_weak_per_batch == 0 {
        strong_ids.len().div_ceil(cfg.oam_strong_per_batch.max(1))
    } else {
        weak_ids.len().div_ceil(weak_per)
    };

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let sgd = SgdConfig { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        let mut order = weak_ids.clone();
        order.shuffle(&mut rng);
        let mut acc = EpochAccum::default();

        for it in 0..iterations {
            let weak_batch: &[usize] = if cfg.oam_weak_per_batch == 0 {
                &[]
            } else {
                let lo = (it * weak_per).min(order.len());
                &order[lo..(lo + weak_per).min(order.len())]
            };
            let strong_batch = oam_strong.take(cfg.oam_strong_per_batch, &mut rng);

            // annotation branch
            let samples: Vec<_> = strong_batch
                .iter()
                .map(|&id| {
                    let t = cache[id].targets.as_ref().expect("strong image has targets");
                    sample_proposals(t, cfg.proposal_batch, cfg.fg_fraction, &mut rng)
                })
                .collect();
            let mut oam_batch: Vec<OamImage> = strong_batch
                .iter()
                .zip(&samples)
                .map(|(&id, s)| OamImage {
                    scene: &dataset.train[id],
                    integral: &cache[id].integral,
                    features: &cache[id].features,
                    sample: Some(s),
                })
                .collect();
            oam_batch.extend(weak_batch.iter().map(|&id| OamImage {
                scene: &dataset.train[id],
                integral: &cache[id].integral,
                features: &cache[id].features,
                sample: None,
            }));
            let mut grads = params.net.zeros_like();
            let l1 = oam_branch_loss(&params, &oam_batch, &loss_cfg, Some(&mut grads))?;

            // pseudo-annotation against the current parameters
            if cfg.flags.oam {
                let predictor = OamPredictor { params: &params };
                for &id in weak_batch {
                    let outcome =
                        generate_annotation(&dataset.train[id], &cache[id].integral, &predictor, &cfg.annotation)?;
                    acc.attempts += 1;
                    match &outcome {
                        AnnotationOutcome::Accepted(_) => acc.accepted += 1,
                        AnnotationOutcome::Rejected(r) => acc.rejected[rejection_slot(*r)] += 1,
                    }
                    pool.update(id, &outcome, epoch);
                }
            }

            // supervised branch
            let semi_ids: Vec<usize> = if cfg.flags.oam {
                let ids = pool.ids();
                ids.choose_multiple(&mut rng, cfg.sup_semi_per_batch.min(ids.len())).copied().collect()
            } else {
                Vec::new()
            };
            let fallback = cfg.sup_semi_per_batch - semi_ids.len();
            acc.semi_slots += semi_ids.len();
            acc.fallback_slots += fallback;
            let strong_sup = sup_strong.take(cfg.sup_strong_per_batch + fallback, &mut rng);
            let mut sup_batch = Vec::with_capacity(strong_sup.len() + semi_ids.len());
            for &id in &strong_sup {
                let s = &dataset.train[id];
                sup_batch.push(SupImage::strong(s, &cache[id].features, cfg.proposal_batch, cfg.fg_fraction, cfg.fg_iou, &mut rng));
            }
            for &id in &semi_ids {
                let s = &dataset.train[id];
                sup_batch.push(SupImage::semi_strong(
                    s,
                    &pool,
                    &cache[id].features,
                    cfg.proposal_batch,
                    cfg.fg_fraction,
                    cfg.fg_iou,
                    &mut rng,
                )?);
            }
            let mut sup_grads = params.net.zeros_like();
            let l2 = supervised_branch_loss(&params, &sup_batch, Some(&mut sup_grads))?;

            if !l1.total().is_finite() || !l2.total().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: it,
                    detail: format!(
                        "L_1B {l1:?}; L_2B {l2:?}; weak {weak_batch:?}; strong {strong_batch:?}; \
                         supervised strong {strong_sup:?}; semi-strong {semi_ids:?}"
                    ),
                });
            }

            let g_oam = grads.encoder_for(Branch::Oam).squared_norm().sqrt();
            let g_sup = sup_grads.encoder_for(Branch::Supervised).squared_norm().sqrt();
            if cfg.flags.se && l1.total() > 0.0 && l2.total() > 0.0 && (g_oam == 0.0 || g_sup == 0.0) {
                acc.gaps += 1;
            }
            acc.grad_oam += g_oam;
            acc.grad_sup += g_sup;
            acc.l1b[0] += l1.strong_first;
            acc.l1b[1] += l1.weak_first;
            acc.l1b[2] += l1.strong_second + l1.weak_second;
            acc.l2b[0] += l2.strong_cls;
            acc.l2b[1] += l2.strong_reg;
            acc.l2b[2] += l2.semi_cls;
            acc.no_fg += l1.no_foreground;
            acc.degenerate += l1.degenerate_second_pass;

            grads.add_assign(&sup_grads);
            grads.check_finite()?;
            params.sgd_step(&grads, sgd);
        }

        let n_it = iterations.max(1) as f64;
        let mut snapshot = PoolSnapshot::of(&pool, epoch, weak_ids.len());
        snapshot.attempts = acc.attempts;
        snapshot.accepted = acc.accepted;
        for r in [Rejection::NoDetections, Rejection::NoConvergence, Rejection::ClassMismatch] {
            snapshot.rejected.insert(r, acc.rejected[rejection_slot(r)]);
        }
        let evaluate_now = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let (val_map50, val_map50_oam) = if evaluate_now {
            let sup = evaluate(&SupervisedPredictor { params: &params }, &dataset.test, &cfg.detect)?;
            let oam = evaluate(&OamPredictor { params: &params }, &dataset.test, &cfg.detect)?;
            (Some(sup.map50), Some(oam.map50))
        } else {
            (None, None)
        };
        let mean_t = if pool.is_empty() {
            0.0
        } else {
            pool.entries().map(|e| e.t as f64).sum::<f64>() / pool.len() as f64
        };
        let record = EpochRecord {
            epoch,
            lr,
            iterations,
            l1b: (acc.l1b.iter().sum::<f64>()) / n_it,
            l1b_strong_first: acc.l1b[0] / n_it,
            l1b_weak_first: acc.l1b[1] / n_it,
            l1b_second: acc.l1b[2] / n_it,
            l2b: acc.l2b.iter().sum::<f64>() / n_it,
            l2b_strong_cls: acc.l2b[0] / n_it,
            l2b_strong_reg: acc.l2b[1] / n_it,
            l2b_semi_cls: acc.l2b[2] / n_it,
            pool_size: pool.len(),
            pool_fraction: snapshot.fraction,
            pool_mean_t: mean_t,
            annotation_attempts: acc.attempts,
            accepted: acc.accepted,
            rejected_no_detections: acc.rejected[0],
            rejected_no_convergence: acc.rejected[1],
            rejected_class_mismatch: acc.rejected[2],
            semi_strong_slots: acc.semi_slots,
            fallback_slots: acc.fallback_slots,
            encoder_grad_oam: acc.grad_oam / n_it,
            encoder_grad_sup: acc.grad_sup / n_it,
            shared_encoder_gaps: acc.gaps,
            no_foreground_warnings: acc.no_fg,
            degenerate_second_pass: acc.degenerate,
            val_map50,
            val_map50_oam,
        };
        if acc.no_fg > 0 {
            log::warn!("epoch {epoch}: {} strong images sampled without foreground proposals", acc.no_fg);
        }
        log::info!(
            "epoch {epoch}: L_1B {:.4} L_2B {:.4} pool {}/{} ({:.1}%)",
            record.l1b,
            record.l2b,
            pool.len(),
            weak_ids.len(),
            100.0 * record.pool_fraction
        );
        telemetry.push(record);
        trajectory.push(snapshot);
    }
    Ok(TrainOutput { params, telemetry, pool_trajectory: trajectory, pool })
}

fn rejection_slot(r: Rejection) -> usize {
    match r {
        Rejection::NoDetections => 0,
        Rejection::NoConvergence => 1,
        Rejection::ClassMismatch => 2,
    }
}

/// Writes epoch records as CSV.
pub fn write_telemetry_csv<W: Write>(records: &[EpochRecord], w: W) -> std::result::Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Test-split metrics of both branches of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub supervised: Metrics,
    pub oam: Metrics,
}

pub fn evaluate_run(params: &ModelParams, dataset: &Dataset, detect: &DetectConfig) -> Result<RunMetrics> {
    Ok(RunMetrics {
        supervised: evaluate(&SupervisedPredictor { params }, &dataset.test, detect)?,
        oam: evaluate(&OamPredictor { params }, &dataset.test, detect)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: String,
    pub se: bool,
    pub oam: bool,
    pub bba: bool,
    pub seed: u64,
    /// Supervised branch (the deployed detector).
    pub map50: f64,
    pub ap50_95: f64,
    /// Annotation branch used as a detector.
    pub map50_oam: f64,
    pub final_pool_fraction: f64,
}

/// Trains and evaluates every configured flag combination for every seed.
pub fn run_ablation_matrix(dataset: &Dataset, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(base.ablation.len() * seeds.len());
    for &flags in &base.ablation {
        for &seed in seeds {
            let cfg = TrainConfig { flags, seed, ..base.clone() };
            let out = train(dataset, &cfg)?;
            let m = evaluate_run(&out.params, dataset, &cfg.detect)?;
            log::info!("ablation {flags} seed {seed}: mAP50 {:.4}", m.supervised.map50);
            rows.push(AblationRow {
                flags: flags.to_string(),
                se: flags.se,
                oam: flags.oam,
                bba: flags.bba,
                seed,
                map50: m.supervised.map50,
                ap50_95: m.supervised.ap50_95,
                map50_oam: m.oam.map50,
                final_pool_fraction: out.pool_trajectory.last().map_or(0.0, |s| s.fraction),
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> std::result::Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_dataset, DatasetConfig, WorldConfig};

    fn tiny() -> Dataset {
        let world = WorldConfig { height: 24, width: 24, classes: 2, max_objects: 2, max_side: 12, ..WorldConfig::default() };
        let mut world = world;
        world.proposals.count = 16;
        generate_dataset(&DatasetConfig { world, n_train: 12, n_test: 4, shots: 2 }, 5).unwrap()
    }

    fn quick(flags: Flags) -> TrainConfig {
        TrainConfig { epochs: 2, lr_drop_epochs: 1, hidden: 8, flags, ..TrainConfig::default() }
    }

    #[test]
    fn flags_round_trip_through_text() {
        for f in Flags::chain() {
            assert_eq!(f.to_string().parse::<Flags>().unwrap(), f);
        }
        assert_eq!("bba,se".parse::<Flags>().unwrap(), Flags { se: true, bba: true, oam: false });
        assert!("fpn".parse::<Flags>().is_err());
        assert_eq!(Flags::ALL.to_string(), "SE+OAM+BBA");
    }

    #[test]
    fn schedule_drops_for_the_last_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 0.001);
        assert_eq!(cfg.lr_at(13), 0.001);
        assert!((cfg.lr_at(14) - 0.0001).abs() < 1e-15);
        assert!((cfg.lr_at(20) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "warmup": 1}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "flags": {"se": true, "bba": false, "oam": true}}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.001);
    }

    #[test]
    fn training_is_deterministic() {
        let d = tiny();
        let a = train(&d, &quick(Flags::ALL)).unwrap();
        let b = train(&d, &quick(Flags::ALL)).unwrap();
        assert_eq!(a.telemetry, b.telemetry);
        assert_eq!(a.params, b.params);
        assert_eq!(a.pool, b.pool);
    }

    #[test]
    fn empty_pool_falls_back_to_strong_images() {
        let d = tiny();
        let out = train(&d, &quick(Flags { oam: false, ..Flags::ALL })).unwrap();
        let first = &out.telemetry[0];
        assert_eq!(first.semi_strong_slots, 0);
        assert_eq!(first.fallback_slots, 2 * first.iterations);
        assert_eq!(first.annotation_attempts, 0);
        assert!(out.pool.is_empty());
    }

    #[test]
    fn shared_encoder_gets_gradient_from_both_branches() {
        let d = tiny();
        let out = train(&d, &quick(Flags::ALL)).unwrap();
        for r in &out.telemetry {
            assert_eq!(r.shared_encoder_gaps, 0);
            assert!(r.encoder_grad_oam > 0.0 && r.encoder_grad_sup > 0.0);
        }
    }

    #[test]
    fn pool_only_holds_weak_images() {
        let d = tiny();
        let out = train(&d, &quick(Flags::ALL)).unwrap();
        let weak = d.weak_ids();
        assert!(out.pool.ids().iter().all(|id| weak.contains(id)));
        for e in out.pool.entries() {
            assert!(e.boxes.iter().all(|b| (0.0..=1.0).contains(&b.weight)));
            assert!(e.t >= 1);
        }
    }

    #[test]
    fn no_strong_images_is_an_error() {
        let mut d = tiny();
        for s in &mut d.train {
            s.tier = Tier::Weak;
        }
        assert!(matches!(train(&d, &quick(Flags::ALL)), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_rows_match_single_runs() {
        let d = tiny();
        let base = TrainConfig { ablation: vec![Flags::NONE, Flags::ALL], ..quick(Flags::ALL) };
        let rows = run_ablation_matrix(&d, &base, &[1, 2]).unwrap();
        assert_eq!(rows.len(), 4);
        let single = train(&d, &TrainConfig { flags: Flags::ALL, seed: 2, ..base.clone() }).unwrap();
        let m = evaluate_run(&single.params, &d, &base.detect).unwrap();
        assert_eq!(rows[3].map50, m.supervised.map50);
        assert_eq!(rows[3].flags, "SE+OAM+BBA");
        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
