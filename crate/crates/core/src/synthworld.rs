//! Seedable synthetic detection world: scene layout, rendering of feature
//! grids, simulated region proposals and the strong/weak N-shot split.
//!
//! Every class owns a fixed per-channel appearance signature. Objects are
//! axis-aligned rectangles painted with their class signature (plus an
//! optional per-instance perturbation) over a background signature, then the
//! whole grid receives i.i.d. Gaussian noise.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const DATASET_MAGIC: &[u8; 8] = b"OAMDSET\n";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// No occlusion, half noise.
    Easy,
    Medium,
    /// Object counts biased towards the maximum, 1.5x noise.
    Hard,
}

impl Difficulty {
    fn noise_multiplier(self) -> f64 {
        match self {
            Difficulty::Easy => 0.5,
            Difficulty::Medium => 1.0,
            Difficulty::Hard => 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Proposals per image (B).
    pub count: usize,
    /// Corner jitter of foreground proposals, as a fraction of the object size.
    pub jitter: f64,
    /// Fraction of proposals derived from ground-truth boxes.
    pub fg_fraction: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { count: 64, jitter: 0.1, fg_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// IoU cap between placed objects.
    pub max_overlap: f64,
    /// Per-pixel appearance noise.
    pub noise_sigma: f64,
    /// Per-instance, per-channel perturbation of the class signature.
    pub instance_sigma: f64,
    /// Norm of every class signature.
    pub signature_scale: f64,
    pub difficulty: Difficulty,
    pub proposals: ProposalConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            classes: 6,
            min_objects: 1,
            max_objects: 4,
            min_side: 8,
            max_side: 28,
            max_overlap: 0.4,
            noise_sigma: 0.5,
            instance_sigma: 0.0,
            signature_scale: 1.0,
            difficulty: Difficulty::Medium,
            proposals: ProposalConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.classes > max_signatures(self.channels) {
            return bad(format!(
                "{} channels support at most {} class signatures",
                self.channels,
                max_signatures(self.channels)
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must be non-empty and start at >= 1".into());
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.height.min(self.width) {
            return bad("object side range must be non-empty and fit in the grid".into());
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.instance_sigma >= 0.0 && self.signature_scale > 0.0) {
            return bad("noise levels must be >= 0 and signature_scale > 0".into());
        }
        let p = &self.proposals;
        if p.count < 8 || p.count < 2 * self.max_objects {
            return bad(format!("proposal count {} must be >= 8 and >= 2x max_objects", p.count));
        }
        if !(0.0..=1.0).contains(&p.fg_fraction) || p.jitter.is_nan() || p.jitter < 0.0 {
            return bad("fg_fraction must lie in [0, 1] and jitter must be >= 0".into());
        }
        Ok(())
    }

    pub fn signatures(&self) -> Vec<Vec<f64>> {
        class_signatures(self.channels, self.classes, self.signature_scale)
    }

    pub fn background_signature(&self) -> Vec<f64> {
        vec![0.0; self.channels]
    }
}

/// Everything `gen-data` needs apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub n_train: usize,
    pub n_test: usize,
    /// Strong images per class.
    pub shots: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { world: WorldConfig::default(), n_train: 600, n_test: 300, shots: 10 }
    }
}

fn max_signatures(channels: usize) -> usize {
    3usize.saturating_pow(channels as u32).saturating_sub(1)
}

/// Signatures drawn from `{-1, 0, 1}^channels`, sparsest first, scaled to norm
/// `scale`. The first `2 * channels` are signed axis directions.
pub fn class_signatures(channels: usize, classes: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(classes);
    'outer: for support in 1..=channels {
        let mut patterns: Vec<Vec<f64>> = Vec::new();
        for code in 0..3usize.pow(channels as u32) {
            let mut v = Vec::with_capacity(channels);
            let mut c = code;
            for _ in 0..channels {
                v.push(match c % 3 {
                    0 => 0.0,
                    1 => 1.0,
                    _ => -1.0,
                });
                c /= 3;
            }
            if v.iter().filter(|x| **x != 0.0).count() == support {
                patterns.push(v);
            }
        }
        // +e0, -e0, +e1, -e1, ...
        patterns.sort_by_key(|v| {
            v.iter()
                .map(|&x| if x > 0.0 { 0u8 } else if x < 0.0 { 1 } else { 2 })
                .collect::<Vec<_>>()
        });
        for p in patterns {
            if out.len() == classes {
                break 'outer;
            }
            let norm = (support as f64).sqrt();
            out.push(p.iter().map(|x| x * scale / norm).collect());
        }
    }
    out
}

/// Dense `H x W x C` grid stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn filled(height: usize, width: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(height * width * value.len());
        for _ in 0..height * width {
            data.extend(value.iter().map(|v| *v as f32));
        }
        Self { height, width, channels: value.len(), data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Strong,
    Weak,
    /// Held-out evaluation image with full annotations.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub image_id: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: usize,
    pub grid: FeatureGrid,
    pub gt: Vec<GtObject>,
    /// Sorted, de-duplicated class ids of `gt`.
    pub labels: Vec<usize>,
    pub tier: Tier,
    pub proposals: ProposalSet,
}

impl SceneRecord {
    pub fn label_vector(&self, classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; classes];
        for &c in &self.labels {
            y[c] = 1.0;
        }
        y
    }

    pub fn has_label(&self, class_id: usize) -> bool {
        self.labels.binary_search(&class_id).is_ok()
    }
}

/// Scene layout before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<GtObject>,
}

pub fn labels_of(gt: &[GtObject]) -> Vec<usize> {
    gt.iter().map(|g| g.class_id).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn layout<R: Rng>(cfg: &WorldConfig, rng: &mut R) -> SceneSpec {
    let n = match cfg.difficulty {
        Difficulty::Hard => {
            let a = rng.random_range(cfg.min_objects..=cfg.max_objects);
            let b = rng.random_range(cfg.min_objects..=cfg.max_objects);
            a.max(b)
        }
        _ => rng.random_range(cfg.min_objects..=cfg.max_objects),
    };
    let overlap_cap = if cfg.difficulty == Difficulty::Easy { 0.0 } else { cfg.max_overlap };
    let mut objects: Vec<GtObject> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..100 {
            let w = rng.random_range(cfg.min_side..=cfg.max_side);
            let h = rng.random_range(cfg.min_side..=cfg.max_side);
            let x = rng.random_range(0..=cfg.width - w);
            let y = rng.random_range(0..=cfg.height - h);
            let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
                .expect("positive integer extent");
            let class_id = rng.random_range(0..cfg.classes);
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= overlap_cap) {
                objects.push(GtObject { class_id, bbox });
                break;
            }
        }
    }
    SceneSpec { objects }
}

/// Paints objects in order (later objects occlude earlier ones), then adds
/// pixel noise.
pub fn render<R: Rng>(cfg: &WorldConfig, spec: &SceneSpec, rng: &mut R) -> FeatureGrid {
    let signatures = cfg.signatures();
    let mut grid = FeatureGrid::filled(cfg.height, cfg.width, &cfg.background_signature());
    let instance = Normal::new(0.0, cfg.instance_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for obj in &spec.objects {
        let mut appearance = signatures[obj.class_id].clone();
        if cfg.instance_sigma > 0.0 {
            for a in appearance.iter_mut() {
                *a += instance.sample(rng);
            }
        }
        let (c0, c1) = pixel_span(obj.bbox.x1(), obj.bbox.x2(), cfg.width);
        let (r0, r1) = pixel_span(obj.bbox.y1(), obj.bbox.y2(), cfg.height);
        for row in r0..r1 {
            for col in c0..c1 {
                for (ch, a) in appearance.iter().enumerate() {
                    grid.set(row, col, ch, *a as f32);
                }
            }
        }
    }
    let sigma = cfg.noise_sigma * cfg.difficulty.noise_multiplier();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("valid sigma");
        for v in grid.data.iter_mut() {
            *v = (*v as f64 + noise.sample(rng)) as f32;
        }
    }
    grid
}

/// Half-open range of pixel indices whose centers lie in `[lo, hi)`.
pub fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
    (a.min(b), b)
}

/// Simulated region proposals: `round(fg_fraction * B)` jittered copies of the
/// ground-truth boxes (assigned round-robin), the rest uniformly random.
pub fn propose<R: Rng>(
    scene_id: usize,
    gt: &[GtObject],
    cfg: &WorldConfig,
    count: usize,
    jitter: f64,
    fg_fraction: f64,
    rng: &mut R,
) -> ProposalSet {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let n_fg = if gt.is_empty() { 0 } else { (fg_fraction * count as f64).round() as usize };
    let mut boxes = Vec::with_capacity(count);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for k in 0..n_fg {
        let g = gt[k % gt.len()].bbox;
        let jittered = if jitter == 0.0 {
            Some(g)
        } else {
            let mut found = None;
            for _ in 0..20 {
                let dx1 = jitter * g.width() * normal.sample(rng);
                let dx2 = jitter * g.width() * normal.sample(rng);
                let dy1 = jitter * g.height() * normal.sample(rng);
                let dy2 = jitter * g.height() * normal.sample(rng);
                let cand = BBox::new(g.x1() + dx1, g.y1() + dy1, g.x2() + dx2, g.y2() + dy2)
                    .ok()
                    .and_then(|b| b.clip(w, h))
                    .filter(|b| b.width() >= 1.0 && b.height() >= 1.0);
                if cand.is_some() {
                    found = cand;
                    break;
                }
            }
            found
        };
        boxes.push(jittered.unwrap_or(g));
    }
    let min_side = 4.0f64.min(w).min(h);
    while boxes.len() < count {
        let bw = rng.random_range(min_side..=w);
        let bh = rng.random_range(min_side..=h);
        let x = rng.random_range(0.0..=(w - bw));
        let y = rng.random_range(0.0..=(h - bh));
        boxes.push(BBox::new(x, y, x + bw, y + bh).expect("positive extent"));
    }
    ProposalSet { image_id: scene_id, boxes }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub n_strong: usize,
    pub n_weak: usize,
    /// Strong images containing each class.
    pub strong_per_class: Vec<usize>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.config.world.classes
    }

    pub fn strong_ids(&self) -> Vec<usize> {
        self.train.iter().filter(|s| s.tier == Tier::Strong).map(|s| s.id).collect()
    }

    pub fn weak_ids(&self) -> Vec<usize> {
        self.train.iter().filter(|s| s.tier == Tier::Weak).map(|s| s.id).collect()
    }

    pub fn summary(&self) -> SplitSummary {
        let mut strong_per_class = vec![0; self.classes()];
        for s in self.train.iter().filter(|s| s.tier == Tier::Strong) {
            for &c in &s.labels {
                strong_per_class[c] += 1;
            }
        }
        let n_strong = self.strong_ids().len();
        SplitSummary {
            n_train: self.train.len(),
            n_test: self.test.len(),
            n_strong,
            n_weak: self.train.len() - n_strong,
            strong_per_class,
        }
    }
}

/// Builds the train/test scenes and marks the N-shot strong subset.
///
/// Classes are served rarest first; each class takes not-yet-strong images
/// containing it (in seeded random order) until it is covered by `shots`
/// strong images. Images count towards every class they contain.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    let world = &cfg.world;
    world.validate()?;
    if cfg.shots * world.classes > cfg.n_train {
        return Err(Error::InfeasibleShots {
            shots: cfg.shots,
            reason: format!("{} x {} classes exceeds {} training images", cfg.shots, world.classes, cfg.n_train),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &world.proposals;
    let make = |id: usize, tier: Tier, rng: &mut ChaCha8Rng| {
        let spec = layout(world, rng);
        let grid = render(world, &spec, rng);
        let proposals = propose(id, &spec.objects, world, p.count, p.jitter, p.fg_fraction, rng);
        SceneRecord { id, grid, labels: labels_of(&spec.objects), gt: spec.objects, tier, proposals }
    };
    let mut train: Vec<SceneRecord> = (0..cfg.n_train).map(|i| make(i, Tier::Weak, &mut rng)).collect();
    let test: Vec<SceneRecord> =
        (0..cfg.n_test).map(|i| make(cfg.n_train + i, Tier::Test, &mut rng)).collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut frequency = vec![0usize; world.classes];
    for s in &train {
        for &c in &s.labels {
            frequency[c] += 1;
        }
    }
    let mut classes: Vec<usize> = (0..world.classes).collect();
    classes.sort_by_key(|&c| (frequency[c], c));
    for c in classes {
        let mut have = train.iter().filter(|s| s.tier == Tier::Strong && s.has_label(c)).count();
        for &i in &order {
            if have >= cfg.shots {
                break;
            }
            if train[i].tier == Tier::Weak && train[i].has_label(c) {
                train[i].tier = Tier::Strong;
                have += 1;
            }
        }
        if have < cfg.shots {
            return Err(Error::InfeasibleShots {
                shots: cfg.shots,
                reason: format!("class {c} appears in only {have} training images"),
            });
        }
    }
    Ok(Dataset { config: cfg.clone(), seed, train, test })
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    id: usize,
    tier: Tier,
    gt: Vec<GtObject>,
    labels: Vec<usize>,
    proposals: Vec<BBox>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    seed: u64,
    config: DatasetConfig,
    summary: SplitSummary,
    train: Vec<SceneMeta>,
    test: Vec<SceneMeta>,
}

impl Dataset {
    /// Layout: 8-byte magic, `u32` LE version, `u64` LE header length, JSON
    /// header (config, seed, scene metadata and proposals), then every grid
    /// (train then test) as `H*W*C` little-endian `f32` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let meta = |s: &SceneRecord| SceneMeta {
            id: s.id,
            tier: s.tier,
            gt: s.gt.clone(),
            labels: s.labels.clone(),
            proposals: s.proposals.boxes.clone(),
        };
        let header = DatasetHeader {
            format: "oamdet-dataset".into(),
            version: DATASET_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            summary: self.summary(),
            train: self.train.iter().map(meta).collect(),
            test: self.test.iter().map(meta).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for s in self.train.iter().chain(&self.test) {
            buf.clear();
            for v in &s.grid.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != DATASET_MAGIC {
            return Err(fmt("not an oamdet dataset file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| fmt("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != DATASET_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                expected: "dataset",
                want: DATASET_VERSION,
                found: version.to_string(),
            });
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| fmt("truncated header"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(fmt("truncated header"));
        }
        let header: DatasetHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let world = &header.config.world;
        world.validate()?;
        let cells = world.height * world.width * world.channels;
        let n = header.train.len() + header.test.len();
        if r.len() != n * cells * 4 {
            return Err(fmt("grid payload size does not match the header"));
        }
        let mut chunks = r.chunks_exact(cells * 4);
        let mut build = |m: SceneMeta| -> Result<SceneRecord> {
            let raw = chunks.next().ok_or_else(|| fmt("missing grid"))?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if m.labels != labels_of(&m.gt) {
                return Err(fmt(&format!("scene {}: labels disagree with ground truth", m.id)));
            }
            Ok(SceneRecord {
                id: m.id,
                grid: FeatureGrid { height: world.height, width: world.width, channels: world.channels, data },
                gt: m.gt,
                labels: m.labels,
                tier: m.tier,
                proposals: ProposalSet { image_id: m.id, boxes: m.proposals },
            })
        };
        let train = header.train.into_iter().map(&mut build).collect::<Result<Vec<_>>>()?;
        let test = header.test.into_iter().map(&mut build).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { config: header.config, seed: header.seed, train, test })
    }
}
