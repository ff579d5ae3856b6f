//! Seeded synthetic scenes standing in for a backbone and a proposal
//! network.
//!
//! Each object stamps a class-specific channel signature into every `C`
//! level, weighted by how much of each cell the box covers. Proposals are
//! jittered copies of the objects plus random background boxes, labeled by
//! IoU against the planted objects.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::prng;
use crate::pyramid::{FeatureHierarchy, STRIDES};
use crate::roi::RoiBox;
use crate::tensor::{Real, Tensor};

use super::config::RunConfig;

pub const POSITIVE_IOU: f64 = 0.5;
/// Jitter of each box edge, as a fraction of the box size.
pub const JITTER: f64 = 0.2;
pub const JITTERED_PER_OBJECT: usize = 2;
pub const NEGATIVES_PER_POSITIVE: usize = 3;
pub const MIN_OBJECT_SIDE: f64 = 5.0;
pub const MAX_OBJECT_SIDE: f64 = 48.0;
const BACKGROUND_NOISE: f64 = 0.1;
const MAX_DRAWS: usize = 1000;

/// Independent generator streams derived from one run seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub const SCENE_STREAM: u64 = 1;
pub const PARAM_STREAM: u64 = 2;
pub const ORDER_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// `C2..C5` for this scene alone, batch 1.
    pub levels: [Tensor<f64>; 4],
    /// Planted objects; `class_target` holds the class.
    pub objects: Vec<RoiBox>,
    /// Labeled proposals with `batch_index` 0.
    pub proposals: Vec<RoiBox>,
}

/// Class signatures, one vector per `(class, level)`.
#[derive(Debug, Clone)]
struct Signatures {
    vectors: Vec<[Vec<f64>; 4]>,
}

impl Signatures {
    fn draw<R: Rng>(classes: usize, channels: [usize; 4], rng: &mut R) -> Self {
        let vectors = (0..classes)
            .map(|_| channels.map(|c| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        Self { vectors }
    }
}

fn clamp_box(b: [f64; 4], (h, w): (f64, f64)) -> Option<[f64; 4]> {
    let x1 = b[0].clamp(0.0, w);
    let y1 = b[1].clamp(0.0, h);
    let x2 = b[2].clamp(0.0, w);
    let y2 = b[3].clamp(0.0, h);
    (x2 - x1 >= 1.0 && y2 - y1 >= 1.0).then_some([x1, y1, x2, y2])
}

fn random_object<R: Rng>(rng: &mut R, (h, w): (f64, f64)) -> [f64; 4] {
    let side = (rng.random_range(MIN_OBJECT_SIDE.ln()..MAX_OBJECT_SIDE.ln())).exp();
    let aspect: f64 = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
    let bw = (side * aspect.sqrt()).min(w - 1.0);
    let bh = (side / aspect.sqrt()).min(h - 1.0);
    let x1 = rng.random_range(0.0..w - bw);
    let y1 = rng.random_range(0.0..h - bh);
    [x1, y1, x1 + bw, y1 + bh]
}

fn jitter<R: Rng>(rng: &mut R, obj: &RoiBox) -> [f64; 4] {
    let (bw, bh) = (obj.width(), obj.height());
    let mut d = || rng.random_range(-JITTER..JITTER);
    [obj.x1 + d() * bw, obj.y1 + d() * bh, obj.x2 + d() * bw, obj.y2 + d() * bh]
}

fn random_box<R: Rng>(rng: &mut R, (h, w): (f64, f64)) -> [f64; 4] {
    let bw = rng.random_range(4.0..0.75 * w);
    let bh = rng.random_range(4.0..0.75 * h);
    let x1 = rng.random_range(0.0..w - bw);
    let y1 = rng.random_range(0.0..h - bh);
    [x1, y1, x1 + bw, y1 + bh]
}

fn best_match(b: &RoiBox, objects: &[RoiBox]) -> Option<(usize, f64)> {
    objects
        .iter()
        .enumerate()
        .map(|(i, o)| (i, b.iou(o)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

/// Labels a proposal against the planted objects.
pub fn label(proposal: RoiBox, objects: &[RoiBox]) -> RoiBox {
    match best_match(&proposal, objects) {
        Some((i, iou)) if iou >= POSITIVE_IOU => {
            let deltas = proposal.deltas_to(&objects[i]);
            proposal.with_targets(objects[i].class_target, deltas)
        }
        _ => proposal.with_targets(0, [0.0; 4]),
    }
}

fn stamp(level: &mut Tensor<f64>, stride: usize, obj: &RoiBox, signature: &[f64]) {
    let [_, c, h, w] = level.nchw().expect("levels are 4-d");
    let s = stride as f64;
    let plane = h * w;
    let data = level.data_mut();
    for i in 0..h {
        let cover_y = ((i as f64 + 1.0) * s).min(obj.y2) - (i as f64 * s).max(obj.y1);
        if cover_y <= 0.0 {
            continue;
        }
        for j in 0..w {
            let cover_x = ((j as f64 + 1.0) * s).min(obj.x2) - (j as f64 * s).max(obj.x1);
            if cover_x <= 0.0 {
                continue;
            }
            let fraction = cover_y * cover_x / (s * s);
            for (ch, &v) in signature.iter().enumerate().take(c) {
                data[ch * plane + i * w + j] += fraction * v;
            }
        }
    }
}

impl SyntheticScene {
    fn generate<R: Rng>(cfg: &RunConfig, signatures: &Signatures, rng: &mut R) -> Result<Self> {
        let image = (cfg.image_size[0] as f64, cfg.image_size[1] as f64);
        let count = rng.random_range(1..=cfg.max_objects);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let [x1, y1, x2, y2] = random_object(rng, image);
            let class = rng.random_range(1..=cfg.num_classes);
            objects.push(RoiBox::new(0, x1, y1, x2, y2)?.with_targets(class, [0.0; 4]));
        }

        let mut levels: [Tensor<f64>; 4] = std::array::from_fn(|l| {
            let (h, w) = FeatureHierarchy::<f64>::level_size((cfg.image_size[0], cfg.image_size[1]), l);
            Tensor::uniform(&[1, cfg.c_channels[l], h, w], -BACKGROUND_NOISE, BACKGROUND_NOISE, rng)
        });
        for obj in &objects {
            for (l, level) in levels.iter_mut().enumerate() {
                stamp(level, STRIDES[l], obj, &signatures.vectors[obj.class_target - 1][l]);
            }
        }

        let mut proposals = Vec::new();
        for obj in &objects {
            for k in 0..JITTERED_PER_OBJECT {
                let mut chosen = None;
                for _ in 0..MAX_DRAWS {
                    let Some([x1, y1, x2, y2]) = clamp_box(jitter(rng, obj), image) else {
                        continue;
                    };
                    let candidate = RoiBox::new(0, x1, y1, x2, y2)?;
                    // The first copy must stay a positive for its object.
                    if k > 0 || candidate.iou(obj) >= POSITIVE_IOU {
                        chosen = Some(candidate);
                        break;
                    }
                }
                let candidate = match chosen {
                    Some(c) => c,
                    None => RoiBox::new(0, obj.x1, obj.y1, obj.x2, obj.y2)?,
                };
                proposals.push(label(candidate, &objects));
            }
        }
        let positives = proposals.iter().filter(|p| p.is_positive()).count();
        for _ in 0..positives * NEGATIVES_PER_POSITIVE {
            let mut last = None;
            for _ in 0..MAX_DRAWS {
                let [x1, y1, x2, y2] = random_box(rng, image);
                let candidate = RoiBox::new(0, x1, y1, x2, y2)?;
                let background = best_match(&candidate, &objects).is_none_or(|(_, iou)| iou < POSITIVE_IOU);
                last = Some(candidate);
                if background {
                    break;
                }
            }
            proposals.push(label(last.expect("at least one draw"), &objects));
        }
        let scene = Self {
            levels,
            objects,
            proposals,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Checks the labeling invariants: every object has a positive proposal
    /// and every label follows the IoU rule.
    pub fn validate(&self) -> Result<()> {
        for (i, obj) in self.objects.iter().enumerate() {
            if !self.proposals.iter().any(|p| p.iou(obj) >= POSITIVE_IOU) {
                return Err(Error::Usage(format!("scene object {i} has no proposal at IoU >= 0.5")));
            }
        }
        for (i, p) in self.proposals.iter().enumerate() {
            let expected = label(p.clone(), &self.objects);
            if expected.class_target != p.class_target || expected.regression_target != p.regression_target {
                return Err(Error::Usage(format!("proposal {i} is mislabeled")));
            }
        }
        Ok(())
    }
}

/// The deterministic scene set for a run.
pub fn generate_scenes(cfg: &RunConfig) -> Result<Vec<SyntheticScene>> {
    let mut rng = prng(stream_seed(cfg.seed, SCENE_STREAM));
    let signatures = Signatures::draw(cfg.num_classes, cfg.c_channels, &mut rng);
    (0..cfg.scenes)
        .map(|_| SyntheticScene::generate(cfg, &signatures, &mut rng))
        .collect()
}

/// Stacks scenes into one batch, renumbering proposal batch indices.
pub fn collate<T: Real>(scenes: &[&SyntheticScene]) -> Result<(FeatureHierarchy<T>, Vec<RoiBox>)> {
    if scenes.is_empty() {
        return Err(Error::Usage("collate: no scenes".into()));
    }
    let levels: [Tensor<T>; 4] = std::array::from_fn(|l| {
        let mut dims = scenes[0].levels[l].dims().to_vec();
        dims[0] = scenes.len();
        let data = scenes
            .iter()
            .flat_map(|s| s.levels[l].data().iter().map(|&v| T::from_f64(v)))
            .collect();
        Tensor::new(dims, data).expect("scene levels share a shape")
    });
    let rois = scenes
        .iter()
        .enumerate()
        .flat_map(|(b, s)| {
            s.proposals.iter().map(move |p| RoiBox {
                batch_index: b,
                ..p.clone()
            })
        })
        .collect();
    Ok((FeatureHierarchy::new(levels)?, rois))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            scenes: 20,
            ..RunConfig::default()
        }
    }

    #[test]
    fn scenes_are_valid_and_deterministic() {
        let a = generate_scenes(&small()).unwrap();
        let b = generate_scenes(&small()).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            x.validate().unwrap();
            assert_eq!(x.proposals, y.proposals);
            assert!(x.levels[0].bit_eq(&y.levels[0]));
            let pos = x.proposals.iter().filter(|p| p.is_positive()).count();
            assert_eq!(x.proposals.len() - pos, pos * NEGATIVES_PER_POSITIVE);
        }
    }

    #[test]
    fn stamping_adds_signature_scaled_by_coverage() {
        let mut level = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let obj = RoiBox::new(0, 2.0, 0.0, 4.0, 4.0).unwrap();
        stamp(&mut level, 4, &obj, &[1.0, -2.0]);
        assert_eq!(level.data(), &[0.5, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn collate_renumbers_batches() {
        let scenes = generate_scenes(&small()).unwrap();
        let (h, rois) = collate::<f32>(&[&scenes[0], &scenes[1]]).unwrap();
        assert_eq!(h.batch(), 2);
        assert_eq!(rois.len(), scenes[0].proposals.len() + scenes[1].proposals.len());
        assert!(rois[scenes[0].proposals.len()..].iter().all(|r| r.batch_index == 1));
    }
}
