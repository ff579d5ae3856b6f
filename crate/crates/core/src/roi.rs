//! Region-of-interest geometry, RoI-Align feature extraction, level
//! assignment and soft RoI selection across all pyramid levels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::AlignWindow;
use crate::layers::{self, linear};
use crate::params::{init_linear, ParamStore};
use crate::pyramid::{adaptive_spatial_fusion, init_asf, AsfNormalizer, LEVELS, STRIDES};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// One region proposal in image pixel coordinates plus its training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiBox {
    pub batch_index: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// Ground-truth class, 0 for background.
    pub class_target: usize,
    /// `(dx, dy, dw, dh)` regression target; ignored for background.
    pub regression_target: [f64; 4],
}

impl RoiBox {
    pub fn new(batch_index: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || x2 <= x1 || y2 <= y1 {
            return Err(Error::Usage(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self {
            batch_index,
            x1,
            y1,
            x2,
            y2,
            class_target: 0,
            regression_target: [0.0; 4],
        })
    }

    pub fn with_targets(mut self, class_target: usize, regression_target: [f64; 4]) -> Self {
        self.class_target = class_target;
        self.regression_target = regression_target;
        self
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

    pub fn is_positive(&self) -> bool {
        self.class_target > 0
    }

    pub fn iou(&self, other: &RoiBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        inter / (self.area() + other.area() - inter)
    }

    /// `(dx, dy, dw, dh)` taking this box to `target`: center offsets in
    /// units of this box's size, log size ratios.
    pub fn deltas_to(&self, target: &RoiBox) -> [f64; 4] {
        let (pw, ph) = (self.width(), self.height());
        let (px, py) = (self.x1 + 0.5 * pw, self.y1 + 0.5 * ph);
        let (gw, gh) = (target.width(), target.height());
        let (gx, gy) = (target.x1 + 0.5 * gw, target.y1 + 0.5 * gh);
        [(gx - px) / pw, (gy - py) / ph, (gw / pw).ln(), (gh / ph).ln()]
    }

    fn window(&self, stride: usize) -> AlignWindow {
        AlignWindow::from_image_box(self.batch_index, self.x1, self.y1, self.x2, self.y2, stride as f64)
    }
}

/// Parses one RoI per line: `batch x1 y1 x2 y2 [t* b0 b1 b2 b3]`.
/// `#` starts a comment.
pub fn parse_rois(text: &str) -> Result<Vec<RoiBox>> {
    let mut rois = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format {
            what: "RoI list",
            detail: format!("line {}: {detail}", lineno + 1),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 && fields.len() != 10 {
            return Err(bad(format!("expected 5 or 10 fields, got {}", fields.len())));
        }
        let batch: usize = fields[0].parse().map_err(|_| bad(format!("bad batch index `{}`", fields[0])))?;
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad number `{s}`"))) };
        let mut roi = RoiBox::new(batch, num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?)
            .map_err(|e| bad(e.to_string()))?;
        if fields.len() == 10 {
            let class: usize = fields[5].parse().map_err(|_| bad(format!("bad class `{}`", fields[5])))?;
            let mut target = [0.0; 4];
            for (j, t) in target.iter_mut().enumerate() {
                *t = num(fields[6 + j])?;
            }
            roi = roi.with_targets(class, target);
        }
        rois.push(roi);
    }
    Ok(rois)
}

pub fn render_rois(rois: &[RoiBox]) -> String {
    let mut out = String::from("# batch x1 y1 x2 y2 class dx dy dw dh\n");
    for r in rois {
        let b = r.regression_target;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {}\n",
            r.batch_index, r.x1, r.y1, r.x2, r.y2, r.class_target, b[0], b[1], b[2], b[3]
        ));
    }
    out
}

/// Heuristic level: `floor(k0 + log2(sqrt(w h) / canonical))` clamped to 2..=5.
pub fn assign_level(roi: &RoiBox, k0: usize, canonical_size: f64) -> usize {
    let k = (k0 as f64 + (roi.area().sqrt() / canonical_size).log2()).floor();
    k.clamp(2.0, 5.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiFusionMode {
    HeuristicSingleLevel,
    Sum,
    Max,
    Acf,
    Asf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiFusionConfig {
    pub mode: RoiFusionMode,
    pub output_size: (usize, usize),
    pub sampling_ratio: usize,
    pub acf_reduction: usize,
    /// `k0` of the level-assignment heuristic.
    pub canonical_level: usize,
    /// Box side that maps to `canonical_level`.
    pub canonical_size: f64,
}

impl Default for RoiFusionConfig {
    fn default() -> Self {
        Self {
            mode: RoiFusionMode::Asf,
            output_size: (7, 7),
            sampling_ratio: 2,
            acf_reduction: 4,
            canonical_level: 4,
            canonical_size: 224.0,
        }
    }
}

impl RoiFusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::Config("roi: output size must be positive".into()));
        }
        if self.sampling_ratio == 0 {
            return Err(Error::Config("roi: sampling ratio must be at least 1".into()));
        }
        if self.acf_reduction == 0 {
            return Err(Error::Config("roi: acf reduction must be positive".into()));
        }
        if self.canonical_size.is_nan() || self.canonical_size <= 0.0 {
            return Err(Error::Config("roi: canonical size must be positive".into()));
        }
        Ok(())
    }

    pub fn level_of(&self, roi: &RoiBox) -> usize {
        assign_level(roi, self.canonical_level, self.canonical_size)
    }
}

/// Soft-selection parameters for the chosen mode; `width` is the pyramid
/// channel count.
pub fn init_roi_fusion<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &RoiFusionConfig,
    width: usize,
    rng: &mut R,
) {
    match cfg.mode {
        RoiFusionMode::Asf => init_asf(store, "srs.asf", width, LEVELS.len(), rng),
        RoiFusionMode::Acf => {
            let full = width * LEVELS.len();
            let squeezed = (full / cfg.acf_reduction).max(1);
            init_linear(store, "srs.acf.fc1", (squeezed, full), rng);
            init_linear(store, "srs.acf.fc2", (full, squeezed), rng);
        }
        _ => {}
    }
}

/// RoI-Align of `rois` on one feature map at `stride`; `[R, C, oh, ow]`.
pub fn roi_align<T: Real>(
    tape: &mut Tape<T>,
    feature: Var,
    rois: &[RoiBox],
    stride: usize,
    cfg: &RoiFusionConfig,
) -> Result<Var> {
    let windows: Vec<_> = rois.iter().map(|r| r.window(stride)).collect();
    tape.roi_align(feature, &windows, cfg.output_size, cfg.sampling_ratio)
}

/// Aligned features from every level, each `[R, C, oh, ow]`, in level order.
pub fn align_all_levels<T: Real>(
    tape: &mut Tape<T>,
    levels: [Var; 4],
    rois: &[RoiBox],
    cfg: &RoiFusionConfig,
) -> Result<[Var; 4]> {
    let mut out = levels;
    for i in 0..4 {
        out[i] = roi_align(tape, levels[i], rois, STRIDES[i], cfg)?;
    }
    Ok(out)
}

/// Each RoI aligned only on its heuristically assigned level, returned in
/// the original RoI order.
pub fn align_assigned<T: Real>(
    tape: &mut Tape<T>,
    levels: [Var; 4],
    rois: &[RoiBox],
    cfg: &RoiFusionConfig,
) -> Result<Var> {
    let assigned: Vec<usize> = rois.iter().map(|r| cfg.level_of(r) - 2).collect();
    let mut sources = Vec::new();
    let mut slot = [None; 4];
    let mut row_in_group = vec![0; rois.len()];
    for lvl in 0..4 {
        let members: Vec<usize> = (0..rois.len()).filter(|&r| assigned[r] == lvl).collect();
        if members.is_empty() {
            continue;
        }
        let group: Vec<RoiBox> = members.iter().map(|&r| rois[r].clone()).collect();
        for (j, &r) in members.iter().enumerate() {
            row_in_group[r] = j;
        }
        slot[lvl] = Some(sources.len());
        sources.push(roi_align(tape, levels[lvl], &group, STRIDES[lvl], cfg)?);
    }
    let index: Vec<(usize, usize)> = (0..rois.len())
        .map(|r| (slot[assigned[r]].expect("group exists"), row_in_group[r]))
        .collect();
    tape.gather_rows(&sources, &index)
}

/// SE-style gating over the channel-concatenation of `K` RoI features:
/// global average pool → FC → ReLU → FC → sigmoid, then each feature's
/// channels are scaled by their gate and the `K` results summed.
pub fn adaptive_channel_fusion<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    features: &[Var],
) -> Result<Var> {
    let first = *features
        .first()
        .ok_or_else(|| Error::Usage("adaptive_channel_fusion: no features".into()))?;
    let [r, c, _, _] = tape.value(first).nchw()?;
    for &f in features {
        if tape.dims(f) != tape.dims(first) {
            return Err(Error::Dimension(format!(
                "adaptive_channel_fusion: {:?} vs {:?}",
                tape.dims(first),
                tape.dims(f)
            )));
        }
    }
    let k = features.len();
    let stacked = tape.concat_channels(features)?;
    let pooled = tape.adaptive_avg_pool2d(stacked, 1, 1)?;
    let squeezed = tape.reshape(pooled, &[r, c * k])?;
    let hidden = linear(tape, store, &format!("{prefix}.fc1"), squeezed)?;
    let hidden = tape.relu(hidden);
    let logits = linear(tape, store, &format!("{prefix}.fc2"), hidden)?;
    let gates = tape.sigmoid(logits);
    let gated = tape.channel_scale(stacked, gates)?;
    let parts: Vec<Var> = (0..k)
        .map(|i| tape.slice_channels(gated, i * c, c))
        .collect::<Result<_>>()?;
    layers::sum_all(tape, &parts)
}

#[derive(Debug, Clone)]
pub struct SoftSelection {
    /// Fused RoI features `[R, C, oh, ow]`.
    pub features: Var,
    /// Per-level ASF weight maps `[R, 1, oh, ow]` (ASF mode only).
    pub weight_maps: Vec<Var>,
}

/// RoI features from the `P` levels according to `cfg.mode`.
pub fn soft_roi_select<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: [Var; 4],
    rois: &[RoiBox],
    cfg: &RoiFusionConfig,
) -> Result<SoftSelection> {
    cfg.validate()?;
    if cfg.mode == RoiFusionMode::HeuristicSingleLevel {
        return Ok(SoftSelection {
            features: align_assigned(tape, p, rois, cfg)?,
            weight_maps: Vec::new(),
        });
    }
    let aligned = align_all_levels(tape, p, rois, cfg)?;
    let (features, weight_maps) = match cfg.mode {
        RoiFusionMode::Sum => (layers::sum_all(tape, &aligned)?, Vec::new()),
        RoiFusionMode::Max => {
            let mut acc = aligned[0];
            for &a in &aligned[1..] {
                acc = tape.maximum(acc, a)?;
            }
            (acc, Vec::new())
        }
        RoiFusionMode::Acf => (adaptive_channel_fusion(tape, store, "srs.acf", &aligned)?, Vec::new()),
        RoiFusionMode::Asf => {
            let out = adaptive_spatial_fusion(tape, store, "srs.asf", &aligned, AsfNormalizer::Softmax)?;
            (out.fused, out.weight_maps)
        }
        RoiFusionMode::HeuristicSingleLevel => unreachable!(),
    };
    Ok(SoftSelection {
        features,
        weight_maps,
    })
}

/// Mean ASF weight per source level, grouped by each RoI's assigned level.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioMatrix {
    /// `rows[a][s]`: average weight of source level `P(s+2)` over RoIs
    /// assigned to `P(a+2)`. `None` when no RoI was assigned there.
    pub rows: [Option<[f64; 4]>; 4],
    pub counts: [usize; 4],
}

impl RatioMatrix {
    /// RFC-4180 CSV with `P2..P5` row and column labels; absent rows are
    /// left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("assigned,P2,P3,P4,P5,count\r\n");
        for (a, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("P{}", a + 2));
            match row {
                Some(vals) => {
                    for v in vals {
                        out.push_str(&format!(",{v:.9}"));
                    }
                }
                None => out.push_str(",,,,"),
            }
            out.push_str(&format!(",{}\r\n", self.counts[a]));
        }
        out
    }

    pub fn present_rows(&self) -> impl Iterator<Item = &[f64; 4]> {
        self.rows.iter().flatten()
    }
}

/// Aggregates ASF weight maps `[R, 1, oh, ow]` (one per level) into a
/// [`RatioMatrix`].
pub fn weight_ratio_stats<T: Real>(
    rois: &[RoiBox],
    weight_maps: &[crate::tensor::Tensor<T>],
    cfg: &RoiFusionConfig,
) -> Result<RatioMatrix> {
    if weight_maps.len() != 4 {
        return Err(Error::Usage(format!(
            "weight_ratio_stats: need 4 weight maps, got {}",
            weight_maps.len()
        )));
    }
    let bins = cfg.output_size.0 * cfg.output_size.1;
    for wm in weight_maps {
        if wm.dims() != [rois.len(), 1, cfg.output_size.0, cfg.output_size.1] {
            return Err(Error::Dimension(format!(
                "weight_ratio_stats: map {:?} for {} RoIs",
                wm.dims(),
                rois.len()
            )));
        }
    }
    let mut sums = [[0.0f64; 4]; 4];
    let mut counts = [0usize; 4];
    for (r, roi) in rois.iter().enumerate() {
        let a = cfg.level_of(roi) - 2;
        counts[a] += 1;
        for (s, wm) in weight_maps.iter().enumerate() {
            let mean = wm.data()[r * bins..(r + 1) * bins].iter().map(|v| v.as_f64()).sum::<f64>() / bins as f64;
            sums[a][s] += mean;
        }
    }
    let rows = std::array::from_fn(|a| (counts[a] > 0).then(|| sums[a].map(|v| v / counts[a] as f64)));
    Ok(RatioMatrix { rows, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn square(side: f64) -> RoiBox {
        RoiBox::new(0, 0.0, 0.0, side, side).unwrap()
    }

    #[test]
    fn level_assignment_examples() {
        assert_eq!(assign_level(&square(224.0), 4, 224.0), 4);
        assert_eq!(assign_level(&square(112.0), 4, 224.0), 3);
        assert_eq!(assign_level(&square(1000.0), 4, 224.0), 5);
        assert_eq!(assign_level(&square(10.0), 4, 224.0), 2);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(RoiBox::new(0, 5.0, 0.0, 5.0, 3.0).is_err());
        assert!(RoiBox::new(0, 0.0, 4.0, 3.0, 1.0).is_err());
        assert!(RoiBox::new(0, 0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn roi_text_parsing() {
        let text = "# header\n0 1 2 11 12\n1 0 0 8 8 2 0.1 -0.2 0.0 0.3 # trailing\n\n";
        let rois = parse_rois(text).unwrap();
        assert_eq!(rois.len(), 2);
        assert_eq!(rois[0].class_target, 0);
        assert_eq!(rois[1].batch_index, 1);
        assert_eq!(rois[1].class_target, 2);
        assert_eq!(rois[1].regression_target, [0.1, -0.2, 0.0, 0.3]);
        assert_eq!(parse_rois(&render_rois(&rois)).unwrap(), rois);
        assert!(parse_rois("0 1 2 3\n").is_err());
        assert!(parse_rois("0 5 5 1 1\n").is_err());
    }

    #[test]
    fn deltas_are_zero_for_identical_boxes_and_invert() {
        let a = RoiBox::new(0, 2.0, 3.0, 12.0, 9.0).unwrap();
        assert_eq!(a.deltas_to(&a), [0.0; 4]);
        let b = RoiBox::new(0, 4.0, 1.0, 20.0, 9.0).unwrap();
        let d = a.deltas_to(&b);
        let w = a.width() * d[2].exp();
        let cx = a.x1 + 0.5 * a.width() + d[0] * a.width();
        assert!((w - b.width()).abs() < 1e-12);
        assert!((cx - (b.x1 + 0.5 * b.width())).abs() < 1e-12);
    }

    #[test]
    fn iou_of_half_overlap() {
        let a = RoiBox::new(0, 0.0, 0.0, 2.0, 1.0).unwrap();
        let b = RoiBox::new(0, 1.0, 0.0, 3.0, 1.0).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ratio_stats_from_indicator_maps() {
        let cfg = RoiFusionConfig::default();
        let rois = vec![square(224.0)];
        let maps: Vec<Tensor<f64>> = (0..4)
            .map(|s| Tensor::full(&[1, 1, 7, 7], if s == 0 { 1.0 } else { 0.0 }))
            .collect();
        let m = weight_ratio_stats(&rois, &maps, &cfg).unwrap();
        assert_eq!(m.rows[2], Some([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(m.rows[0], None);
        assert_eq!(m.counts, [0, 0, 1, 0]);
        let csv = m.to_csv();
        assert!(csv.starts_with("assigned,P2,P3,P4,P5,count\r\n"));
        assert!(csv.contains("P2,,,,,0\r\n"));
    }
}
