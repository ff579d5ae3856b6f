//! Feature pyramid construction.
//!
//! Backbone-style inputs `C2..C5` pass through 1×1 lateral convolutions to
//! produce `M2..M5`. Optionally a residual context feature `M6` is built
//! from `C5` by multi-ratio adaptive pooling and fused into `M5`. The
//! top-down pathway then upsamples and adds level by level, and a 3×3
//! convolution per level yields `P2..P5`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::layers::{self, conv};
use crate::params::{init_conv, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Pyramid levels in order, paired with their stride w.r.t. the image.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const DEFAULT_WIDTH: usize = 256;

/// Backbone-style feature maps `C2..C5`.
#[derive(Debug, Clone)]
pub struct FeatureHierarchy<T> {
    levels: [Tensor<T>; 4],
}

impl<T: Real> FeatureHierarchy<T> {
    pub fn new(levels: [Tensor<T>; 4]) -> Result<Self> {
        let [n, _, h, w] = levels[0].nchw()?;
        let (mut ph, mut pw) = (h, w);
        for (i, t) in levels.iter().enumerate().skip(1) {
            let [tn, _, th, tw] = t.nchw()?;
            if tn != n || th != ph.div_ceil(2) || tw != pw.div_ceil(2) {
                return Err(Error::Dimension(format!(
                    "C{} is {:?}; expected batch {n} and spatial {}x{}",
                    LEVELS[i],
                    t.dims(),
                    ph.div_ceil(2),
                    pw.div_ceil(2)
                )));
            }
            (ph, pw) = (th, tw);
        }
        Ok(Self { levels })
    }

    /// Spatial size of level `C_l` for an image, at stride `4 * 2^(l-2)`.
    pub fn level_size(image: (usize, usize), level_index: usize) -> (usize, usize) {
        let (mut h, mut w) = (image.0.div_ceil(4), image.1.div_ceil(4));
        for _ in 0..level_index {
            (h, w) = (h.div_ceil(2), w.div_ceil(2));
        }
        (h, w)
    }

    pub fn levels(&self) -> &[Tensor<T>; 4] {
        &self.levels
    }

    pub fn batch(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn channels(&self) -> [usize; 4] {
        self.levels.clone().map(|t| t.dims()[1])
    }

    pub fn cast<U: Real>(&self) -> FeatureHierarchy<U> {
        FeatureHierarchy {
            levels: self.levels.clone().map(|t| t.cast()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    /// Adaptive average pooling to `floor(alpha * size)` per ratio.
    RatioInvariantAvg,
    GlobalAvg,
    GlobalMax,
    /// Adaptive average pooling to fixed sizes regardless of input aspect.
    FixedPsp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Asf,
    Sum,
}

/// How adaptive spatial fusion turns its logit maps into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsfNormalizer {
    /// Softmax across the group; weights are a convex combination.
    #[default]
    Softmax,
    /// Independent sigmoid gates. Experimental: no convexity guarantee.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfaConfig {
    pub alphas: Vec<f64>,
    pub pooling: PoolingKind,
    pub fusion: FusionKind,
    pub psp_sizes: Vec<(usize, usize)>,
    pub normalizer: AsfNormalizer,
}

impl Default for RfaConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.2, 0.3],
            pooling: PoolingKind::RatioInvariantAvg,
            fusion: FusionKind::Asf,
            psp_sizes: vec![(1, 1), (2, 2), (3, 3)],
            normalizer: AsfNormalizer::Softmax,
        }
    }
}

/// `max(1, floor(alpha * len))`, tolerant of products like `0.7 * 10`
/// landing a hair below an integer.
pub fn ratio_pooled_len(alpha: f64, len: usize) -> usize {
    ((alpha * len as f64 + 1e-9).floor() as usize).max(1)
}

impl RfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pooling == PoolingKind::RatioInvariantAvg {
            if self.alphas.is_empty() {
                return Err(Error::Config("rfa: at least one alpha is required".into()));
            }
            for &a in &self.alphas {
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::Config(format!("rfa: alpha {a} outside (0, 1]")));
                }
            }
            if self.alphas.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!(
                    "rfa: alphas {:?} must be strictly increasing",
                    self.alphas
                )));
            }
        }
        if self.pooling == PoolingKind::FixedPsp
            && (self.psp_sizes.is_empty() || self.psp_sizes.iter().any(|&(h, w)| h == 0 || w == 0))
        {
            return Err(Error::Config(format!(
                "rfa: psp sizes {:?} must be non-empty and positive",
                self.psp_sizes
            )));
        }
        Ok(())
    }

    /// Number of context branches.
    pub fn branches(&self) -> usize {
        match self.pooling {
            PoolingKind::RatioInvariantAvg => self.alphas.len(),
            PoolingKind::GlobalAvg | PoolingKind::GlobalMax => 1,
            PoolingKind::FixedPsp => self.psp_sizes.len(),
        }
    }

    /// Pooled size for every branch given the `C5` spatial size.
    pub fn pooled_sizes(&self, (h, w): (usize, usize)) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        match self.pooling {
            PoolingKind::RatioInvariantAvg => Ok(self
                .alphas
                .iter()
                .map(|&a| (ratio_pooled_len(a, h), ratio_pooled_len(a, w)))
                .collect()),
            PoolingKind::GlobalAvg | PoolingKind::GlobalMax => Ok(vec![(1, 1)]),
            PoolingKind::FixedPsp => {
                if let Some(&(ph, pw)) = self.psp_sizes.iter().find(|&&(ph, pw)| ph > h || pw > w) {
                    return Err(Error::Config(format!(
                        "rfa: psp size {ph}x{pw} exceeds C5 size {h}x{w}"
                    )));
                }
                Ok(self.psp_sizes.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeckConfig {
    /// Channels of `C2..C5`.
    pub in_channels: [usize; 4],
    /// Common channel width of every `M` and `P` level.
    pub width: usize,
    /// Residual feature augmentation; `None` gives the plain FPN neck.
    pub rfa: Option<RfaConfig>,
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_channels.contains(&0) {
            return Err(Error::Config("neck: channel counts must be positive".into()));
        }
        if let Some(rfa) = &self.rfa {
            rfa.validate()?;
        }
        Ok(())
    }
}

/// Hidden width of the 1×1 reduction inside adaptive spatial fusion.
pub fn asf_hidden(width: usize, k: usize) -> usize {
    (width * k / 4).max(1)
}

pub fn init_asf<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, width: usize, k: usize, rng: &mut R) {
    let hidden = asf_hidden(width, k);
    init_conv(store, &format!("{prefix}.reduce"), (hidden, width * k, 1, 1), rng);
    init_conv(store, &format!("{prefix}.logits"), (k, hidden, 3, 3), rng);
}

/// Adds lateral, output and (when enabled) residual-branch parameters.
pub fn init_neck<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &NeckConfig, rng: &mut R) {
    for (i, &level) in LEVELS.iter().enumerate() {
        init_conv(store, &format!("lateral.{level}"), (cfg.width, cfg.in_channels[i], 1, 1), rng);
    }
    for level in LEVELS {
        init_conv(store, &format!("output.{level}"), (cfg.width, cfg.width, 3, 3), rng);
    }
    if let Some(rfa) = &cfg.rfa {
        for b in 0..rfa.branches() {
            init_conv(store, &format!("rfa.branch.{b}"), (cfg.width, cfg.in_channels[3], 1, 1), rng);
        }
        if rfa.fusion == FusionKind::Asf {
            init_asf(store, "rfa.asf", cfg.width, rfa.branches(), rng);
        }
    }
}

/// Output of [`adaptive_spatial_fusion`].
#[derive(Debug, Clone)]
pub struct AsfOutput {
    pub fused: Var,
    pub weight_maps: Vec<Var>,
}

/// Fuses `K` same-shaped features with one learned spatial weight map each:
/// concat → 1×1 conv → ReLU → 3×3 conv to `K` logits → normalize → weighted sum.
pub fn adaptive_spatial_fusion<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    features: &[Var],
    normalizer: AsfNormalizer,
) -> Result<AsfOutput> {
    let first = *features
        .first()
        .ok_or_else(|| Error::Usage("adaptive_spatial_fusion: no features".into()))?;
    for &f in features {
        if tape.dims(f) != tape.dims(first) {
            return Err(Error::Dimension(format!(
                "adaptive_spatial_fusion: {:?} vs {:?}",
                tape.dims(first),
                tape.dims(f)
            )));
        }
    }
    let k = features.len();
    let stacked = tape.concat_channels(features)?;
    let hidden = conv(tape, store, &format!("{prefix}.reduce"), stacked)?;
    let hidden = tape.relu(hidden);
    let logits = conv(tape, store, &format!("{prefix}.logits"), hidden)?;
    if tape.dims(logits)[1] != k {
        return Err(Error::Dimension(format!(
            "adaptive_spatial_fusion: `{prefix}` emits {} maps for {k} features",
            tape.dims(logits)[1]
        )));
    }
    let maps: Vec<Var> = (0..k)
        .map(|i| tape.slice_channels(logits, i, 1))
        .collect::<Result<_>>()?;
    let weight_maps = match normalizer {
        AsfNormalizer::Softmax => tape.softmax_over_group(&maps)?,
        AsfNormalizer::Sigmoid => maps.iter().map(|&m| tape.sigmoid(m)).collect(),
    };
    let weighted: Vec<Var> = features
        .iter()
        .zip(&weight_maps)
        .map(|(&f, &w)| tape.spatial_scale(f, w))
        .collect::<Result<_>>()?;
    let fused = layers::sum_all(tape, &weighted)?;
    Ok(AsfOutput { fused, weight_maps })
}

/// `M_l = conv1x1(C_l)` for every level.
pub fn lateral_connect<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, c: [Var; 4]) -> Result<[Var; 4]> {
    let mut m = [c[0]; 4];
    for (i, level) in LEVELS.iter().enumerate() {
        m[i] = conv(tape, store, &format!("lateral.{level}"), c[i])?;
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct RfaOutput {
    pub m6: Var,
    /// ASF weight maps, empty for summation fusion.
    pub weight_maps: Vec<Var>,
}

/// Builds the residual context feature `M6` from `C5`.
pub fn residual_feature_augmentation<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    c5: Var,
    cfg: &RfaConfig,
) -> Result<RfaOutput> {
    let [_, _, h, w] = tape.value(c5).nchw()?;
    let sizes = cfg.pooled_sizes((h, w))?;
    let mut branches = Vec::with_capacity(sizes.len());
    for (b, &(ph, pw)) in sizes.iter().enumerate() {
        let pooled = match cfg.pooling {
            PoolingKind::GlobalMax => tape.global_max_pool(c5)?,
            _ => tape.adaptive_avg_pool2d(c5, ph, pw)?,
        };
        let reduced = conv(tape, store, &format!("rfa.branch.{b}"), pooled)?;
        branches.push(tape.bilinear_resize(reduced, h, w)?);
    }
    match cfg.fusion {
        FusionKind::Sum => Ok(RfaOutput {
            m6: layers::sum_all(tape, &branches)?,
            weight_maps: Vec::new(),
        }),
        FusionKind::Asf => {
            let out = adaptive_spatial_fusion(tape, store, "rfa.asf", &branches, cfg.normalizer)?;
            Ok(RfaOutput {
                m6: out.fused,
                weight_maps: out.weight_maps,
            })
        }
    }
}

/// Top-down pathway: `T5 = M5 + M6`, `T_l = M_l + up(T_{l+1})`, `P_l = conv3x3(T_l)`.
pub fn topdown_fuse<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    m: [Var; 4],
    m6: Option<Var>,
) -> Result<[Var; 4]> {
    let mut merged = m;
    if let Some(m6) = m6 {
        merged[3] = tape.add(m[3], m6)?;
    }
    for i in (0..3).rev() {
        let [_, _, h, w] = tape.value(m[i]).nchw()?;
        let up = tape.bilinear_resize(merged[i + 1], h, w)?;
        merged[i] = tape.add(m[i], up)?;
    }
    let mut p = merged;
    for (i, level) in LEVELS.iter().enumerate() {
        p[i] = conv(tape, store, &format!("output.{level}"), merged[i])?;
    }
    Ok(p)
}

/// Tape handles for every pyramid tensor.
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub c: [Var; 4],
    pub m: [Var; 4],
    pub m6: Option<Var>,
    pub p: [Var; 4],
    pub rfa_weight_maps: Vec<Var>,
}

/// Materialized pyramid tensors.
#[derive(Debug, Clone)]
pub struct Pyramid<T> {
    pub m: [Tensor<T>; 4],
    pub m6: Option<Tensor<T>>,
    pub p: [Tensor<T>; 4],
}

impl PyramidVars {
    pub fn materialize<T: Real>(&self, tape: &Tape<T>) -> Pyramid<T> {
        Pyramid {
            m: self.m.map(|v| tape.value(v).clone()),
            m6: self.m6.map(|v| tape.value(v).clone()),
            p: self.p.map(|v| tape.value(v).clone()),
        }
    }
}

pub fn build_pyramid<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &NeckConfig,
    hierarchy: &FeatureHierarchy<T>,
) -> Result<PyramidVars> {
    let channels = hierarchy.channels();
    if channels != cfg.in_channels {
        return Err(Error::Dimension(format!(
            "hierarchy channels {channels:?} do not match configured {:?}",
            cfg.in_channels
        )));
    }
    let c = hierarchy.levels().clone().map(|t| tape.constant(t));
    let m = lateral_connect(tape, store, c)?;
    let (m6, rfa_weight_maps) = match &cfg.rfa {
        Some(rfa) => {
            let out = residual_feature_augmentation(tape, store, c[3], rfa)?;
            (Some(out.m6), out.weight_maps)
        }
        None => (None, Vec::new()),
    };
    let p = topdown_fuse(tape, store, m, m6)?;
    Ok(PyramidVars {
        c,
        m,
        m6,
        p,
        rfa_weight_maps,
    })
}

fn conv_direct<T: Real>(store: &ParamStore<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = store
        .get(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::Usage(format!("missing `{prefix}.weight`")))?;
    let b = store
        .get(&format!("{prefix}.bias"))
        .ok_or_else(|| Error::Usage(format!("missing `{prefix}.bias`")))?;
    let [n, c, h, wd] = x.nchw()?;
    let [k, _, kh, kw] = w.nchw()?;
    let geom = ConvGeometry {
        batch: n,
        in_channels: c,
        in_h: h,
        in_w: wd,
        out_channels: k,
        kernel_h: kh,
        kernel_w: kw,
        stride: 1,
        padding: kh / 2,
        out_h: h,
        out_w: wd,
    };
    Tensor::new(vec![n, k, h, wd], kernels::conv2d_forward(&geom, x.data(), w.data(), b.data()))
}

/// Plain FPN evaluated straight through the kernels with no tape: lateral
/// 1×1 convs, top-down upsample-and-add, 3×3 output convs.
pub fn plain_fpn_reference<T: Real>(store: &ParamStore<T>, hierarchy: &FeatureHierarchy<T>) -> Result<[Tensor<T>; 4]> {
    let mut m = Vec::with_capacity(4);
    for (i, level) in LEVELS.iter().enumerate() {
        m.push(conv_direct(store, &format!("lateral.{level}"), &hierarchy.levels()[i])?);
    }
    let mut merged = m.clone();
    for i in (0..3).rev() {
        let [n, c, h, w] = m[i].nchw()?;
        let [_, _, hh, hw] = merged[i + 1].nchw()?;
        let up = kernels::resize_forward(n * c, (hh, hw), (h, w), merged[i + 1].data());
        let sum = m[i].data().iter().zip(&up).map(|(&a, &b)| a + b).collect();
        merged[i] = Tensor::new(vec![n, c, h, w], sum)?;
    }
    let mut p = Vec::with_capacity(4);
    for (i, level) in LEVELS.iter().enumerate() {
        p.push(conv_direct(store, &format!("output.{level}"), &merged[i])?);
    }
    Ok(p.try_into().expect("four levels"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::prng;

    fn hierarchy(batch: usize, channels: [usize; 4], image: usize, seed: u64) -> FeatureHierarchy<f64> {
        let mut rng = prng(seed);
        let levels = std::array::from_fn(|i| {
            let (h, w) = FeatureHierarchy::<f64>::level_size((image, image), i);
            Tensor::uniform(&[batch, channels[i], h, w], -1.0, 1.0, &mut rng)
        });
        FeatureHierarchy::new(levels).unwrap()
    }

    #[test]
    fn pooled_size_follows_floor_rule() {
        let cfg = RfaConfig {
            alphas: vec![0.2],
            ..RfaConfig::default()
        };
        assert_eq!(cfg.pooled_sizes((25, 38)).unwrap(), vec![(5, 7)]);
        let tiny = RfaConfig::default().pooled_sizes((2, 2)).unwrap();
        assert_eq!(tiny, vec![(1, 1); 3]);
    }

    #[test]
    fn alphas_must_increase_within_unit_interval() {
        for alphas in [vec![0.2, 0.1], vec![0.0, 0.5], vec![0.5, 1.5], vec![]] {
            let cfg = RfaConfig {
                alphas,
                ..RfaConfig::default()
            };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn oversized_psp_is_rejected() {
        let cfg = RfaConfig {
            pooling: PoolingKind::FixedPsp,
            ..RfaConfig::default()
        };
        assert!(matches!(cfg.pooled_sizes((2, 2)), Err(Error::Config(_))));
        assert_eq!(cfg.pooled_sizes((4, 5)).unwrap().len(), 3);
    }

    #[test]
    fn hierarchy_rejects_wrong_strides() {
        let bad = [
            Tensor::<f32>::zeros(&[1, 2, 16, 16]),
            Tensor::zeros(&[1, 2, 8, 8]),
            Tensor::zeros(&[1, 2, 5, 4]),
            Tensor::zeros(&[1, 2, 2, 2]),
        ];
        assert!(FeatureHierarchy::new(bad).is_err());
        assert_eq!(FeatureHierarchy::<f32>::level_size((100, 64), 3), (4, 2));
    }

    #[test]
    fn shapes_follow_input_levels() {
        let cfg = NeckConfig {
            in_channels: [3, 4, 5, 6],
            width: 8,
            rfa: Some(RfaConfig::default()),
        };
        let mut store = ParamStore::new();
        init_neck(&mut store, &cfg, &mut prng(1));
        let h = hierarchy(2, cfg.in_channels, 40, 2);
        let mut tape = Tape::new();
        let pyr = build_pyramid(&mut tape, &store, &cfg, &h).unwrap();
        for i in 0..4 {
            let c = h.levels()[i].dims();
            assert_eq!(tape.dims(pyr.p[i]), &[c[0], 8, c[2], c[3]]);
            assert_eq!(tape.dims(pyr.m[i]), &[c[0], 8, c[2], c[3]]);
        }
        assert_eq!(tape.dims(pyr.m6.unwrap()), tape.dims(pyr.m[3]));
    }

    #[test]
    fn asf_with_one_input_is_identity() {
        let mut store = ParamStore::new();
        init_asf(&mut store, "asf", 4, 1, &mut prng(3));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut prng(4)));
        let out = adaptive_spatial_fusion(&mut tape, &store, "asf", &[x], AsfNormalizer::Softmax).unwrap();
        assert!(tape.value(out.fused).bit_eq(tape.value(x)));
        assert!(tape.value(out.weight_maps[0]).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn asf_zero_logits_average_inputs() {
        let mut store = ParamStore::new();
        init_asf(&mut store, "asf", 4, 3, &mut prng(5));
        store.zero_prefix("asf.logits");
        let mut rng = prng(6);
        let mut tape = Tape::new();
        let xs: Vec<Var> = (0..3)
            .map(|_| tape.constant(Tensor::<f64>::uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng)))
            .collect();
        let out = adaptive_spatial_fusion(&mut tape, &store, "asf", &xs, AsfNormalizer::Softmax).unwrap();
        for &wm in &out.weight_maps {
            assert!(tape.value(wm).data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
        let fused = tape.value(out.fused).data();
        for (j, &f) in fused.iter().enumerate() {
            let mean = xs.iter().map(|&x| tape.value(x).data()[j]).sum::<f64>() / 3.0;
            assert!((f - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn asf_rejects_mismatched_features() {
        let mut store = ParamStore::new();
        init_asf(&mut store, "asf", 4, 2, &mut prng(5));
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[1, 4, 3, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[1, 4, 3, 4]));
        let err = adaptive_spatial_fusion(&mut tape, &store, "asf", &[a, b], AsfNormalizer::Softmax);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn zeroed_residual_matches_plain_fpn_bitwise() {
        let cfg = NeckConfig {
            in_channels: [3, 4, 5, 6],
            width: 8,
            rfa: Some(RfaConfig::default()),
        };
        let mut store = ParamStore::new();
        init_neck(&mut store, &cfg, &mut prng(11));
        store.zero_prefix("rfa.branch");
        let h = hierarchy(2, cfg.in_channels, 64, 12);
        let mut tape = Tape::new();
        let pyr = build_pyramid(&mut tape, &store, &cfg, &h).unwrap();
        let reference = plain_fpn_reference(&store, &h).unwrap();
        for i in 0..4 {
            assert!(tape.value(pyr.p[i]).bit_eq(&reference[i]), "level {}", LEVELS[i]);
        }
        assert!(tape.value(pyr.m6.unwrap()).data().iter().all(|&v| v == 0.0));
    }
}
