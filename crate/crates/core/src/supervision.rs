//! Detection heads and the consistent-supervision loss.
//!
//! The final head reads fused RoI features from the `P` levels. During
//! training, one more head (its weights shared across all four levels)
//! reads RoI features straight from `M2..M5`, and its losses are added with
//! weight `lambda`:
//!
//! ```text
//! total = lambda * (cls_M + beta * loc_M) + cls_P + beta * loc_P
//! ```
//!
//! Localization terms only count foreground RoIs. At inference the
//! auxiliary head is never touched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::linear;
use crate::params::{init_linear, ParamStore};
use crate::pyramid::{PyramidVars, STRIDES};
use crate::roi::{align_all_levels, roi_align, soft_roi_select, RoiBox, RoiFusionConfig, SoftSelection};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const AUX_HEAD: &str = "head.aux";
pub const FINAL_HEAD: &str = "head.final";

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Flattened RoI feature length, `channels * oh * ow`.
    pub in_features: usize,
    pub hidden: usize,
    /// Foreground classes; logits have one more entry for background.
    pub num_classes: usize,
    pub class_agnostic: bool,
}

impl HeadConfig {
    pub fn new(channels: usize, roi_size: (usize, usize), hidden: usize, num_classes: usize) -> Self {
        Self {
            in_features: channels * roi_size.0 * roi_size.1,
            hidden,
            num_classes,
            class_agnostic: true,
        }
    }

    fn regression_outputs(&self) -> usize {
        if self.class_agnostic {
            4
        } else {
            4 * self.num_classes
        }
    }
}

pub fn init_head<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: &HeadConfig, rng: &mut R) {
    init_linear(store, &format!("{prefix}.fc1"), (cfg.hidden, cfg.in_features), rng);
    init_linear(store, &format!("{prefix}.fc2"), (cfg.hidden, cfg.hidden), rng);
    init_linear(store, &format!("{prefix}.cls"), (cfg.num_classes + 1, cfg.hidden), rng);
    init_linear(store, &format!("{prefix}.reg"), (cfg.regression_outputs(), cfg.hidden), rng);
}

/// Flatten → FC → ReLU → FC → ReLU → (classifier, regressor).
pub fn head_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    roi_features: Var,
) -> Result<(Var, Var)> {
    let rows = tape.dims(roi_features)[0];
    let flat_len = tape.value(roi_features).numel() / rows;
    let flat = tape.reshape(roi_features, &[rows, flat_len])?;
    let h = linear(tape, store, &format!("{prefix}.fc1"), flat)?;
    let h = tape.relu(h);
    let h = linear(tape, store, &format!("{prefix}.fc2"), h)?;
    let h = tape.relu(h);
    let logits = linear(tape, store, &format!("{prefix}.cls"), h)?;
    let deltas = linear(tape, store, &format!("{prefix}.reg"), h)?;
    Ok((logits, deltas))
}

/// Mean softmax cross-entropy over the RoI batch.
pub fn classification_loss<T: Real>(tape: &mut Tape<T>, logits: Var, rois: &[RoiBox]) -> Result<Var> {
    let targets: Vec<usize> = rois.iter().map(|r| r.class_target).collect();
    tape.cross_entropy(logits, &targets)
}

/// Smooth-L1 over the four box coordinates, averaged over foreground RoIs.
/// Per-class regressors are indexed by each RoI's ground-truth class.
pub fn localization_loss<T: Real>(tape: &mut Tape<T>, deltas: Var, rois: &[RoiBox], num_classes: usize) -> Result<Var> {
    let rows = rois.len();
    let width = tape.dims(deltas)[1];
    let selected = if width == 4 {
        deltas
    } else {
        if width != 4 * num_classes {
            return Err(Error::Dimension(format!(
                "localization_loss: {width} regression outputs for {num_classes} classes"
            )));
        }
        let per_class = tape.reshape(deltas, &[rows * num_classes, 4])?;
        let index: Vec<_> = rois
            .iter()
            .enumerate()
            .map(|(r, roi)| (0, r * num_classes + roi.class_target.max(1) - 1))
            .collect();
        tape.gather_rows(&[per_class], &index)?
    };
    let target = Tensor::new(
        vec![rows, 4],
        rois.iter()
            .flat_map(|r| r.regression_target.map(T::from_f64))
            .collect(),
    )?;
    let positive: Vec<bool> = rois.iter().map(RoiBox::is_positive).collect();
    tape.smooth_l1(selected, &target, &positive)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    /// No auxiliary branch; `lambda` is treated as zero.
    None,
    /// Auxiliary loss on each RoI's heuristically assigned `M` level only.
    SingleLevel,
    /// Auxiliary loss on every `M` level, averaged over levels.
    AllLevel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionConfig {
    pub mode: SupervisionMode,
    pub lambda: f64,
    pub beta: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self {
            mode: SupervisionMode::AllLevel,
            lambda: 0.25,
            beta: 1.0,
        }
    }
}

/// Every term of the composed loss, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_cls_m: f64,
    pub l_loc_m: f64,
    pub l_cls_p: f64,
    pub l_loc_p: f64,
    pub total: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Set when the RoI list was empty and every term is zero by definition.
    pub empty: bool,
}

impl LossBreakdown {
    /// Recomposes the total from the stored terms.
    pub fn recompose(&self) -> f64 {
        self.lambda * (self.l_cls_m + self.beta * self.l_loc_m) + self.l_cls_p + self.beta * self.l_loc_p
    }

    pub const CSV_HEADER: &'static str = "step,l_cls_m,l_loc_m,l_cls_p,l_loc_p,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.l_cls_m, self.l_loc_m, self.l_cls_p, self.l_loc_p, self.total
        )
    }
}

/// Tape handles behind a [`LossBreakdown`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub total: Var,
    pub final_logits: Option<Var>,
    pub final_deltas: Option<Var>,
    pub selection: Option<SoftSelection>,
}

/// The final branch: soft RoI selection on `P` levels and the final head.
pub fn final_branch<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: [Var; 4],
    rois: &[RoiBox],
    srs: &RoiFusionConfig,
) -> Result<(SoftSelection, Var, Var)> {
    let selection = soft_roi_select(tape, store, p, rois, srs)?;
    let (logits, deltas) = head_forward(tape, store, FINAL_HEAD, selection.features)?;
    Ok((selection, logits, deltas))
}

/// Composes the auxiliary (`M`-level) and final (`P`-level) losses.
#[allow(clippy::too_many_arguments)]
pub fn consistent_supervision_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pyramid: &PyramidVars,
    rois: &[RoiBox],
    cfg: &SupervisionConfig,
    head: &HeadConfig,
    srs: &RoiFusionConfig,
) -> Result<LossOutput> {
    let lambda = if cfg.mode == SupervisionMode::None { 0.0 } else { cfg.lambda };
    if rois.is_empty() {
        let total = tape.constant(Tensor::scalar(T::zero()));
        return Ok(LossOutput {
            breakdown: LossBreakdown {
                lambda,
                beta: cfg.beta,
                empty: true,
                ..LossBreakdown::default()
            },
            total,
            final_logits: None,
            final_deltas: None,
            selection: None,
        });
    }
    if let Some(bad) = rois.iter().find(|r| r.class_target > head.num_classes) {
        return Err(Error::Usage(format!(
            "class target {} outside 0..={}",
            bad.class_target, head.num_classes
        )));
    }

    let (selection, logits, deltas) = final_branch(tape, store, pyramid.p, rois, srs)?;
    let cls_p = classification_loss(tape, logits, rois)?;
    let loc_p = localization_loss(tape, deltas, rois, head.num_classes)?;
    let loc_p_weighted = tape.scale(loc_p, cfg.beta);
    let mut total = tape.add(cls_p, loc_p_weighted)?;

    let aux = match cfg.mode {
        SupervisionMode::None => None,
        SupervisionMode::SingleLevel => {
            let features = crate::roi::align_assigned(tape, pyramid.m, rois, srs)?;
            Some((features, rois.to_vec()))
        }
        SupervisionMode::AllLevel => {
            // One shared head over the four levels stacked along the batch
            // axis. Every level holds the same RoIs, so the mean over the
            // stacked batch equals the mean of the four per-level losses.
            let per_level = align_all_levels(tape, pyramid.m, rois, srs)?;
            let stacked = tape.concat_rows(&per_level)?;
            let repeated: Vec<RoiBox> = (0..4).flat_map(|_| rois.iter().cloned()).collect();
            Some((stacked, repeated))
        }
    };
    let (mut l_cls_m, mut l_loc_m) = (0.0, 0.0);
    if let Some((features, aux_rois)) = aux {
        let (aux_logits, aux_deltas) = head_forward(tape, store, AUX_HEAD, features)?;
        let cls_m = classification_loss(tape, aux_logits, &aux_rois)?;
        let loc_m = localization_loss(tape, aux_deltas, &aux_rois, head.num_classes)?;
        l_cls_m = tape.value(cls_m).data()[0].as_f64();
        l_loc_m = tape.value(loc_m).data()[0].as_f64();
        let loc_m_weighted = tape.scale(loc_m, cfg.beta);
        let m_term = tape.add(cls_m, loc_m_weighted)?;
        let m_term = tape.scale(m_term, lambda);
        total = tape.add(m_term, total)?;
    }

    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    let breakdown = LossBreakdown {
        l_cls_m,
        l_loc_m,
        l_cls_p: scalar(cls_p),
        l_loc_p: scalar(loc_p),
        total: scalar(total),
        lambda,
        beta: cfg.beta,
        empty: false,
    };
    Ok(LossOutput {
        breakdown,
        total,
        final_logits: Some(logits),
        final_deltas: Some(deltas),
        selection: Some(selection),
    })
}

/// Final-branch predictions only; reads no auxiliary-head parameters.
pub fn inference_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: [Var; 4],
    rois: &[RoiBox],
    srs: &RoiFusionConfig,
) -> Result<(Var, Var)> {
    let (_, logits, deltas) = final_branch(tape, store, p, rois, srs)?;
    Ok((logits, deltas))
}

/// Auxiliary predictions on a single `M` level, for diagnostics.
pub fn aux_head_on_level<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pyramid: &PyramidVars,
    level_index: usize,
    rois: &[RoiBox],
    srs: &RoiFusionConfig,
) -> Result<(Var, Var)> {
    let features = roi_align(tape, pyramid.m[level_index], rois, STRIDES[level_index], srs)?;
    head_forward(tape, store, AUX_HEAD, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::prng;

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    fn roi(class: usize, target: [f64; 4]) -> RoiBox {
        RoiBox::new(0, 0.0, 0.0, 8.0, 8.0).unwrap().with_targets(class, target)
    }

    #[test]
    fn uniform_two_class_loss_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap());
        let l = classification_loss(&mut tape, logits, &[roi(1, [0.0; 4])]).unwrap();
        assert!((scalar(&tape, l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = classification_loss(&mut tape, logits, &[roi(2, [0.0; 4])]).unwrap();
        let expected = -(3.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
        assert!((scalar(&tape, l) - expected).abs() < 1e-15);
        assert!((expected - 0.407_605_964_444_380_8).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 40.0, 0.0]).unwrap());
        let l = classification_loss(&mut tape, logits, &[roi(1, [0.0; 4])]).unwrap();
        assert!(scalar(&tape, l) < 1e-15);
    }

    #[test]
    fn out_of_range_label_is_usage_error() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[1, 3]));
        let err = classification_loss(&mut tape, logits, &[roi(3, [0.0; 4])]);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn localization_masks_background() {
        let mut tape = Tape::new();
        let deltas = tape.leaf(Tensor::new(vec![1, 4], vec![3.0, -1.0, 2.0, 0.5]).unwrap(), true);
        let l = localization_loss(&mut tape, deltas, &[roi(0, [0.0; 4])], 2).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(deltas).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn localization_half_error_on_each_coordinate() {
        let mut tape = Tape::new();
        let deltas = tape.constant(Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap());
        let l = localization_loss(&mut tape, deltas, &[roi(1, [0.0; 4])], 2).unwrap();
        assert!((scalar(&tape, l) - 0.5).abs() < 1e-15);
        let perfect = tape.constant(Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let l = localization_loss(&mut tape, perfect, &[roi(1, [0.1, 0.2, 0.3, 0.4])], 2).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn per_class_regression_picks_target_class_columns() {
        let mut tape = Tape::new();
        // Two classes: columns 0..4 for class 1, 4..8 for class 2.
        let mut data = vec![9.0; 4];
        data.extend([0.5; 4]);
        let deltas = tape.constant(Tensor::new(vec![1, 8], data).unwrap());
        let l = localization_loss(&mut tape, deltas, &[roi(2, [0.0; 4])], 2).unwrap();
        assert!((scalar(&tape, l) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn breakdown_algebra() {
        let b = LossBreakdown {
            l_cls_m: 2.0,
            l_loc_m: 1.0,
            l_cls_p: 1.0,
            l_loc_p: 0.5,
            total: 0.0,
            lambda: 0.25,
            beta: 1.0,
            empty: false,
        };
        assert!((b.recompose() - 2.25).abs() < 1e-15);
        assert_eq!(SupervisionConfig::default().lambda, 0.25);
        assert_eq!(SupervisionConfig::default().beta, 1.0);
    }

    #[test]
    fn head_zero_feature_zero_bias_gives_zero_outputs() {
        let cfg = HeadConfig::new(2, (7, 7), 8, 2);
        let mut store = ParamStore::<f64>::new();
        init_head(&mut store, FINAL_HEAD, &cfg, &mut prng(0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2, 7, 7]));
        let (logits, deltas) = head_forward(&mut tape, &store, FINAL_HEAD, x).unwrap();
        assert_eq!(tape.dims(logits), &[3, 3]);
        assert_eq!(tape.dims(deltas), &[3, 4]);
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(deltas).data().iter().all(|&v| v == 0.0));
    }
}
