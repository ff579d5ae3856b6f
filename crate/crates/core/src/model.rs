//! The full detector neck and heads wired together.

use crate::error::Result;
use crate::params::{prng, ParamStore};
use crate::pyramid::{build_pyramid, init_neck, FeatureHierarchy, NeckConfig, PyramidVars};
use crate::roi::{init_roi_fusion, RoiBox, RoiFusionConfig};
use crate::supervision::{
    consistent_supervision_loss, inference_forward, init_head, HeadConfig, LossOutput, SupervisionConfig,
    SupervisionMode, AUX_HEAD, FINAL_HEAD,
};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub neck: NeckConfig,
    pub roi: RoiFusionConfig,
    pub head: HeadConfig,
    pub supervision: SupervisionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.neck.validate()?;
        self.roi.validate()
    }

    /// Seeded parameters for every module the configuration uses. The
    /// auxiliary head exists only when an auxiliary mode is selected.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = prng(seed);
        let mut store = ParamStore::new();
        init_neck(&mut store, &self.neck, &mut rng);
        init_roi_fusion(&mut store, &self.roi, self.neck.width, &mut rng);
        init_head(&mut store, FINAL_HEAD, &self.head, &mut rng);
        if self.supervision.mode != SupervisionMode::None {
            init_head(&mut store, AUX_HEAD, &self.head, &mut rng);
        }
        store
    }
}

/// Training graph: pyramid plus composed loss.
#[derive(Debug, Clone)]
pub struct TrainingGraph {
    pub pyramid: PyramidVars,
    pub loss: LossOutput,
}

pub fn training_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    hierarchy: &FeatureHierarchy<T>,
    rois: &[RoiBox],
) -> Result<TrainingGraph> {
    let pyramid = build_pyramid(tape, store, &cfg.neck, hierarchy)?;
    let loss = consistent_supervision_loss(tape, store, &pyramid, rois, &cfg.supervision, &cfg.head, &cfg.roi)?;
    Ok(TrainingGraph { pyramid, loss })
}

/// Class logits and box deltas from the final head only.
pub fn inference<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    hierarchy: &FeatureHierarchy<T>,
    rois: &[RoiBox],
) -> Result<(Var, Var)> {
    let pyramid = build_pyramid(tape, store, &cfg.neck, hierarchy)?;
    inference_forward(tape, store, pyramid.p, rois, &cfg.roi)
}
