//! Weight-ratio statistics from a saved checkpoint.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pyramid::build_pyramid;
use crate::roi::{parse_rois, soft_roi_select, weight_ratio_stats, RatioMatrix, RoiBox, RoiFusionMode};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::synth::{collate, generate_scenes};

/// Ratio matrix of a checkpoint over the RoIs in `roi_file`. A RoI's batch
/// index selects the synthetic scene (regenerated from `cfg`) it reads from.
pub fn emit_stats(cfg: &RunConfig, checkpoint: &Path, roi_file: &Path) -> Result<RatioMatrix> {
    if !checkpoint.is_dir() {
        return Err(Error::Usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let model = cfg.model()?;
    if model.roi.mode != RoiFusionMode::Asf {
        return Err(Error::Usage("stats: weight ratios need srs_mode = \"asf\"".into()));
    }
    let store = ParamStore::<f64>::load(checkpoint)?;
    if !store.contains_prefix("srs.asf.") {
        return Err(Error::Usage(format!(
            "checkpoint {} has no soft-selection parameters",
            checkpoint.display()
        )));
    }
    let text = fs::read_to_string(roi_file).map_err(|e| Error::io(roi_file, e))?;
    let rois = parse_rois(&text)?;
    if rois.is_empty() {
        return Err(Error::Usage(format!("{} lists no RoIs", roi_file.display())));
    }
    let scenes = generate_scenes(cfg)?;
    if let Some(bad) = rois.iter().find(|r| r.batch_index >= scenes.len()) {
        return Err(Error::Usage(format!(
            "RoI batch index {} but only {} scenes",
            bad.batch_index,
            scenes.len()
        )));
    }

    let (oh, ow) = model.roi.output_size;
    let bins = oh * ow;
    let mut maps = vec![vec![0.0; rois.len() * bins]; 4];
    for (scene_index, scene) in scenes.iter().enumerate() {
        let members: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].batch_index == scene_index).collect();
        if members.is_empty() {
            continue;
        }
        let local: Vec<RoiBox> = members
            .iter()
            .map(|&i| RoiBox {
                batch_index: 0,
                ..rois[i].clone()
            })
            .collect();
        let (hierarchy, _) = collate::<f64>(&[scene])?;
        let mut tape = Tape::new();
        let pyramid = build_pyramid(&mut tape, &store, &model.neck, &hierarchy)?;
        let sel = soft_roi_select(&mut tape, &store, pyramid.p, &local, &model.roi)?;
        for (level, &wm) in sel.weight_maps.iter().enumerate() {
            let values = tape.value(wm).data();
            for (k, &i) in members.iter().enumerate() {
                maps[level][i * bins..(i + 1) * bins].copy_from_slice(&values[k * bins..(k + 1) * bins]);
            }
        }
    }
    let tensors = maps
        .into_iter()
        .map(|m| Tensor::new(vec![rois.len(), 1, oh, ow], m))
        .collect::<Result<Vec<_>>>()?;
    weight_ratio_stats(&rois, &tensors, &model.roi)
}
