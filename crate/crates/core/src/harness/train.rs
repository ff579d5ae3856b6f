//! Toy training loop over synthetic scenes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{training_forward, ModelConfig};
use crate::params::{prng, ParamStore, SgdMomentum};
use crate::pyramid::build_pyramid;
use crate::roi::{render_rois, soft_roi_select, weight_ratio_stats, RatioMatrix, RoiBox, RoiFusionMode};
use crate::supervision::LossBreakdown;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

use super::config::RunConfig;
use super::synth::{collate, generate_scenes, stream_seed, SyntheticScene, ORDER_STREAM, PARAM_STREAM};

pub const LOSS_CSV: &str = "losses.csv";
pub const RATIO_CSV: &str = "ratio.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ROI_FILE: &str = "rois.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub losses: Vec<LossBreakdown>,
    /// Final soft-selection weight ratios over every training proposal
    /// (ASF selection only).
    pub ratio: Option<RatioMatrix>,
    pub params: ParamStore<T>,
}

impl<T> TrainReport<T> {
    /// RFC-4180 loss table, one row per step.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push_str("\r\n");
        for (step, l) in self.losses.iter().enumerate() {
            out.push_str(&l.csv_row(step));
            out.push_str("\r\n");
        }
        out
    }

    pub fn initial_total(&self) -> f64 {
        self.losses.first().map_or(f64::NAN, |l| l.total)
    }

    /// Mean total over the last `window` steps.
    pub fn trailing_total(&self, window: usize) -> f64 {
        let n = window.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(n)..]
            .iter()
            .map(|l| l.total)
            .sum::<f64>()
            / n as f64
    }
}

/// Scene order for each epoch, reshuffled with a seeded generator.
struct Schedule {
    order: Vec<usize>,
    cursor: usize,
    rng: crate::params::Prng,
}

impl Schedule {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: len,
            rng: prng(stream_seed(seed, ORDER_STREAM)),
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.refill();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// One SGD step; returns the loss terms measured before the update.
pub fn train_step<T: Real>(
    store: &mut ParamStore<T>,
    opt: &mut SgdMomentum<T>,
    model: &ModelConfig,
    scenes: &[&SyntheticScene],
) -> Result<LossBreakdown> {
    let (hierarchy, rois) = collate::<T>(scenes)?;
    let mut tape = Tape::new();
    let graph = training_forward(&mut tape, store, model, &hierarchy, &rois)?;
    tape.backward(graph.loss.total)?;
    let grads = tape.param_grads();
    opt.step(store, &grads)?;
    Ok(graph.loss.breakdown)
}

/// Soft-selection weight ratios of a trained model over the given scenes.
pub fn ratio_matrix<T: Real>(
    store: &ParamStore<T>,
    model: &ModelConfig,
    scenes: &[SyntheticScene],
    batch_size: usize,
) -> Result<Option<RatioMatrix>> {
    if model.roi.mode != RoiFusionMode::Asf {
        return Ok(None);
    }
    let mut rois_all: Vec<RoiBox> = Vec::new();
    let mut maps: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for chunk in scenes.chunks(batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let (hierarchy, rois) = collate::<T>(&refs)?;
        let mut tape = Tape::new();
        let pyramid = build_pyramid(&mut tape, store, &model.neck, &hierarchy)?;
        let sel = soft_roi_select(&mut tape, store, pyramid.p, &rois, &model.roi)?;
        for (acc, &wm) in maps.iter_mut().zip(&sel.weight_maps) {
            acc.extend(tape.value(wm).data().iter().map(|v| v.as_f64()));
        }
        rois_all.extend(rois);
    }
    let (oh, ow) = model.roi.output_size;
    let tensors = maps
        .into_iter()
        .map(|m| Tensor::new(vec![rois_all.len(), 1, oh, ow], m))
        .collect::<Result<Vec<_>>>()?;
    weight_ratio_stats(&rois_all, &tensors, &model.roi).map(Some)
}

/// Every proposal of every scene, with scene index as batch index.
pub fn all_proposals(scenes: &[SyntheticScene]) -> Vec<RoiBox> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(b, s)| {
            s.proposals.iter().map(move |p| RoiBox {
                batch_index: b,
                ..p.clone()
            })
        })
        .collect()
}

/// Trains from the seeded initialization and, when `out` is given, writes
/// the loss CSV, ratio matrix, checkpoint, proposal file and config there.
pub fn train_toy<T: Real>(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainReport<T>> {
    cfg.validate()?;
    let model = cfg.model()?;
    let scenes = generate_scenes(cfg)?;
    let mut params: ParamStore<T> = model.init_params(stream_seed(cfg.seed, PARAM_STREAM));
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum).with_max_grad_norm((cfg.max_grad_norm > 0.0).then_some(cfg.max_grad_norm));
    let mut schedule = Schedule::new(scenes.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<_> = schedule.next_batch(cfg.batch_size).into_iter().map(|i| &scenes[i]).collect();
        let loss = train_step(&mut params, &mut opt, &model, &batch)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
    }
    let ratio = ratio_matrix(&params, &model, &scenes, cfg.batch_size)?;
    let report = TrainReport { losses, ratio, params };
    if let Some(dir) = out {
        write_outputs(dir, cfg, &report, &scenes)?;
    }
    Ok(report)
}

fn write_outputs<T: Real>(dir: &Path, cfg: &RunConfig, report: &TrainReport<T>, scenes: &[SyntheticScene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(LOSS_CSV, report.loss_csv())?;
    write(CONFIG_FILE, cfg.to_toml())?;
    write(ROI_FILE, render_rois(&all_proposals(scenes)))?;
    if let Some(ratio) = &report.ratio {
        write(RATIO_CSV, ratio.to_csv())?;
    }
    report.params.save(dir.join(CHECKPOINT_DIR))
}
