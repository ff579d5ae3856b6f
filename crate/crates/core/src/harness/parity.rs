//! Reductions to the plain FPN detector, checked bit for bit at 64-bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::Result;
use crate::kernels::{roi_align_forward, AlignWindow};
use crate::model::{inference, ModelConfig};
use crate::params::{prng, ParamStore};
use crate::pyramid::{build_pyramid, plain_fpn_reference, FeatureHierarchy, STRIDES};
use crate::roi::{soft_roi_select, RoiBox, RoiFusionMode};
use crate::supervision::{init_head, SupervisionMode, AUX_HEAD};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::synth::{collate, generate_scenes, stream_seed, PARAM_STREAM};

/// First differing element between two tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub tensor: String,
    pub index: usize,
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityCheck {
    pub name: String,
    /// Whether the two sides are supposed to agree bitwise.
    pub expect_identical: bool,
    pub divergence: Option<Divergence>,
}

impl ParityCheck {
    pub fn passed(&self) -> bool {
        self.expect_identical == self.divergence.is_none()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParityReport {
    pub checks: Vec<ParityCheck>,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(ParityCheck::passed)
    }

    pub fn get(&self, name: &str) -> Option<&ParityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            let _ = match (&c.divergence, c.expect_identical) {
                (None, _) => write!(out, "{:<34} identical", c.name),
                (Some(d), expect) => write!(
                    out,
                    "{:<34} {} at {}[{}]: {:e} vs {:e}",
                    c.name,
                    if expect { "MISMATCH" } else { "expected divergence" },
                    d.tensor,
                    d.index,
                    d.left,
                    d.right
                ),
            };
            let _ = writeln!(out, "  {verdict}");
        }
        out
    }
}

/// `None` when `a` and `b` have equal shapes and bit-identical entries.
pub fn first_divergence(name: &str, a: &Tensor<f64>, b: &Tensor<f64>) -> Option<Divergence> {
    if a.dims() != b.dims() {
        return Some(Divergence {
            tensor: format!("{name} (shape {:?} vs {:?})", a.dims(), b.dims()),
            index: 0,
            left: f64::NAN,
            right: f64::NAN,
        });
    }
    a.data()
        .iter()
        .zip(b.data())
        .position(|(x, y)| x.to_bits() != y.to_bits())
        .map(|index| Divergence {
            tensor: name.to_string(),
            index,
            left: a.data()[index],
            right: b.data()[index],
        })
}

fn first_of(pairs: &[(String, &Tensor<f64>, &Tensor<f64>)]) -> Option<Divergence> {
    pairs.iter().find_map(|(n, a, b)| first_divergence(n, a, b))
}

/// RoI features straight from the kernels: each RoI aligned on its assigned
/// `P` level, one at a time.
pub fn baseline_roi_features(p: &[Tensor<f64>; 4], rois: &[RoiBox], model: &ModelConfig) -> Result<Tensor<f64>> {
    let (oh, ow) = model.roi.output_size;
    let channels = p[0].dims()[1];
    let mut data = Vec::with_capacity(rois.len() * channels * oh * ow);
    for roi in rois {
        let level = model.roi.level_of(roi) - 2;
        let [_, c, h, w] = p[level].nchw()?;
        let window = AlignWindow::from_image_box(roi.batch_index, roi.x1, roi.y1, roi.x2, roi.y2, STRIDES[level] as f64);
        data.extend(roi_align_forward(c, (h, w), p[level].data(), &[window], (oh, ow), model.roi.sampling_ratio));
    }
    Tensor::new(vec![rois.len(), channels, oh, ow], data)
}

fn pyramid_p(store: &ParamStore<f64>, model: &ModelConfig, hierarchy: &FeatureHierarchy<f64>) -> Result<[Tensor<f64>; 4]> {
    let mut tape = Tape::new();
    let vars = build_pyramid(&mut tape, store, &model.neck, hierarchy)?;
    Ok(vars.materialize(&tape).p)
}

fn p_pairs<'a>(a: &'a [Tensor<f64>; 4], b: &'a [Tensor<f64>; 4]) -> Vec<(String, &'a Tensor<f64>, &'a Tensor<f64>)> {
    (0..4).map(|i| (format!("P{}", i + 2), &a[i], &b[i])).collect()
}

fn selected_features(
    store: &ParamStore<f64>,
    model: &ModelConfig,
    hierarchy: &FeatureHierarchy<f64>,
    rois: &[RoiBox],
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars = build_pyramid(&mut tape, store, &model.neck, hierarchy)?;
    let sel = soft_roi_select(&mut tape, store, vars.p, rois, &model.roi)?;
    Ok(tape.value(sel.features).clone())
}

/// Configuration used by [`parity_check`]: the default model on two small
/// synthetic scenes.
pub fn parity_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        scenes: 2,
        batch_size: 2,
        precision: 64,
        ..RunConfig::default()
    }
}

pub fn parity_check(seed: u64) -> Result<ParityReport> {
    let cfg = parity_config(seed);
    let scenes = generate_scenes(&cfg)?;
    let refs: Vec<_> = scenes.iter().collect();
    let (hierarchy, rois) = collate::<f64>(&refs)?;
    let mut report = ParityReport::default();

    // (a) Residual branch zeroed: pyramid equals the plain FPN.
    let full = cfg.model()?;
    let trained_like: ParamStore<f64> = full.init_params(stream_seed(seed, PARAM_STREAM));
    let mut zeroed = trained_like.clone();
    zeroed.zero_prefix("rfa.branch.");
    let reference = plain_fpn_reference(&zeroed, &hierarchy)?;
    let p_zeroed = pyramid_p(&zeroed, &full, &hierarchy)?;
    report.checks.push(ParityCheck {
        name: "rfa_zeroed_vs_plain_fpn".into(),
        expect_identical: true,
        divergence: first_of(&p_pairs(&p_zeroed, &reference)),
    });
    let p_live = pyramid_p(&trained_like, &full, &hierarchy)?;
    report.checks.push(ParityCheck {
        name: "rfa_enabled_vs_plain_fpn".into(),
        expect_identical: false,
        divergence: first_of(&p_pairs(&p_live, &reference)),
    });

    // (b) Heuristic single-level selection equals the per-RoI baseline path.
    let mut heuristic = full.clone();
    heuristic.roi.mode = RoiFusionMode::HeuristicSingleLevel;
    let baseline = baseline_roi_features(&p_zeroed, &rois, &heuristic)?;
    let selected = selected_features(&zeroed, &heuristic, &hierarchy, &rois)?;
    report.checks.push(ParityCheck {
        name: "heuristic_selection_vs_baseline".into(),
        expect_identical: true,
        divergence: first_divergence("roi_features", &selected, &baseline),
    });
    let soft = selected_features(&zeroed, &full, &hierarchy, &rois)?;
    report.checks.push(ParityCheck {
        name: "asf_selection_vs_baseline".into(),
        expect_identical: false,
        divergence: first_divergence("roi_features", &soft, &baseline),
    });

    // (c) Inference ignores the auxiliary head entirely.
    let inv = inference_invariance(&full, &trained_like, &hierarchy, &rois, seed)?;
    report.checks.push(ParityCheck {
        name: "inference_vs_aux_head_state".into(),
        expect_identical: true,
        divergence: inv.output_divergence,
    });
    report.checks.push(ParityCheck {
        name: "inference_kernel_counts".into(),
        expect_identical: true,
        divergence: inv.count_divergence,
    });
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct InvarianceOutcome {
    pub output_divergence: Option<Divergence>,
    pub count_divergence: Option<Divergence>,
    pub counts: BTreeMap<&'static str, usize>,
    pub baseline_counts: BTreeMap<&'static str, usize>,
}

/// Logits, deltas and kernel invocation counts of one inference pass.
type InferenceBytes = (Tensor<f64>, Tensor<f64>, BTreeMap<&'static str, usize>);

fn inference_bytes(
    store: &ParamStore<f64>,
    model: &ModelConfig,
    hierarchy: &FeatureHierarchy<f64>,
    rois: &[RoiBox],
) -> Result<InferenceBytes> {
    let mut tape = Tape::new();
    let (logits, deltas) = inference(&mut tape, store, model, hierarchy, rois)?;
    Ok((tape.value(logits).clone(), tape.value(deltas).clone(), tape.kernel_counts()))
}

/// Runs inference with the auxiliary head in two unrelated random states
/// (and once without it) and compares outputs and kernel counts against a
/// model that never had auxiliary supervision.
pub fn inference_invariance(
    model: &ModelConfig,
    params: &ParamStore<f64>,
    hierarchy: &FeatureHierarchy<f64>,
    rois: &[RoiBox],
    seed: u64,
) -> Result<InvarianceOutcome> {
    let mut model = model.clone();
    if model.supervision.mode == SupervisionMode::None {
        model.supervision.mode = SupervisionMode::AllLevel;
    }
    let mut a = params.clone();
    let mut b = params.clone();
    a.remove_prefix(AUX_HEAD);
    b.remove_prefix(AUX_HEAD);
    init_head(&mut a, AUX_HEAD, &model.head, &mut prng(seed.wrapping_add(101)));
    init_head(&mut b, AUX_HEAD, &model.head, &mut prng(seed.wrapping_add(202)));
    for (_, t) in b.iter() {
        debug_assert!(t.all_finite());
    }
    let mut stripped = params.clone();
    stripped.remove_prefix(AUX_HEAD);
    let mut baseline_model = model.clone();
    baseline_model.supervision.mode = SupervisionMode::None;

    let (la, da, counts) = inference_bytes(&a, &model, hierarchy, rois)?;
    let (lb, db, _) = inference_bytes(&b, &model, hierarchy, rois)?;
    let (ls, ds, baseline_counts) = inference_bytes(&stripped, &baseline_model, hierarchy, rois)?;
    let output_divergence = first_of(&[
        ("logits(aux A vs aux B)".into(), &la, &lb),
        ("deltas(aux A vs aux B)".into(), &da, &db),
        ("logits(aux A vs no aux)".into(), &la, &ls),
        ("deltas(aux A vs no aux)".into(), &da, &ds),
    ]);
    let count_divergence = (counts != baseline_counts).then(|| Divergence {
        tensor: format!("kernel counts {counts:?} vs {baseline_counts:?}"),
        index: 0,
        left: counts.values().sum::<usize>() as f64,
        right: baseline_counts.values().sum::<usize>() as f64,
    });
    Ok(InvarianceOutcome {
        output_divergence,
        count_divergence,
        counts,
        baseline_counts,
    })
}
