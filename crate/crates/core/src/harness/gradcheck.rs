//! Central finite-difference checks of every differentiable op and of the
//! composed detection loss, at 64-bit.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::Result;
use crate::kernels::AlignWindow;
use crate::layers::linear;
use crate::model::training_forward;
use crate::params::{init_conv, init_linear, prng, ParamStore, Prng};
use crate::pyramid::{adaptive_spatial_fusion, init_asf, residual_feature_augmentation, AsfNormalizer, FusionKind, PoolingKind, RfaConfig};
use crate::roi::{adaptive_channel_fusion, RoiFusionMode};
use crate::supervision::{head_forward, init_head, HeadConfig, SupervisionMode, FINAL_HEAD};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::synth::{collate, generate_scenes, stream_seed, PARAM_STREAM};

type BuildFn<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub worst: f64,
    /// Name and flat index of the worst entry.
    pub worst_at: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| !c.passed())
    }

    pub fn worst(&self, end_to_end: bool) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.name.starts_with("end_to_end") == end_to_end)
            .map(|c| c.worst)
            .fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            let _ = write!(
                out,
                "{:<28} worst {:>9.3e}  tol {:.0e}  entries {:>6}  {}",
                c.name,
                c.worst,
                c.tolerance,
                c.checked,
                if c.passed() { "PASS" } else { "FAIL" }
            );
            if let (false, Some((name, i))) = (c.passed(), &c.worst_at) {
                let _ = write!(out, "  at {name}[{i}]");
            }
            out.push('\n');
        }
        out
    }
}

/// Compares tape gradients of `build` with central differences over every
/// entry of every tensor in `inputs`. A non-scalar output is reduced to a
/// scalar by a fixed random weighting so every output entry matters.
pub fn check_case<F>(name: &str, tolerance: f64, inputs: &ParamStore<f64>, rng: &mut Prng, build: F) -> Result<CaseReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut evaluate = |store: &ParamStore<f64>, rng: &mut Prng| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let out = build(&mut tape, store)?;
        if tape.value(out).numel() == 1 && tape.dims(out).iter().product::<usize>() == 1 {
            let root = tape.sum(out);
            return Ok((tape, root));
        }
        let weights = projection
            .get_or_insert_with(|| Tensor::uniform(tape.dims(out), -1.0, 1.0, rng))
            .clone();
        let w = tape.constant(weights);
        let weighted = tape.mul(out, w)?;
        let root = tape.sum(weighted);
        Ok((tape, root))
    };

    let (mut tape, root) = evaluate(inputs, rng)?;
    tape.backward(root)?;
    let analytic = tape.param_grads();

    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut checked = 0;
    let mut probe = inputs.clone();
    for (pname, tensor) in inputs.iter() {
        // Inputs the graph never reads have an exactly zero gradient.
        let unread = Tensor::zeros(tensor.dims());
        let grad = analytic.get(pname).unwrap_or(&unread);
        for i in 0..tensor.numel() {
            let original = tensor.data()[i];
            probe.get_mut(pname).expect("same names").data_mut()[i] = original + STEP;
            let (t, r) = evaluate(&probe, rng)?;
            let plus = t.value(r).data()[0];
            probe.get_mut(pname).expect("same names").data_mut()[i] = original - STEP;
            let (t, r) = evaluate(&probe, rng)?;
            let minus = t.value(r).data()[0];
            probe.get_mut(pname).expect("same names").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grad.data()[i], numeric);
            checked += 1;
            if err > worst || err.is_nan() {
                worst = if err.is_nan() { f64::INFINITY } else { err };
                worst_at = Some((pname.to_string(), i));
            }
        }
    }
    Ok(CaseReport {
        name: name.to_string(),
        worst,
        worst_at,
        checked,
        tolerance,
    })
}

fn store(rng: &mut Prng, tensors: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for &(name, dims) in tensors {
        s.insert(name, Tensor::uniform(dims, -1.0, 1.0, rng));
    }
    s
}

fn p(tape: &mut Tape<f64>, s: &ParamStore<f64>, name: &str) -> Result<Var> {
    tape.param(s, name)
}

/// Random RoI-Align windows over a `size`-cell map at stride 4, some
/// reaching past the border.
fn random_windows(rng: &mut Prng, count: usize, batch: usize, size: usize) -> Vec<AlignWindow> {
    let extent = (size * 4) as f64;
    (0..count)
        .map(|_| {
            let x1 = rng.random_range(-8.0..extent - 4.0);
            let y1 = rng.random_range(-8.0..extent - 4.0);
            let w = rng.random_range(2.0..extent * 0.6);
            let h = rng.random_range(2.0..extent * 0.6);
            AlignWindow::from_image_box(rng.random_range(0..batch), x1, y1, x1 + w, y1 + h, 4.0)
        })
        .collect()
}

fn op_cases(seed: u64, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = prng(seed);
    let rng = &mut rng;
    let tol = OP_TOLERANCE;
    let run = |report: &mut GradcheckReport,
                   name: &str,
                   inputs: ParamStore<f64>,
                   rng: &mut Prng,
                   f: &BuildFn<'_>|
     -> Result<()> {
        report.cases.push(check_case(name, tol, &inputs, rng, f)?);
        Ok(())
    };

    let s = store(rng, &[("x", &[2, 3, 5, 5]), ("w", &[4, 3, 3, 3]), ("b", &[4])]);
    run(report, "conv2d", s, rng, &|t, s| {
        let (x, w, b) = (p(t, s, "x")?, p(t, s, "w")?, p(t, s, "b")?);
        t.conv2d(x, w, b, 1, 1)
    })?;
    let s = store(rng, &[("x", &[1, 2, 7, 7]), ("w", &[3, 2, 3, 3]), ("b", &[3])]);
    run(report, "conv2d_stride2", s, rng, &|t, s| {
        let (x, w, b) = (p(t, s, "x")?, p(t, s, "w")?, p(t, s, "b")?);
        t.conv2d(x, w, b, 2, 1)
    })?;
    let s = store(rng, &[("x", &[2, 3, 4, 3]), ("w", &[5, 3, 1, 1]), ("b", &[5])]);
    run(report, "conv2d_pointwise", s, rng, &|t, s| {
        let (x, w, b) = (p(t, s, "x")?, p(t, s, "w")?, p(t, s, "b")?);
        t.conv2d(x, w, b, 1, 0)
    })?;
    let s = store(rng, &[("x", &[1, 2, 3, 4])]);
    run(report, "bilinear_resize_up", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        t.bilinear_resize(x, 7, 9)
    })?;
    let s = store(rng, &[("x", &[1, 2, 8, 6])]);
    run(report, "bilinear_resize_down", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        t.bilinear_resize(x, 3, 4)
    })?;
    let s = store(rng, &[("x", &[2, 3, 7, 5])]);
    run(report, "adaptive_avg_pool2d", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        t.adaptive_avg_pool2d(x, 3, 2)
    })?;
    let s = store(rng, &[("x", &[2, 3, 4, 4])]);
    run(report, "global_max_pool", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        t.global_max_pool(x)
    })?;
    let s = store(rng, &[("x", &[2, 4, 3, 3])]);
    run(report, "softmax_channels", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        t.softmax_channels(x)
    })?;
    let s = store(rng, &[("a", &[2, 3, 4]), ("b", &[2, 3, 4])]);
    run(report, "add", s.clone(), rng, &|t, s| {
        let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
        t.add(a, b)
    })?;
    run(report, "mul", s.clone(), rng, &|t, s| {
        let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
        t.mul(a, b)
    })?;
    run(report, "maximum", s, rng, &|t, s| {
        let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
        t.maximum(a, b)
    })?;
    let s = store(rng, &[("x", &[3, 4, 2])]);
    run(report, "scale", s.clone(), rng, &|t, s| {
        let x = p(t, s, "x")?;
        Ok(t.scale(x, -1.75))
    })?;
    run(report, "relu", s.clone(), rng, &|t, s| {
        let x = p(t, s, "x")?;
        Ok(t.relu(x))
    })?;
    run(report, "sigmoid", s.clone(), rng, &|t, s| {
        let x = p(t, s, "x")?;
        Ok(t.sigmoid(x))
    })?;
    run(report, "sum", s.clone(), rng, &|t, s| {
        let x = p(t, s, "x")?;
        Ok(t.sum(x))
    })?;
    run(report, "reshape", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        t.reshape(x, &[6, 4])
    })?;
    let s = store(rng, &[("a", &[2, 2, 3, 3]), ("b", &[2, 3, 3, 3])]);
    run(report, "concat_channels", s, rng, &|t, s| {
        let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
        t.concat_channels(&[a, b])
    })?;
    let s = store(rng, &[("x", &[2, 5, 3, 3])]);
    run(report, "slice_channels", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        t.slice_channels(x, 1, 3)
    })?;
    let s = store(rng, &[("x", &[3, 5]), ("w", &[4, 5]), ("b", &[4])]);
    run(report, "fully_connected", s, rng, &|t, s| {
        let (x, w, b) = (p(t, s, "x")?, p(t, s, "w")?, p(t, s, "b")?);
        t.fully_connected(x, w, b)
    })?;
    let s = store(rng, &[("x", &[2, 3, 4, 4]), ("m", &[2, 1, 4, 4])]);
    run(report, "spatial_scale", s, rng, &|t, s| {
        let (x, m) = (p(t, s, "x")?, p(t, s, "m")?);
        t.spatial_scale(x, m)
    })?;
    let s = store(rng, &[("x", &[2, 3, 4, 4]), ("g", &[2, 3])]);
    run(report, "channel_scale", s, rng, &|t, s| {
        let (x, g) = (p(t, s, "x")?, p(t, s, "g")?);
        t.channel_scale(x, g)
    })?;
    let s = store(rng, &[("a", &[3, 2, 2, 2]), ("b", &[2, 2, 2, 2])]);
    run(report, "gather_rows", s.clone(), rng, &|t, s| {
        let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
        t.gather_rows(&[a, b], &[(1, 0), (0, 2), (0, 0), (1, 1), (0, 2)])
    })?;
    run(report, "concat_rows", s, rng, &|t, s| {
        let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
        t.concat_rows(&[a, b])
    })?;
    let windows = random_windows(rng, 5, 2, 16);
    let s = store(rng, &[("x", &[2, 3, 16, 16])]);
    run(report, "roi_align", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        t.roi_align(x, &windows, (7, 7), 2)
    })?;
    let s = store(rng, &[("z", &[5, 3])]);
    run(report, "cross_entropy", s, rng, &|t, s| {
        let z = p(t, s, "z")?;
        t.cross_entropy(z, &[0, 2, 1, 1, 0])
    })?;
    let target = Tensor::uniform(&[4, 4], -1.0, 1.0, rng);
    let mut s = ParamStore::new();
    s.insert("d", Tensor::uniform(&[4, 4], -2.5, 2.5, rng));
    run(report, "smooth_l1", s, rng, &|t, s| {
        let d = p(t, s, "d")?;
        t.smooth_l1(d, &target, &[true, false, true, true])
    })?;

    // Composite modules with their own parameters.
    let mut s = store(rng, &[("f0", &[2, 4, 5, 5]), ("f1", &[2, 4, 5, 5]), ("f2", &[2, 4, 5, 5])]);
    init_asf(&mut s, "asf", 4, 3, rng);
    run(report, "adaptive_spatial_fusion", s, rng, &|t, s| {
        let f = [p(t, s, "f0")?, p(t, s, "f1")?, p(t, s, "f2")?];
        Ok(adaptive_spatial_fusion(t, s, "asf", &f, AsfNormalizer::Softmax)?.fused)
    })?;
    let mut s = store(rng, &[("f0", &[3, 4, 3, 3]), ("f1", &[3, 4, 3, 3]), ("f2", &[3, 4, 3, 3]), ("f3", &[3, 4, 3, 3])]);
    init_linear(&mut s, "acf.fc1", (4, 16), rng);
    init_linear(&mut s, "acf.fc2", (16, 4), rng);
    run(report, "adaptive_channel_fusion", s, rng, &|t, s| {
        let f = [p(t, s, "f0")?, p(t, s, "f1")?, p(t, s, "f2")?, p(t, s, "f3")?];
        adaptive_channel_fusion(t, s, "acf", &f)
    })?;
    for (name, pooling, fusion) in [
        ("rfa_ratio_asf", PoolingKind::RatioInvariantAvg, FusionKind::Asf),
        ("rfa_global_max_sum", PoolingKind::GlobalMax, FusionKind::Sum),
        ("rfa_psp_asf", PoolingKind::FixedPsp, FusionKind::Asf),
    ] {
        let cfg = RfaConfig {
            alphas: vec![0.2, 0.4, 0.6],
            pooling,
            fusion,
            ..RfaConfig::default()
        };
        let mut s = store(rng, &[("c5", &[1, 3, 5, 6])]);
        for b in 0..cfg.branches() {
            init_conv(&mut s, &format!("rfa.branch.{b}"), (4, 3, 1, 1), rng);
        }
        init_asf(&mut s, "rfa.asf", 4, cfg.branches(), rng);
        run(report, name, s, rng, &|t, s| {
            let c5 = p(t, s, "c5")?;
            Ok(residual_feature_augmentation(t, s, c5, &cfg)?.m6)
        })?;
    }
    let head_cfg = HeadConfig {
        class_agnostic: false,
        ..HeadConfig::new(2, (3, 3), 6, 3)
    };
    let mut s = store(rng, &[("x", &[4, 2, 3, 3])]);
    init_head(&mut s, FINAL_HEAD, &head_cfg, rng);
    run(report, "detection_head", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        let (logits, deltas) = head_forward(t, s, FINAL_HEAD, x)?;
        let (logits, deltas) = (t.reshape(logits, &[4, 4, 1, 1])?, t.reshape(deltas, &[4, 12, 1, 1])?);
        t.concat_channels(&[logits, deltas])
    })?;
    let s = {
        let mut s = store(rng, &[("x", &[3, 6])]);
        init_linear(&mut s, "fc", (5, 6), rng);
        s
    };
    run(report, "linear_layer", s, rng, &|t, s| {
        let x = p(t, s, "x")?;
        linear(t, s, "fc", x)
    })?;
    Ok(())
}

/// Tiny end-to-end configuration: one object, narrow channels.
pub fn end_to_end_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        c_channels: [3, 3, 3, 3],
        width: 4,
        head_hidden: 6,
        roi_output: 3,
        scenes: 1,
        max_objects: 1,
        batch_size: 1,
        ..RunConfig::default()
    }
}

fn end_to_end_case(name: &str, cfg: &RunConfig) -> Result<CaseReport> {
    let model = cfg.model()?;
    let scenes = generate_scenes(cfg)?;
    let (hierarchy, rois) = collate::<f64>(&[&scenes[0]])?;
    let mut params: ParamStore<f64> = model.init_params(stream_seed(cfg.seed, PARAM_STREAM));
    let mut rng = prng(cfg.seed);
    // Zero biases put a fully dead hidden row exactly on a ReLU kink; the
    // check runs at a generic point instead.
    let names: Vec<String> = params.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
    for name in names {
        let b = params.get_mut(&name).expect("listed name");
        *b = Tensor::uniform(b.dims(), -0.1, 0.1, &mut rng);
    }
    check_case(name, END_TO_END_TOLERANCE, &params, &mut rng, |t, s| {
        Ok(training_forward(t, s, &model, &hierarchy, &rois)?.loss.total)
    })
}

/// Runs every op case and the end-to-end loss cases.
pub fn gradcheck_all(seed: u64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    op_cases(seed, &mut report)?;
    let base = end_to_end_config(seed);
    report.cases.push(end_to_end_case("end_to_end", &base)?);
    let variant = RunConfig {
        cs_mode: SupervisionMode::SingleLevel,
        srs_mode: RoiFusionMode::Acf,
        class_agnostic: false,
        rfa_fusion: FusionKind::Sum,
        ..base.clone()
    };
    report.cases.push(end_to_end_case("end_to_end_variant", &variant)?);
    Ok(report)
}
