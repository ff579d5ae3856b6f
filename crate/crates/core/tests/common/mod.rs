//! Brute-force reference implementations written straight from the scalar
//! definitions, plus seeded random-instance runners comparing them with the
//! library kernels.

#![allow(dead_code)]

use augfpn::params::{init_linear, prng, ParamStore, Prng};
use augfpn::roi::{adaptive_channel_fusion, roi_align, RoiBox, RoiFusionConfig};
use augfpn::{Tape, Tensor};
use rand::Rng;

pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const INSTANCES: usize = 120;

fn rand_vec(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct sliding-window convolution with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [k, _, kh, kw]: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for bi in 0..n {
        for ko in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[ko];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((ko * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((bi * k + ko) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Half-pixel bilinear resampling, evaluated per output pixel.
pub fn resize(x: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let src = |d: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(inn - 1);
        let hi = (lo + 1).min(inn - 1);
        (lo, hi, if hi == lo { 0.0 } else { s - lo as f64 })
    };
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            let (y0, y1, fy) = src(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = src(ox, w, ow);
                let at = |yy: usize, xx: usize| x[(p * h + yy) * w + xx];
                out[(p * oh + oy) * ow + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    out
}

/// Adaptive average pooling by explicit bin membership.
pub fn adaptive_pool(x: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let (mut sum, mut count) = (0.0, 0usize);
                // Bin i covers rows floor(i*h/oh) .. ceil((i+1)*h/oh).
                let rows = (i * h) / oh..((i + 1) * h).div_ceil(oh);
                let cols = (j * w) / ow..((j + 1) * w).div_ceil(ow);
                for y in 0..h {
                    if !rows.contains(&y) {
                        continue;
                    }
                    for xx in 0..w {
                        if !cols.contains(&xx) {
                            continue;
                        }
                        sum += x[(p * h + y) * w + xx];
                        count += 1;
                    }
                }
                out[(p * oh + i) * ow + j] = sum / count as f64;
            }
        }
    }
    out
}

fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, fy, fx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        fy = 0.0;
    } else {
        y1 = y0 + 1;
        fy = y - y0 as f64;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        fx = 0.0;
    } else {
        x1 = x0 + 1;
        fx = x - x0 as f64;
    }
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - fy) * (1.0 - fx) * at(y0, x0) + (1.0 - fy) * fx * at(y0, x1) + fy * (1.0 - fx) * at(y1, x0) + fy * fx * at(y1, x1)
}

/// RoI-Align with half-pixel box mapping and `ratio × ratio` regular
/// samples per bin.
pub fn roi_align_ref(
    feat: &[f64],
    [_, c, h, w]: [usize; 4],
    rois: &[RoiBox],
    stride: f64,
    (oh, ow): (usize, usize),
    ratio: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rois.len() * c * oh * ow);
    for r in rois {
        let (x0, y0) = (r.x1 / stride - 0.5, r.y1 / stride - 0.5);
        let (x1, y1) = (r.x2 / stride - 0.5, r.y2 / stride - 0.5);
        let (bw, bh) = ((x1 - x0) / ow as f64, (y1 - y0) / oh as f64);
        for ch in 0..c {
            let plane = &feat[(r.batch_index * c + ch) * h * w..][..h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for sy in 0..ratio {
                        for sx in 0..ratio {
                            let y = y0 + bh * (i as f64 + (sy as f64 + 0.5) / ratio as f64);
                            let x = x0 + bw * (j as f64 + (sx as f64 + 0.5) / ratio as f64);
                            acc += bilinear_sample(plane, h, w, y, x);
                        }
                    }
                    out.push(acc / (ratio * ratio) as f64);
                }
            }
        }
    }
    out
}

/// `y = x W^T + b` with explicit loops.
pub fn dense(x: &[f64], rows: usize, inp: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
    let outp = b.len();
    let mut y = vec![0.0; rows * outp];
    for r in 0..rows {
        for o in 0..outp {
            let mut acc = b[o];
            for i in 0..inp {
                acc += x[r * inp + i] * wt[o * inp + i];
            }
            y[r * outp + o] = acc;
        }
    }
    y
}

/// Channel gating of `K` features: GAP of the concatenation → FC → ReLU →
/// FC → sigmoid, then per-feature channel scaling and a sum over `K`.
pub fn acf(features: &[Vec<f64>], [r, c, h, w]: [usize; 4], store: &ParamStore<f64>, prefix: &str) -> Vec<f64> {
    let k = features.len();
    let get = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let mut pooled = vec![0.0; r * c * k];
    for ri in 0..r {
        for (fi, f) in features.iter().enumerate() {
            for ch in 0..c {
                let s: f64 = f[(ri * c + ch) * h * w..][..h * w].iter().sum();
                pooled[ri * c * k + fi * c + ch] = s / (h * w) as f64;
            }
        }
    }
    let hidden: Vec<f64> = dense(&pooled, r, c * k, &get("fc1.weight"), &get("fc1.bias"))
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let hid = get("fc1.bias").len();
    let gates: Vec<f64> = dense(&hidden, r, hid, &get("fc2.weight"), &get("fc2.bias"))
        .into_iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let mut out = vec![0.0; r * c * h * w];
    for ri in 0..r {
        for (fi, f) in features.iter().enumerate() {
            for ch in 0..c {
                let g = gates[ri * c * k + fi * c + ch];
                for p in 0..h * w {
                    out[(ri * c + ch) * h * w + p] += g * f[(ri * c + ch) * h * w + p];
                }
            }
        }
    }
    out
}

/// Worst absolute deviation of one kernel family over seeded instances.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.instances >= 100 && self.worst <= ORACLE_TOLERANCE
    }
}

pub fn conv2d_instances(seed: u64, count: usize) -> OracleOutcome {
    let mut rng = prng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < count {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let ks = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=ks / 2);
        let h = rng.random_range(ks..=8);
        let w = rng.random_range(ks..=8);
        if (h + 2 * pad - ks) % stride != 0 || (w + 2 * pad - ks) % stride != 0 {
            continue;
        }
        let x = rand_vec(&mut rng, n * c * h * w);
        let wt = rand_vec(&mut rng, k * c * ks * ks);
        let b = rand_vec(&mut rng, k);
        let (want, _, _) = conv2d(&x, [n, c, h, w], &wt, [k, c, ks, ks], &b, stride, pad);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![n, c, h, w], x).unwrap());
        let wv = tape.constant(Tensor::new(vec![k, c, ks, ks], wt).unwrap());
        let bv = tape.constant(Tensor::new(vec![k], b).unwrap());
        let got = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        worst = worst.max(max_diff(tape.value(got).data(), &want));
        done += 1;
    }
    OracleOutcome { name: "conv2d", instances: done, worst }
}

pub fn resize_instances(seed: u64, count: usize) -> OracleOutcome {
    let mut rng = prng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let planes = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let (oh, ow) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let x = rand_vec(&mut rng, planes * h * w);
        let want = resize(&x, planes, (h, w), (oh, ow));
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, planes, h, w], x).unwrap());
        let got = tape.bilinear_resize(xv, oh, ow).unwrap();
        worst = worst.max(max_diff(tape.value(got).data(), &want));
    }
    OracleOutcome { name: "bilinear_resize", instances: count, worst }
}

pub fn pool_instances(seed: u64, count: usize) -> OracleOutcome {
    let mut rng = prng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let planes = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=11), rng.random_range(1..=11));
        let (oh, ow) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let x = rand_vec(&mut rng, planes * h * w);
        let want = adaptive_pool(&x, planes, (h, w), (oh, ow));
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![planes, 1, h, w], x).unwrap());
        let got = tape.adaptive_avg_pool2d(xv, oh, ow).unwrap();
        worst = worst.max(max_diff(tape.value(got).data(), &want));
    }
    OracleOutcome { name: "adaptive_avg_pool2d", instances: count, worst }
}

pub fn random_roi(rng: &mut Prng, batch: usize, extent: f64) -> RoiBox {
    let x1 = rng.random_range(-0.2 * extent..0.9 * extent);
    let y1 = rng.random_range(-0.2 * extent..0.9 * extent);
    // Boxes may hang off the top-left edge but always reach into the map.
    let bw = rng.random_range(0.5..0.8 * extent) + (-x1).max(0.0);
    let bh = rng.random_range(0.5..0.8 * extent) + (-y1).max(0.0);
    RoiBox::new(rng.random_range(0..batch), x1, y1, x1 + bw, y1 + bh).unwrap()
}

pub fn roi_align_instances(seed: u64, count: usize) -> OracleOutcome {
    let mut rng = prng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let stride = [4usize, 8, 16, 32][rng.random_range(0..4)];
        let out = (rng.random_range(1..=7), rng.random_range(1..=7));
        let ratio = rng.random_range(1..=3);
        let extent = (h.min(w) * stride) as f64;
        let rois: Vec<_> = (0..rng.random_range(1..=4)).map(|_| random_roi(&mut rng, n, extent)).collect();
        let x = rand_vec(&mut rng, n * c * h * w);
        let want = roi_align_ref(&x, [n, c, h, w], &rois, stride as f64, out, ratio);
        let cfg = RoiFusionConfig {
            output_size: out,
            sampling_ratio: ratio,
            ..RoiFusionConfig::default()
        };
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![n, c, h, w], x).unwrap());
        let got = roi_align(&mut tape, xv, &rois, stride, &cfg).unwrap();
        worst = worst.max(max_diff(tape.value(got).data(), &want));
    }
    OracleOutcome { name: "roi_align", instances: count, worst }
}

pub fn acf_instances(seed: u64, count: usize) -> OracleOutcome {
    let mut rng = prng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (r, c, k) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let squeezed = rng.random_range(1..=c * k);
        let mut store = ParamStore::new();
        init_linear(&mut store, "acf.fc1", (squeezed, c * k), &mut rng);
        init_linear(&mut store, "acf.fc2", (c * k, squeezed), &mut rng);
        for name in ["acf.fc1.bias", "acf.fc2.bias"] {
            let len = store.get(name).unwrap().numel();
            store.insert(name, Tensor::new(vec![len], rand_vec(&mut rng, len)).unwrap());
        }
        let feats: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut rng, r * c * h * w)).collect();
        let want = acf(&feats, [r, c, h, w], &store, "acf");
        let mut tape = Tape::new();
        let vars: Vec<_> = feats
            .iter()
            .map(|f| tape.constant(Tensor::new(vec![r, c, h, w], f.clone()).unwrap()))
            .collect();
        let got = adaptive_channel_fusion(&mut tape, &store, "acf", &vars).unwrap();
        worst = worst.max(max_diff(tape.value(got).data(), &want));
    }
    OracleOutcome { name: "adaptive_channel_fusion", instances: count, worst }
}

pub fn dense_instances(seed: u64, count: usize) -> OracleOutcome {
    let mut rng = prng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (rows, inp, outp) = (rng.random_range(1..=6), rng.random_range(1..=40), rng.random_range(1..=9));
        let x = rand_vec(&mut rng, rows * inp);
        let wt = rand_vec(&mut rng, outp * inp);
        let b = rand_vec(&mut rng, outp);
        let want = dense(&x, rows, inp, &wt, &b);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![rows, inp], x).unwrap());
        let wv = tape.constant(Tensor::new(vec![outp, inp], wt).unwrap());
        let bv = tape.constant(Tensor::new(vec![outp], b).unwrap());
        let got = tape.fully_connected(xv, wv, bv).unwrap();
        worst = worst.max(max_diff(tape.value(got).data(), &want));
    }
    OracleOutcome { name: "dense", instances: count, worst }
}

pub fn oracle_suite(seed: u64) -> Vec<OracleOutcome> {
    vec![
        conv2d_instances(seed, INSTANCES),
        resize_instances(seed.wrapping_add(1), INSTANCES),
        pool_instances(seed.wrapping_add(2), INSTANCES),
        roi_align_instances(seed.wrapping_add(3), INSTANCES),
        acf_instances(seed.wrapping_add(4), INSTANCES),
        dense_instances(seed.wrapping_add(5), INSTANCES),
    ]
}
