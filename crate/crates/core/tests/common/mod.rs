#![allow(dead_code)]
//! Shared by the integration suites: brute-force reference
//! implementations written as plain nested loops, a central
//! finite-difference harness, an analytic parameter-count oracle, and
//! small dataset fixtures.

use bokehnet_core::data::{generate_dataset, Dataset, DatasetConfig};
use bokehnet_core::model::PyNetConfig;
use bokehnet_core::rng::DetRng;
use bokehnet_core::tape::{Tape, TensorId};
use bokehnet_core::tape::ExecMode;
use bokehnet_core::Tensor;

pub const FD_STEP: f64 = 1e-5;

fn shape4(t: &Tensor<f64>) -> [usize; 4] {
    match *t.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => panic!("expected rank 4, got {:?}", t.shape()),
    }
}

pub fn brute_conv2d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, c, h, w] = shape4(input);
    let [o, ci, k, _] = shape4(weight);
    assert_eq!(c, ci);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let xi = ((ni * c + ic) * h + iy as usize) * w + ix as usize;
                                    let wi = ((oc * c + ic) * k + ky) * k + kx;
                                    acc += x[xi] * wt[wi];
                                }
                            }
                        }
                    }
                    out[((ni * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Transposed convolution with kernel size equal to stride: every input
/// pixel scatters its kernel into a disjoint output tile.
pub fn brute_conv2d_transpose(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
) -> Tensor<f64> {
    let [n, c, h, w] = shape4(input);
    let [ci, o, k, _] = shape4(weight);
    assert_eq!(c, ci);
    assert_eq!(k, stride);
    let (oh, ow) = (h * stride, w * stride);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            if let Some(b) = bias {
                for v in &mut out[(ni * o + oc) * oh * ow..(ni * o + oc + 1) * oh * ow] {
                    *v = b[oc];
                }
            }
            for ic in 0..c {
                for y in 0..h {
                    for xq in 0..w {
                        let xv = x[((ni * c + ic) * h + y) * w + xq];
                        for ky in 0..k {
                            for kx in 0..k {
                                let oi = ((ni * o + oc) * oh + y * stride + ky) * ow
                                    + xq * stride
                                    + kx;
                                out[oi] += xv * wt[((ic * o + oc) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

pub fn brute_maxpool2(input: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = shape4(input);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[(nc * h + 2 * oy + dy) * w + 2 * ox + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(nc * oh + oy) * ow + ox] = best;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Uniform hard-edged disk blur with zero padding: integer offsets
/// inside the radius share one weight.
pub fn brute_disk_blur(img: &[f64], h: usize, w: usize, radius: f64) -> Vec<f64> {
    let half = radius.floor() as isize;
    let mut cells = Vec::new();
    for dy in -half..=half {
        for dx in -half..=half {
            if (dy * dy + dx * dx) as f64 <= radius * radius {
                cells.push((dy, dx));
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            let mut inside = 0usize;
            for &(dy, dx) in &cells {
                let (sy, sx) = (y + dy, x + dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    acc += img[sy as usize * w + sx as usize];
                    inside += 1;
                }
            }
            out[(y as usize) * w + x as usize] = acc / inside as f64;
        }
    }
    out
}

/// Gaussian-windowed structural similarity over valid windows, written
/// as direct loops over every window position.
pub fn brute_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let half = (WIN - 1) as f64 / 2.0;
    let mut win = [[0.0; WIN]; WIN];
    let mut total = 0.0;
    for (y, row) in win.iter_mut().enumerate() {
        for (x, cell) in row.iter_mut().enumerate() {
            let gy = (-((y as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
            let gx = (-((x as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
            *cell = gy * gx;
            total += gy * gx;
        }
    }
    for row in &mut win {
        for cell in row {
            *cell /= total;
        }
    }

    let (planes, h, w) = match *a.shape() {
        [n, c, h, w] => (n * c, h, w),
        [c, h, w] => (c, h, w),
        _ => panic!("unexpected shape {:?}", a.shape()),
    };
    assert_eq!(a.shape(), b.shape());
    let (av, bv) = (a.data(), b.data());
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        for oy in 0..=h - WIN {
            for ox in 0..=w - WIN {
                let (mut ma, mut mb, mut ea2, mut eb2, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..WIN {
                    for kx in 0..WIN {
                        let wgt = win[ky][kx];
                        let xa = av[(p * h + oy + ky) * w + ox + kx];
                        let xb = bv[(p * h + oy + ky) * w + ox + kx];
                        ma += wgt * xa;
                        mb += wgt * xb;
                        ea2 += wgt * xa * xa;
                        eb2 += wgt * xb * xb;
                        eab += wgt * xa * xb;
                    }
                }
                let (va, vb, cov) = (ea2 - ma * ma, eb2 - mb * mb, eab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

pub fn brute_psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return 99.0;
    }
    (10.0 * ((peak * peak) / mse).log10()).min(99.0)
}

/// Expected scalar parameter count, derived by walking the layer
/// shapes directly from the width/kernel/repetition rules.
pub fn analytic_param_count(cfg: &PyNetConfig) -> usize {
    let width = |l: usize| -> usize { (cfg.base_width << (l - 1)).min(cfg.base_width * 8) };
    let kernels = |l: usize| -> &'static [usize] {
        match l {
            1 => &[3],
            2 => &[3, 5],
            3 => &[3, 5, 7],
            _ => &[3, 5, 7, 9],
        }
    };
    let mut total = 0usize;
    for l in 1..=cfg.levels {
        let wl = width(l);
        if l < cfg.levels {
            total += width(l + 1) * wl * 4 + wl;
        }
        let reps = if l >= 4 { 2 } else { 1 };
        for rep in 1..=reps {
            let cin = if rep > 1 {
                wl
            } else if l == cfg.levels {
                cfg.in_channels
            } else {
                cfg.in_channels + wl
            };
            let ks = kernels(l);
            for &k in ks {
                total += cin * wl * k * k + wl;
            }
            total += (wl * ks.len()) * wl * 9 + wl;
            if cfg.norm_levels.contains(&l) {
                total += 2 * wl;
            }
        }
        if l >= 2 {
            total += wl * cfg.out_channels * 9 + cfg.out_channels;
        }
    }
    let w1 = width(1);
    total += w1 * cfg.base_width * 4 + cfg.base_width;
    total += cfg.base_width * cfg.out_channels + cfg.out_channels;
    total
}

/// Central finite differences against the backward pass on a handful
/// of coordinates per input tensor. `build` must place each input with
/// `leaf(_, true)` in order and return a scalar loss.
pub fn fd_gradcheck(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
    tol: f64,
    rng: &mut DetRng,
) {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new(ExecMode::SingleThread);
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item().expect("scalar loss")
    };

    let mut tape = Tape::new(ExecMode::SingleThread);
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf gradient").to_vec())
        .collect();

    for (ti, tensor) in inputs.iter().enumerate() {
        let numel = tensor.numel();
        let coords: Vec<usize> = if numel <= 8 {
            (0..numel).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < 8 {
                picked.insert(rng.below(numel));
            }
            picked.into_iter().collect()
        };
        for idx in coords {
            let mut plus: Vec<Tensor<f64>> = inputs.to_vec();
            plus[ti].data_mut()[idx] += FD_STEP;
            let mut minus: Vec<Tensor<f64>> = inputs.to_vec();
            minus[ti].data_mut()[idx] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let an = grads[ti][idx];
            let rel = (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs());
            assert!(
                rel <= tol,
                "{name}: input {ti} coord {idx}: analytic {an:.9}, fd {fd:.9}, rel {rel:.2e}"
            );
        }
    }
}

pub fn rand_tensor(rng: &mut DetRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn tiny_dataset_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        pairs: 10,
        input_size: 32,
        seed,
        ..DatasetConfig::default()
    }
}

pub fn tiny_dataset(dir: &std::path::Path, seed: u64) -> Dataset<f64> {
    generate_dataset(&tiny_dataset_config(seed), dir).unwrap();
    Dataset::load(dir).unwrap()
}
