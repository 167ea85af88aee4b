//! Training losses and image metrics.
//!
//! Deep levels train on plain L1. The full-resolution output instead
//! uses a composite of L1, structural similarity, and a perceptual term
//! measured as the MSE between feature maps of a small frozen
//! convolutional extractor. All loss inputs are expected in [0, 1];
//! [`to_unit`] maps the model's tanh range onto it.

use crate::error::{Error, TensorError};
use crate::num::Element;
use crate::rng::DetRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const FEATURE_WEIGHT: f64 = 0.01;
pub const PSNR_CAP: f64 = 99.0;

const FEATURE_SEED: u64 = 0xFEA7;
const FEATURE_WIDTHS: [usize; 4] = [3, 8, 16, 32];

/// (x + 1) / 2, mapping the tanh output range onto [0, 1].
pub fn to_unit<T: Element>(tape: &mut Tape<T>, x: TensorId) -> Result<TensorId, TensorError> {
    let y = tape.add_scalar(x, 1.0)?;
    tape.mul_scalar(y, 0.5)
}

/// Mean absolute error.
pub fn l1<T: Element>(
    tape: &mut Tape<T>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId, TensorError> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean_all(d)
}

/// Mean squared error.
pub fn mse<T: Element>(
    tape: &mut Tape<T>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId, TensorError> {
    let d = tape.sub(a, b)?;
    let d = tape.mul(d, d)?;
    tape.mean_all(d)
}

/// Normalized 2D Gaussian window used by [`ssim`].
fn gaussian_window<T: Element>() -> Tensor<T> {
    let half = (SSIM_WINDOW - 1) as f64 / 2.0;
    let row: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut data = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in &row {
        for x in &row {
            data.push(y * x);
        }
    }
    let total: f64 = data.iter().sum();
    let data: Vec<T> = data.iter().map(|&v| T::from_f64(v / total)).collect();
    Tensor::new(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], data).expect("window shape")
}

/// Mean structural similarity over valid (unpadded) windows, built from
/// differentiable ops. Inputs are images in [0, 1] with matching shapes
/// and spatial extents of at least the window size.
pub fn ssim<T: Element>(
    tape: &mut Tape<T>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId, TensorError> {
    const OP: &str = "ssim";
    let (_, _, h, w) = tape.value(a).as_nchw(OP)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TensorError::Unsupported {
            op: OP,
            detail: format!("extent {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let win = tape.constant(gaussian_window::<T>());

    let gconv = |tape: &mut Tape<T>, x: TensorId| -> Result<TensorId, TensorError> {
        let (n, c, hh, ww) = tape.value(x).as_nchw(OP)?;
        let flat = tape.reshape(x, &[n * c, 1, hh, ww])?;
        tape.conv2d(flat, win, None, 1, 0)
    };

    let a2 = tape.mul(a, a)?;
    let b2 = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let mu_a = gconv(tape, a)?;
    let mu_b = gconv(tape, b)?;
    let e_a2 = gconv(tape, a2)?;
    let e_b2 = gconv(tape, b2)?;
    let e_ab = gconv(tape, ab)?;

    let mu_a2 = tape.mul(mu_a, mu_a)?;
    let mu_b2 = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_a2, mu_a2)?;
    let var_b = tape.sub(e_b2, mu_b2)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let n1 = tape.mul_scalar(mu_ab, 2.0)?;
    let n1 = tape.add_scalar(n1, c1)?;
    let n2 = tape.mul_scalar(cov, 2.0)?;
    let n2 = tape.add_scalar(n2, c2)?;
    let d1 = tape.add(mu_a2, mu_b2)?;
    let d1 = tape.add_scalar(d1, c1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, c2)?;

    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    tape.mean_all(map)
}

/// Peak signal-to-noise ratio in dB for signals in [0, peak], capped at
/// [`PSNR_CAP`]. Not differentiable; this is an evaluation metric.
pub fn psnr(pred: &[f64], target: &[f64], peak: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    assert!(!pred.is_empty());
    let mse: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// Convenience non-differentiable mean SSIM between two [0, 1] images.
pub fn ssim_metric(pred: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64, Error> {
    let mut tape = Tape::new(crate::tape::ExecMode::SingleThread);
    let a = tape.constant(pred.clone());
    let b = tape.constant(target.clone());
    let s = ssim(&mut tape, a, b)?;
    Ok(tape.value(s).item().expect("scalar"))
}

/// Small frozen convolutional feature extractor for the perceptual loss
/// term. Three stride-2 stages widen 3 channels to 32. The weights are
/// Glorot draws from a fixed seed, never trained, so the term measures
/// agreement under a stable random projection of local structure.
pub struct FeatureNet<T> {
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Element> FeatureNet<T> {
    pub fn fixed() -> Self {
        let mut rng = DetRng::new(FEATURE_SEED);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for s in 0..3 {
            let (cin, cout) = (FEATURE_WIDTHS[s], FEATURE_WIDTHS[s + 1]);
            let limit = (6.0 / ((cin + cout) * 9) as f64).sqrt();
            let data: Vec<T> = (0..cout * cin * 9)
                .map(|_| T::from_f64(rng.uniform(-limit, limit)))
                .collect();
            weights.push(Tensor::new(vec![cout, cin, 3, 3], data).expect("feature weight"));
            biases.push(Tensor::zeros(&[cout]));
        }
        Self { weights, biases }
    }

    /// Feature maps for an image batch in [0, 1]. Spatial extents are
    /// cropped to odd sizes before each stride-2 stage so the extents
    /// divide exactly; inputs must be at least 32x32.
    pub fn features(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId, TensorError> {
        const OP: &str = "feature_extractor";
        let (_, c, h, w) = tape.value(x).as_nchw(OP)?;
        if c != FEATURE_WIDTHS[0] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels",
                expected: FEATURE_WIDTHS[0].to_string(),
                got: c.to_string(),
            });
        }
        if h < 32 || w < 32 {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: format!("extent {h}x{w} smaller than 32x32"),
            });
        }
        let mut cur = x;
        for s in 0..3 {
            let (_, _, hh, ww) = tape.value(cur).as_nchw(OP)?;
            let (ch, cw) = (hh - (hh % 2 == 0) as usize, ww - (ww % 2 == 0) as usize);
            if (ch, cw) != (hh, ww) {
                cur = tape.crop_spatial(cur, ch, cw)?;
            }
            let w_id = tape.constant(self.weights[s].clone());
            let b_id = tape.constant(self.biases[s].clone());
            cur = tape.conv2d(cur, w_id, Some(b_id), 2, 1)?;
            cur = tape.leaky_relu(cur, 0.2)?;
        }
        Ok(cur)
    }
}

/// The level 1 training loss and the values of its parts.
pub struct CompositeLoss<T> {
    pub total: TensorId,
    pub l1: T,
    pub ssim: T,
    pub feature: T,
}

/// L1 + (1 - SSIM) + 0.01 * feature MSE, over [0, 1] images.
pub fn composite<T: Element>(
    tape: &mut Tape<T>,
    pred: TensorId,
    target: TensorId,
    extractor: &FeatureNet<T>,
) -> Result<CompositeLoss<T>, Error> {
    let l1_id = l1(tape, pred, target)?;
    let ssim_id = ssim(tape, pred, target)?;
    let fa = extractor.features(tape, pred)?;
    let fb = extractor.features(tape, target)?;
    let feat_id = mse(tape, fa, fb)?;

    let dissim = tape.mul_scalar(ssim_id, -1.0)?;
    let dissim = tape.add_scalar(dissim, 1.0)?;
    let feat_w = tape.mul_scalar(feat_id, FEATURE_WEIGHT)?;
    let partial = tape.add(l1_id, dissim)?;
    let total = tape.add(partial, feat_w)?;
    Ok(CompositeLoss {
        total,
        l1: tape.value(l1_id).item().expect("scalar"),
        ssim: tape.value(ssim_id).item().expect("scalar"),
        feature: tape.value(feat_id).item().expect("scalar"),
    })
}
