//! Photometric loss `lambda * L1 + (1 - lambda) * (1 - SSIM)` over a pixel
//! mask, with its analytic gradient.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), zero padding at the image
//! border, and is averaged over masked pixels and all three channels. Work is
//! restricted to the mask's bounding box grown by the window radius, which is
//! exact: nothing outside it reaches a masked SSIM value or its gradient.

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{Image, Mask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const RADIUS: usize = SSIM_WINDOW / 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Axis-aligned pixel rectangle, exclusive ends.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn w(&self) -> usize {
        self.x1 - self.x0
    }
    fn h(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Separable Gaussian blur of a `w x h` plane with zero padding.
fn blur(src: &[f64], w: usize, h: usize, kern: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(RADIUS);
            let hi = (x + RADIUS).min(w - 1);
            let mut acc = 0.0;
            for xx in lo..=hi {
                acc += kern[xx + RADIUS - x] * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(RADIUS);
        let hi = (y + RADIUS).min(h - 1);
        for yy in lo..=hi {
            let k = kern[yy + RADIUS - y];
            let src_row = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += k * s;
            }
        }
    }
    out
}

/// SSIM at one pixel from window statistics.
#[inline]
fn ssim_terms(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> (f64, f64, f64, f64, f64) {
    let a1 = 2.0 * mx * my + SSIM_C1;
    let b1 = mx * mx + my * my + SSIM_C1;
    let a2 = 2.0 * cxy + SSIM_C2;
    let b2 = vx + vy + SSIM_C2;
    (a1, b1, a2, b2, (a1 * a2) / (b1 * b2))
}

struct ChannelTarget {
    x: Vec<f64>,
    mu: Vec<f64>,
    var: Vec<f64>,
}

/// A target image, mask and mix weight with SSIM statistics of the target
/// precomputed, so repeated evaluations only blur the prediction.
pub struct PhotometricLoss {
    width: usize,
    height: usize,
    lambda: f64,
    roi: Rect,
    /// Mask cropped to the ROI.
    mask: Vec<bool>,
    count: usize,
    target: Image,
    channels: Vec<ChannelTarget>,
    kern: [f64; SSIM_WINDOW],
}

impl PhotometricLoss {
    pub fn new(target: &Image, mask: &Mask, lambda: f64) -> Result<Self, LossError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(LossError::InvalidLambda(lambda));
        }
        if target.channels != 3 {
            return Err(LossError::ShapeMismatch(format!(
                "expected 3 channels, got {}",
                target.channels
            )));
        }
        if mask.width != target.width || mask.height != target.height {
            return Err(LossError::ShapeMismatch(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width, mask.height, target.width, target.height
            )));
        }
        let (w, h) = (target.width, target.height);
        let mut bb: Option<Rect> = None;
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    let r = bb.get_or_insert(Rect {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    r.x0 = r.x0.min(x);
                    r.y0 = r.y0.min(y);
                    r.x1 = r.x1.max(x + 1);
                    r.y1 = r.y1.max(y + 1);
                }
            }
        }
        let bb = bb.ok_or(LossError::EmptyMask)?;
        let roi = Rect {
            x0: bb.x0.saturating_sub(RADIUS),
            y0: bb.y0.saturating_sub(RADIUS),
            x1: (bb.x1 + RADIUS).min(w),
            y1: (bb.y1 + RADIUS).min(h),
        };
        let crop_mask: Vec<bool> = (roi.y0..roi.y1)
            .flat_map(|y| (roi.x0..roi.x1).map(move |x| (x, y)))
            .map(|(x, y)| mask.get(x, y))
            .collect();
        let kern = gaussian_kernel();
        let channels = (0..3)
            .map(|c| {
                let x = crop_plane(target, &roi, c);
                let mu = blur(&x, roi.w(), roi.h(), &kern);
                let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
                let e2 = blur(&sq, roi.w(), roi.h(), &kern);
                let var = e2.iter().zip(&mu).map(|(e, m)| e - m * m).collect();
                ChannelTarget { x, mu, var }
            })
            .collect();
        Ok(Self {
            width: w,
            height: h,
            lambda,
            roi,
            count: mask.count(),
            mask: crop_mask,
            target: target.clone(),
            channels,
            kern,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn check(&self, pred: &Image) -> Result<(), LossError> {
        if pred.width != self.width || pred.height != self.height || pred.channels != 3 {
            return Err(LossError::ShapeMismatch(format!(
                "prediction is {}x{}x{}, target is {}x{}x3",
                pred.width, pred.height, pred.channels, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Mean SSIM over masked pixels and channels.
    pub fn ssim(&self, pred: &Image) -> Result<f64, LossError> {
        self.check(pred)?;
        let per_channel: Vec<f64> = (0..3).into_par_iter().map(|c| self.channel(pred, c, false).0).collect();
        Ok(per_channel.iter().sum::<f64>() / (3 * self.count) as f64)
    }

    /// Loss value and dL/dpred.
    pub fn evaluate(&self, pred: &Image) -> Result<(f64, Image), LossError> {
        self.run(pred, true)
    }

    /// Loss value alone.
    pub fn value(&self, pred: &Image) -> Result<f64, LossError> {
        Ok(self.run(pred, false)?.0)
    }

    fn run(&self, pred: &Image, want_grad: bool) -> Result<(f64, Image), LossError> {
        self.check(pred)?;
        let n = (3 * self.count) as f64;
        let mut grad = if want_grad {
            Image::zeros(self.width, self.height, 3)
        } else {
            Image::zeros(0, 0, 3)
        };

        let mut l1 = 0.0;
        let g1 = self.lambda / n;
        let (rw, r) = (self.roi.w(), self.roi);
        for (i, &m) in self.mask.iter().enumerate() {
            if !m {
                continue;
            }
            let (x, y) = (r.x0 + i % rw, r.y0 + i / rw);
            for c in 0..3 {
                let k = pred.index(x, y, c);
                let d = pred.data[k] - self.target.data[k];
                l1 += d.abs();
                if !want_grad {
                    continue;
                }
                grad.data[k] = if d > 0.0 {
                    g1
                } else if d < 0.0 {
                    -g1
                } else {
                    0.0
                };
            }
        }

        let per_channel: Vec<(f64, Vec<f64>)> = (0..3)
            .into_par_iter()
            .map(|c| self.channel(pred, c, want_grad && self.lambda < 1.0))
            .collect();
        let mut ssim_sum = 0.0;
        for (c, (s, g)) in per_channel.into_iter().enumerate() {
            ssim_sum += s;
            if g.is_empty() {
                continue;
            }
            for (i, v) in g.iter().enumerate() {
                let k = grad.index(r.x0 + i % rw, r.y0 + i / rw, c);
                grad.data[k] += v;
            }
        }
        let loss = self.lambda * l1 / n + (1.0 - self.lambda) * (1.0 - ssim_sum / n);
        Ok((loss, grad))
    }

    /// Sum of masked SSIM values for channel `c`, and optionally the gradient
    /// of the D-SSIM term over the ROI.
    fn channel(&self, pred: &Image, c: usize, want_grad: bool) -> (f64, Vec<f64>) {
        let (w, h) = (self.roi.w(), self.roi.h());
        let t = &self.channels[c];
        let y = crop_plane(pred, &self.roi, c);
        let mu_y = blur(&y, w, h, &self.kern);
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let e_yy = blur(&yy, w, h, &self.kern);
        let xy: Vec<f64> = y.iter().zip(&t.x).map(|(a, b)| a * b).collect();
        let e_xy = blur(&xy, w, h, &self.kern);

        let weight = -(1.0 - self.lambda) / (3 * self.count) as f64;
        let mut sum = 0.0;
        let (mut ga, mut gb, mut gc) = if want_grad {
            (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        for i in 0..w * h {
            if !self.mask[i] {
                continue;
            }
            let (mx, my) = (t.mu[i], mu_y[i]);
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            let (a1, b1, a2, b2, s) = ssim_terms(mx, my, t.var[i], vy, cxy);
            sum += s;
            if want_grad {
                let d_my = a2 / b2 * (2.0 * mx * b1 - 2.0 * my * a1) / (b1 * b1);
                let d_vy = -(a1 / b1) * a2 / (b2 * b2);
                let d_cxy = (a1 / b1) * 2.0 / b2;
                let (d_my, d_vy, d_cxy) = (weight * d_my, weight * d_vy, weight * d_cxy);
                ga[i] = d_my - 2.0 * my * d_vy - mx * d_cxy;
                gb[i] = d_vy;
                gc[i] = d_cxy;
            }
        }
        if !want_grad {
            return (sum, Vec::new());
        }
        let ba = blur(&ga, w, h, &self.kern);
        let bb = blur(&gb, w, h, &self.kern);
        let bc = blur(&gc, w, h, &self.kern);
        let g = (0..w * h)
            .map(|i| ba[i] + 2.0 * y[i] * bb[i] + t.x[i] * bc[i])
            .collect();
        (sum, g)
    }
}

fn crop_plane(img: &Image, r: &Rect, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.w() * r.h());
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            out.push(img.get(x, y, c));
        }
    }
    out
}

/// One-shot loss: `(loss, dL/dpred)`.
pub fn image_loss(target: &Image, pred: &Image, mask: &Mask, lambda: f64) -> Result<(f64, Image), LossError> {
    if !target.same_shape(pred) {
        return Err(LossError::ShapeMismatch(format!(
            "target is {}x{}x{}, prediction is {}x{}x{}",
            target.width, target.height, target.channels, pred.width, pred.height, pred.channels
        )));
    }
    PhotometricLoss::new(target, mask, lambda)?.evaluate(pred)
}

/// Mean SSIM of `pred` against `target` over masked pixels.
pub fn masked_ssim(target: &Image, pred: &Image, mask: &Mask) -> Result<f64, LossError> {
    PhotometricLoss::new(target, mask, 0.0)?.ssim(pred)
}
