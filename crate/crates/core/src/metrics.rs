//! Image quality metrics and the differentiable MSE + SSIM training loss.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), `C1 = (0.01·L)²`,
//! `C2 = (0.03·L)²` with `L = 1`, evaluated only where the window fits
//! inside the image. The metric and the loss share one code path.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{DfnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized `window × window` Gaussian weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }
}

/// Default SSIM weight in the hybrid loss.
pub const DEFAULT_LAMBDA_SSIM: f64 = 0.7;

fn check_pair(tape: &Tape<impl Scalar>, a: Var, b: Var, context: &'static str) -> Result<Shape4> {
    let s = tape.shape(a);
    s.expect_same(&tape.shape(b), context)?;
    Ok(s)
}

pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b, "mse")?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

pub fn mae_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b, "mae")?;
    let d = tape.sub(a, b)?;
    let ab = tape.abs(d);
    Ok(tape.mean(ab))
}

/// Mean SSIM over all valid window positions, channels and batch items.
pub fn ssim_loss_term<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = check_pair(tape, a, b, "ssim")?;
    if s.h < cfg.window || s.w < cfg.window {
        return Err(DfnError::invalid(
            "ssim",
            format!("image {}×{} smaller than the {}×{} window", s.h, s.w, cfg.window, cfg.window),
        ));
    }
    let kernel: Vec<T> = cfg.weights().into_iter().map(T::from_f64_lossy).collect();
    let mut wdata = Vec::with_capacity(s.c * kernel.len());
    for _ in 0..s.c {
        wdata.extend_from_slice(&kernel);
    }
    let window = tape.constant(Tensor4::from_vec(Shape4::new(s.c, 1, cfg.window, cfg.window)?, wdata)?);
    let c1 = T::from_f64_lossy(cfg.c1());
    let c2 = T::from_f64_lossy(cfg.c2());
    let two = T::one() + T::one();

    let blur = |tape: &mut Tape<T>, v: Var| tape.conv2d(v, window, None, 1, 0, s.c);
    let mu_a = blur(tape, a)?;
    let mu_b = blur(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = blur(tape, aa)?;
    let e_bb = blur(tape, bb)?;
    let e_ab = blur(tape, ab)?;

    let mu_a2 = tape.square(mu_a);
    let mu_b2 = tape.square(mu_b);
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_a2)?;
    let var_b = tape.sub(e_bb, mu_b2)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.mul_scalar(mu_ab, two);
    let l_num = tape.add_scalar(l_num, c1);
    let c_num = tape.mul_scalar(cov, two);
    let c_num = tape.add_scalar(c_num, c2);
    let num = tape.mul(l_num, c_num)?;

    let l_den = tape.add(mu_a2, mu_b2)?;
    let l_den = tape.add_scalar(l_den, c1);
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(c_den, c2);
    let den = tape.mul(l_den, c_den)?;

    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `mse + λ·(1 − ssim)`.
pub fn hybrid_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, lambda_ssim: f64, cfg: &SsimConfig) -> Result<Var> {
    let mse = mse_loss(tape, pred, target)?;
    if lambda_ssim == 0.0 {
        return Ok(mse);
    }
    let ssim = ssim_loss_term(tape, pred, target, cfg)?;
    let lambda = T::from_f64_lossy(lambda_ssim);
    let scaled = tape.mul_scalar(ssim, -lambda);
    let dissim = tape.add_scalar(scaled, lambda);
    tape.add(mse, dissim)
}

fn scalar_of<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl FnOnce(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let va = tape.constant(a.cast());
    let vb = tape.constant(b.cast());
    let out = f(&mut tape, va, vb)?;
    Ok(tape.value(out).data()[0])
}

pub fn mse<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    scalar_of(a, b, |t, x, y| mse_loss(t, x, y))
}

pub fn mae<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    scalar_of(a, b, |t, x, y| mae_loss(t, x, y))
}

pub fn ssim<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, cfg: &SsimConfig) -> Result<f64> {
    scalar_of(a, b, |t, x, y| ssim_loss_term(t, x, y, cfg))
}

/// `10·log10(max²/mse)` in dB; `+∞` for identical inputs.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

/// Quality and loss figures for one image pair or one dataset pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
    pub hybrid: f64,
}

impl MetricRecord {
    pub const CSV_HEADER: &'static str = "epoch,split,psnr,ssim,mse,mae,hybrid";

    pub fn compute<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>, lambda_ssim: f64, cfg: &SsimConfig) -> Result<Self> {
        let mse = mse(pred, target)?;
        let ssim = ssim(pred, target, cfg)?;
        Ok(MetricRecord {
            psnr: psnr_from_mse(mse, 1.0),
            ssim,
            mse,
            mae: mae(pred, target)?,
            hybrid: mse + lambda_ssim * (1.0 - ssim),
        })
    }

    /// Uniform average, accumulated in slice order.
    pub fn mean(records: &[MetricRecord]) -> Option<Self> {
        if records.is_empty() {
            return None;
        }
        let n = records.len() as f64;
        let avg = |f: fn(&MetricRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Some(MetricRecord {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            mse: avg(|r| r.mse),
            mae: avg(|r| r.mae),
            hybrid: avg(|r| r.hybrid),
        })
    }

    pub fn csv_row(&self, epoch: usize, split: &str) -> String {
        format!("{epoch},{split},{self}")
    }
}

/// `psnr,ssim,mse,mae,hybrid`, shortest round-trip float formatting.
impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.psnr, self.ssim, self.mse, self.mae, self.hybrid)
    }
}
