//! Reconstruction and regularisation losses for both stages.
//!
//! Every function is generic over the executor so the same code gives
//! scalar values eagerly and gradients on a recording graph. Batched inputs
//! are reduced by the mean over the batch.

use std::collections::BTreeMap;
use std::sync::Arc;

use gated_tensor::{Eager, Float, Ops, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    /// Local statistics under an 11x11 Gaussian window.
    #[default]
    Windowed,
    /// One set of statistics per channel over the whole image.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_w: f64,
    pub delta: f64,
    pub lambda_c: f64,
    pub lambda_gamma: f64,
    pub lambda_tv: f64,
    pub gamma_target: f64,
    pub stage1_weight: f64,
    pub stage2_weight: f64,
    pub ssim_mode: SsimMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.2,
            gamma_w: 0.2,
            delta: 0.1,
            lambda_c: 0.5,
            lambda_gamma: 0.1,
            lambda_tv: 1.0,
            gamma_target: 1.0,
            stage1_weight: 0.3,
            stage2_weight: 0.7,
            ssim_mode: SsimMode::Windowed,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_w", self.gamma_w),
            ("delta", self.delta),
            ("lambda_c", self.lambda_c),
            ("lambda_gamma", self.lambda_gamma),
            ("lambda_tv", self.lambda_tv),
            ("gamma_target", self.gamma_target),
            ("stage1_weight", self.stage1_weight),
            ("stage2_weight", self.stage2_weight),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("loss.{name}"), format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape<F: Float, O: Ops<F>>(ops: &O, a: &O::Value, b: &O::Value, what: &str) -> Result<()> {
    let (sa, sb) = (ops.shape(a), ops.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

fn as_nchw<F: Float, O: Ops<F>>(ops: &O, x: &O::Value, what: &str) -> Result<[usize; 4]> {
    match ops.shape(x)[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::Shape(format!("{what}: expected (N, C, H, W), got {s:?}"))),
    }
}

fn f<F: Float>(v: f64) -> F {
    F::from_f64_lossy(v)
}

/// Mean absolute error.
pub fn l1_loss<F: Float, O: Ops<F>>(ops: &O, pred: &O::Value, target: &O::Value) -> Result<O::Value> {
    same_shape(ops, pred, target, "l1 loss")?;
    Ok(ops.mean_all(&ops.abs(&ops.sub(pred, target)?)?)?)
}

/// Row-normalised Gaussian smoothing matrix of size `n x n`. Taps falling
/// outside the image are dropped and the remaining weights renormalised, so
/// constant images are preserved exactly and small images are allowed.
pub fn gaussian_matrix<F: Float>(n: usize) -> Arc<Vec<F>> {
    let half = (SSIM_WINDOW / 2) as isize;
    let taps: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut m = vec![F::zero(); n * n];
    for i in 0..n {
        let lo = (i as isize - half).max(0) as usize;
        let hi = (i as isize + half).min(n as isize - 1) as usize;
        let norm: f64 = (lo..=hi).map(|j| taps[(j as isize - i as isize + half) as usize]).sum();
        for j in lo..=hi {
            m[i * n + j] = f(taps[(j as isize - i as isize + half) as usize] / norm);
        }
    }
    Arc::new(m)
}

fn averaging_matrix<F: Float>(n: usize) -> Arc<Vec<F>> {
    Arc::new(vec![f(1.0 / n as f64); n * n])
}

/// Mean of the SSIM map over all positions, channels and batch items.
pub fn ssim_index<F: Float, O: Ops<F>>(ops: &O, x: &O::Value, y: &O::Value, mode: SsimMode) -> Result<O::Value> {
    same_shape(ops, x, y, "ssim")?;
    let [_, _, h, w] = as_nchw(ops, x, "ssim")?;
    let (kh, kw) = match mode {
        SsimMode::Windowed => (gaussian_matrix(h), gaussian_matrix(w)),
        SsimMode::Global => (averaging_matrix(h), averaging_matrix(w)),
    };
    let blur = |v: &O::Value| ops.separable_filter(v, kh.clone(), kw.clone());
    let mx = blur(x)?;
    let my = blur(y)?;
    let exx = blur(&ops.sqr(x)?)?;
    let eyy = blur(&ops.sqr(y)?)?;
    let exy = blur(&ops.mul(x, y)?)?;
    let mx2 = ops.sqr(&mx)?;
    let my2 = ops.sqr(&my)?;
    let mxy = ops.mul(&mx, &my)?;
    let vx = ops.sub(&exx, &mx2)?;
    let vy = ops.sub(&eyy, &my2)?;
    let cxy = ops.sub(&exy, &mxy)?;
    let num = ops.mul(
        &ops.affine(&mxy, f(2.0), f(SSIM_C1))?,
        &ops.affine(&cxy, f(2.0), f(SSIM_C2))?,
    )?;
    let den = ops.mul(
        &ops.affine(&ops.add(&mx2, &my2)?, F::one(), f(SSIM_C1))?,
        &ops.affine(&ops.add(&vx, &vy)?, F::one(), f(SSIM_C2))?,
    )?;
    Ok(ops.mean_all(&ops.div(&num, &den)?)?)
}

/// `1 - SSIM`.
pub fn ssim_loss<F: Float, O: Ops<F>>(ops: &O, pred: &O::Value, target: &O::Value, mode: SsimMode) -> Result<O::Value> {
    let s = ssim_index(ops, pred, target, mode)?;
    Ok(ops.affine(&s, -F::one(), F::one())?)
}

/// Sum of squared neighbour differences divided by `N*C*H*W`, times
/// `lambda_tv`.
pub fn tv_loss<F: Float, O: Ops<F>>(ops: &O, x: &O::Value, lambda_tv: f64) -> Result<O::Value> {
    let [n, c, h, w] = as_nchw(ops, x, "tv loss")?;
    let s = ops.tv_sum(x)?;
    Ok(ops.affine(&s, f(lambda_tv / (n * c * h * w) as f64), F::zero())?)
}

/// `lambda_c * [(mr - mg)^2 + (mr - mb)^2 + (mg - mb)^2]` on per-image
/// channel means.
pub fn color_constancy_loss<F: Float, O: Ops<F>>(ops: &O, x: &O::Value, lambda_c: f64) -> Result<O::Value> {
    let [_, c, _, _] = as_nchw(ops, x, "color loss")?;
    if c != 3 {
        return Err(Error::Shape(format!("color loss needs 3 channels, got {c}")));
    }
    let means = ops.global_avg_pool(x)?;
    let ch: Vec<_> = (0..3).map(|i| ops.narrow_channels(&means, i, 1)).collect::<std::result::Result<_, _>>()?;
    let mut acc = None;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let d = ops.sqr(&ops.sub(&ch[a], &ch[b])?)?;
        acc = Some(match acc {
            None => d,
            Some(s) => ops.add(&s, &d)?,
        });
    }
    let per_image = acc.unwrap();
    Ok(ops.affine(&ops.mean_all(&per_image)?, f(lambda_c), F::zero())?)
}

/// `lambda_gamma * (mean(gamma) - target)^2`, per image then averaged.
pub fn gamma_reg_loss<F: Float, O: Ops<F>>(ops: &O, gamma: &O::Value, lambda_gamma: f64, target: f64) -> Result<O::Value> {
    as_nchw(ops, gamma, "gamma regularisation")?;
    let m = ops.channel_mean(&ops.global_avg_pool(gamma)?)?;
    let d = ops.sqr(&ops.affine(&m, F::one(), f(-target))?)?;
    Ok(ops.affine(&ops.mean_all(&d)?, f(lambda_gamma), F::zero())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Gamma-corrected output, with gamma regularisation.
    One,
    /// Refined output, without gamma regularisation.
    Two,
}

/// Per-term values of one stage before the composite weights are applied.
#[derive(Clone, Debug)]
pub struct StageTerms<V> {
    pub l1: V,
    pub ssim: V,
    pub tv: V,
    pub color: V,
    pub gamma_reg: Option<V>,
    pub total: V,
}

pub fn stage_loss<F: Float, O: Ops<F>>(
    ops: &O,
    stage: Stage,
    pred: &O::Value,
    target: &O::Value,
    gamma: Option<&O::Value>,
    w: &LossWeights,
) -> Result<StageTerms<O::Value>> {
    let l1 = l1_loss(ops, pred, target)?;
    let ssim = ssim_loss(ops, pred, target, w.ssim_mode)?;
    let tv = tv_loss(ops, pred, w.lambda_tv)?;
    let color = color_constancy_loss(ops, pred, w.lambda_c)?;
    let gamma_reg = match stage {
        Stage::Two => None,
        Stage::One => {
            let g = gamma.ok_or_else(|| Error::Shape("stage-1 loss requires the gamma map".into()))?;
            Some(gamma_reg_loss(ops, g, w.lambda_gamma, w.gamma_target)?)
        }
    };
    let mut total = ops.affine(&l1, f(w.alpha), F::zero())?;
    for (term, weight) in [(&ssim, w.beta), (&tv, w.gamma_w), (&color, w.delta)] {
        total = ops.add(&total, &ops.affine(term, f(weight), F::zero())?)?;
    }
    if let Some(g) = &gamma_reg {
        total = ops.add(&total, g)?;
    }
    Ok(StageTerms {
        l1,
        ssim,
        tv,
        color,
        gamma_reg,
        total,
    })
}

#[derive(Clone, Debug)]
pub struct TotalTerms<V> {
    pub stage1: StageTerms<V>,
    pub stage2: StageTerms<V>,
    pub total: V,
}

/// `stage1_weight * L(stage1, gamma) + stage2_weight * L(refined)`.
pub fn total_loss<F: Float, O: Ops<F>>(
    ops: &O,
    stage1: &O::Value,
    refined: &O::Value,
    target: &O::Value,
    gamma: &O::Value,
    w: &LossWeights,
) -> Result<TotalTerms<O::Value>> {
    let s1 = stage_loss(ops, Stage::One, stage1, target, Some(gamma), w)?;
    let s2 = stage_loss(ops, Stage::Two, refined, target, None, w)?;
    let total = ops.add(
        &ops.affine(&s1.total, f(w.stage1_weight), F::zero())?,
        &ops.affine(&s2.total, f(w.stage2_weight), F::zero())?,
    )?;
    Ok(TotalTerms {
        stage1: s1,
        stage2: s2,
        total,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
    pub color: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_reg: Option<f64>,
    pub total: f64,
}

/// Scalar values of every loss term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage1: StageRecord,
    pub stage2: StageRecord,
    pub total: f64,
}

fn scalar<F: Float, O: Ops<F>>(ops: &O, v: &O::Value) -> Result<f64> {
    Ok(ops.value(v).to_scalar()?.to_f64_lossy())
}

impl StageRecord {
    pub fn from_terms<F: Float, O: Ops<F>>(ops: &O, t: &StageTerms<O::Value>) -> Result<Self> {
        Ok(StageRecord {
            l1: scalar(ops, &t.l1)?,
            ssim: scalar(ops, &t.ssim)?,
            tv: scalar(ops, &t.tv)?,
            color: scalar(ops, &t.color)?,
            gamma_reg: t.gamma_reg.as_ref().map(|g| scalar(ops, g)).transpose()?,
            total: scalar(ops, &t.total)?,
        })
    }
}

impl StageRecord {
    pub fn to_record(&self, prefix: &str) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        out.insert(format!("{prefix}.l1"), self.l1);
        out.insert(format!("{prefix}.ssim"), self.ssim);
        out.insert(format!("{prefix}.tv"), self.tv);
        out.insert(format!("{prefix}.color"), self.color);
        if let Some(g) = self.gamma_reg {
            out.insert(format!("{prefix}.gamma_reg"), g);
        }
        out.insert(format!("{prefix}.total"), self.total);
        out
    }
}

impl LossBreakdown {
    pub fn from_terms<F: Float, O: Ops<F>>(ops: &O, t: &TotalTerms<O::Value>) -> Result<Self> {
        Ok(LossBreakdown {
            stage1: StageRecord::from_terms(ops, &t.stage1)?,
            stage2: StageRecord::from_terms(ops, &t.stage2)?,
            total: scalar(ops, &t.total)?,
        })
    }

    /// Flat `stage.term -> value` record for logs.
    pub fn to_record(&self) -> BTreeMap<String, f64> {
        let mut out = self.stage1.to_record("stage1");
        out.extend(self.stage2.to_record("stage2"));
        out.insert("total".into(), self.total);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_record().values().all(|v| v.is_finite())
    }
}

/// SSIM of two images, computed in 64-bit.
pub fn ssim(x: &ImageTensor, y: &ImageTensor, mode: SsimMode) -> Result<f64> {
    let xb: Tensor<f64> = x.to_batch().cast();
    let yb: Tensor<f64> = y.to_batch().cast();
    Ok(ssim_index(&Eager, &xb, &yb, mode)?.to_scalar()?)
}
