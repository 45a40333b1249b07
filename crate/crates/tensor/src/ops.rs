use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::kernels as k;
use crate::{Float, Tensor};

/// How a batch-norm layer obtains its normalisation statistics.
#[derive(Clone, Debug)]
pub enum BnMode<F> {
    /// Normalise with the statistics of the current batch.
    Batch { eps: F },
    /// Normalise with fixed (running) statistics.
    Fixed {
        mean: Tensor<F>,
        var: Tensor<F>,
        eps: F,
    },
}

/// Statistics of a batch seen in [`BnMode::Batch`]; `var` is the unbiased
/// estimate used for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

/// The operation set the models are written against.
///
/// All spatial operations take NCHW rank-4 values.
pub trait Ops<F: Float> {
    type Value: Clone;

    fn constant(&self, t: Tensor<F>) -> Self::Value;
    /// Bind a trainable tensor; recording executors track its gradient.
    fn parameter(&self, t: Tensor<F>) -> Self::Value;
    fn value(&self, v: &Self::Value) -> Tensor<F>;
    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn div(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `scale * x + shift`.
    fn affine(&self, x: &Self::Value, scale: F, shift: F) -> Result<Self::Value>;
    fn relu(&self, x: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&self, x: &Self::Value) -> Result<Self::Value>;
    fn sqr(&self, x: &Self::Value) -> Result<Self::Value>;
    fn abs(&self, x: &Self::Value) -> Result<Self::Value>;
    /// Elementwise `base ^ exponent`; `base` must be positive.
    fn pow(&self, base: &Self::Value, exponent: &Self::Value) -> Result<Self::Value>;
    fn clamp(&self, x: &Self::Value, lo: F, hi: F) -> Result<Self::Value>;
    fn sum_all(&self, x: &Self::Value) -> Result<Self::Value>;
    fn mean_all(&self, x: &Self::Value) -> Result<Self::Value>;

    fn conv2d(
        &self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        pad: usize,
    ) -> Result<Self::Value>;
    fn conv_transpose2x2(
        &self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
    ) -> Result<Self::Value>;
    fn max_pool2x2(&self, x: &Self::Value) -> Result<Self::Value>;
    fn batch_norm(
        &self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: &Self::Value,
        mode: &BnMode<F>,
    ) -> Result<(Self::Value, Option<BatchStats<F>>)>;
    fn global_avg_pool(&self, x: &Self::Value) -> Result<Self::Value>;
    fn global_max_pool(&self, x: &Self::Value) -> Result<Self::Value>;
    fn channel_mean(&self, x: &Self::Value) -> Result<Self::Value>;
    fn channel_max(&self, x: &Self::Value) -> Result<Self::Value>;
    fn concat_channels(&self, xs: &[&Self::Value]) -> Result<Self::Value>;
    fn narrow_channels(&self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    /// Per-plane `kh * X * kw^T` with constant square matrices.
    fn separable_filter(
        &self,
        x: &Self::Value,
        kh: Arc<Vec<F>>,
        kw: Arc<Vec<F>>,
    ) -> Result<Self::Value>;
    /// Scalar sum of squared horizontal and vertical neighbour differences.
    fn tv_sum(&self, x: &Self::Value) -> Result<Self::Value>;
}

pub(crate) fn batch_stats<F: Float>(saved: &k::BnSaved<F>, count: usize) -> Result<BatchStats<F>> {
    let c = saved.mean.len();
    let corr = if count > 1 {
        F::from_usize(count).unwrap() / F::from_usize(count - 1).unwrap()
    } else {
        F::one()
    };
    Ok(BatchStats {
        mean: Tensor::from_vec([c], saved.mean.clone())?,
        var: Tensor::from_vec([c], saved.var.iter().map(|&v| v * corr).collect())?,
    })
}

pub(crate) fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn check_pow<F: Float>(base: &Tensor<F>, e: &Tensor<F>) -> Result<()> {
    base.expect_shape("pow", e.shape())?;
    if base.data().iter().any(|&b| b <= F::zero()) {
        return Err(invalid("pow", "base must be positive"));
    }
    Ok(())
}

/// Normalised output, saved intermediates, and batch statistics when computed.
pub(crate) type BnRun<F> = (Tensor<F>, k::BnSaved<F>, Option<BatchStats<F>>);

pub(crate) fn bn_run<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    mode: &BnMode<F>,
) -> Result<BnRun<F>> {
    match mode {
        BnMode::Batch { eps } => {
            let (y, saved) = k::batch_norm(x, weight, bias, None, *eps)?;
            let (n, _, h, w) = x.dims4()?;
            let stats = batch_stats(&saved, n * h * w)?;
            Ok((y, saved, Some(stats)))
        }
        BnMode::Fixed { mean, var, eps } => {
            let (y, saved) = k::batch_norm(x, weight, bias, Some((mean.data(), var.data())), *eps)?;
            Ok((y, saved, None))
        }
    }
}

/// Immediate executor over owned tensors. Nothing is recorded, so memory is
/// released as soon as intermediate values go out of scope.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<F: Float> Ops<F> for Eager {
    type Value = Tensor<F>;

    fn constant(&self, t: Tensor<F>) -> Tensor<F> {
        t
    }
    fn parameter(&self, t: Tensor<F>) -> Tensor<F> {
        t
    }
    fn value(&self, v: &Tensor<F>) -> Tensor<F> {
        v.clone()
    }
    fn shape(&self, v: &Tensor<F>) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        k::broadcast_binary(a, b, |x, y| x + y)
    }
    fn sub(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        k::broadcast_binary(a, b, |x, y| x - y)
    }
    fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        k::broadcast_binary(a, b, |x, y| x * y)
    }
    fn div(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        k::broadcast_binary(a, b, |x, y| x / y)
    }
    fn affine(&self, x: &Tensor<F>, scale: F, shift: F) -> Result<Tensor<F>> {
        Ok(x.map(|v| scale * v + shift))
    }
    fn relu(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(x.map(|v| v.max(F::zero())))
    }
    fn sigmoid(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(x.map(sigmoid))
    }
    fn sqr(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(x.map(|v| v * v))
    }
    fn abs(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(x.map(|v| v.abs()))
    }
    fn pow(&self, base: &Tensor<F>, exponent: &Tensor<F>) -> Result<Tensor<F>> {
        check_pow(base, exponent)?;
        base.zip_map(exponent, |b, e| b.powf(e))
    }
    fn clamp(&self, x: &Tensor<F>, lo: F, hi: F) -> Result<Tensor<F>> {
        Ok(x.map(|v| v.max(lo).min(hi)))
    }
    fn sum_all(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(Tensor::scalar(x.sum()))
    }
    fn mean_all(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(Tensor::scalar(x.mean()))
    }
    fn conv2d(
        &self,
        x: &Tensor<F>,
        w: &Tensor<F>,
        b: Option<&Tensor<F>>,
        pad: usize,
    ) -> Result<Tensor<F>> {
        k::conv2d(x, w, b, pad)
    }
    fn conv_transpose2x2(
        &self,
        x: &Tensor<F>,
        w: &Tensor<F>,
        b: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        k::conv_transpose2x2(x, w, b)
    }
    fn max_pool2x2(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(k::max_pool2x2(x)?.0)
    }
    fn batch_norm(
        &self,
        x: &Tensor<F>,
        weight: &Tensor<F>,
        bias: &Tensor<F>,
        mode: &BnMode<F>,
    ) -> Result<(Tensor<F>, Option<BatchStats<F>>)> {
        let (y, _, stats) = bn_run(x, weight, bias, mode)?;
        Ok((y, stats))
    }
    fn global_avg_pool(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        k::global_avg_pool(x)
    }
    fn global_max_pool(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(k::global_max_pool(x)?.0)
    }
    fn channel_mean(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        k::channel_mean(x)
    }
    fn channel_max(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(k::channel_max(x)?.0)
    }
    fn concat_channels(&self, xs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        k::concat_channels(xs)
    }
    fn narrow_channels(&self, x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
        k::narrow_channels(x, start, len)
    }
    fn separable_filter(
        &self,
        x: &Tensor<F>,
        kh: Arc<Vec<F>>,
        kw: Arc<Vec<F>>,
    ) -> Result<Tensor<F>> {
        k::separable_filter(x, &kh, &kw)
    }
    fn tv_sum(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(Tensor::scalar(k::tv_sum(x)?))
    }
}
