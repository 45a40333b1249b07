//! Stage 1: a bounded per-pixel gamma map predicted from local features and
//! a global channel gate, applied as a power law.

use gated_tensor::{Float, Ops};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvBnRelu, Forward};

pub const FEB_WIDTH: usize = 32;
pub const GCB_HIDDEN: usize = 16;
pub const GAMMA_MIN: f64 = 0.5;
pub const GAMMA_MAX: f64 = 2.0;
/// Guards the zero base of the power law.
pub const GAMMA_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Agcm {
    pub feb: [ConvBnRelu; 3],
    pub gcb_reduce: Conv2d,
    pub gcb_expand: Conv2d,
    pub head: Conv2d,
}

/// Intermediate values of the global context block.
#[derive(Clone, Debug)]
pub struct GcbOutput<V> {
    /// Spatial mean of the features, `(N, 32, 1, 1)`.
    pub descriptor: V,
    /// Sigmoid channel gate, `(N, 32, 1, 1)`.
    pub gate: V,
    pub context: V,
}

#[derive(Clone, Debug)]
pub struct AgcmOutput<V> {
    pub image: V,
    pub gamma: V,
}

impl Agcm {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, bn_eps: f64) -> Self {
        let feb = [
            ConvBnRelu::new(&mut b.sub("feb.0"), 3, FEB_WIDTH, bn_eps),
            ConvBnRelu::new(&mut b.sub("feb.1"), FEB_WIDTH, FEB_WIDTH, bn_eps),
            ConvBnRelu::new(&mut b.sub("feb.2"), FEB_WIDTH, FEB_WIDTH, bn_eps),
        ];
        Agcm {
            feb,
            gcb_reduce: Conv2d::new(&mut b.sub("gcb.reduce"), FEB_WIDTH, GCB_HIDDEN, 1, true),
            gcb_expand: Conv2d::new(&mut b.sub("gcb.expand"), GCB_HIDDEN, FEB_WIDTH, 1, true),
            head: Conv2d::new(&mut b.sub("head"), FEB_WIDTH, 3, 1, true),
        }
    }

    /// Three 3x3 conv/BN/ReLU stages, `(N, 3, H, W) -> (N, 32, H, W)`.
    pub fn feb_forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let shape = fw.ops.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected (N, 3, H, W) input, got {shape:?}")));
        }
        let mut h = x.clone();
        for stage in &self.feb {
            h = stage.forward(fw, &h)?;
        }
        Ok(h)
    }

    pub fn gcb_forward<F: Float, O: Ops<F>>(
        &self,
        fw: &Forward<'_, F, O>,
        feat: &O::Value,
    ) -> Result<GcbOutput<O::Value>> {
        let ops = fw.ops;
        let descriptor = ops.global_avg_pool(feat)?;
        let c1 = ops.relu(&self.gcb_reduce.forward(fw, &descriptor)?)?;
        let gate = ops.sigmoid(&self.gcb_expand.forward(fw, &c1)?)?;
        let context = ops.mul(feat, &gate)?;
        Ok(GcbOutput {
            descriptor,
            gate,
            context,
        })
    }

    /// `0.5 + 1.5 * sigmoid(conv1x1(ctx))`.
    pub fn predict_gamma<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, ctx: &O::Value) -> Result<O::Value> {
        let logits = self.head.forward(fw, ctx)?;
        gamma_from_logits(fw.ops, &logits)
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<AgcmOutput<O::Value>> {
        let feat = self.feb_forward(fw, x)?;
        let gcb = self.gcb_forward(fw, &feat)?;
        let gamma = self.predict_gamma(fw, &gcb.context)?;
        let image = apply_gamma(fw.ops, x, &gamma)?;
        Ok(AgcmOutput { image, gamma })
    }
}

pub fn gamma_from_logits<F: Float, O: Ops<F>>(ops: &O, logits: &O::Value) -> Result<O::Value> {
    let s = ops.sigmoid(logits)?;
    let scale = F::from_f64_lossy(GAMMA_MAX - GAMMA_MIN);
    Ok(ops.affine(&s, scale, F::from_f64_lossy(GAMMA_MIN))?)
}

/// `clamp((v + 1e-6)^gamma, 0, 1)`, differentiable in both arguments.
pub fn apply_gamma<F: Float, O: Ops<F>>(ops: &O, img: &O::Value, gamma: &O::Value) -> Result<O::Value> {
    let (a, b) = (ops.shape(img), ops.shape(gamma));
    if a != b {
        return Err(Error::Shape(format!("image {a:?} and gamma map {b:?} differ")));
    }
    let base = ops.affine(img, F::one(), F::from_f64_lossy(GAMMA_EPS))?;
    let y = ops.pow(&base, gamma)?;
    Ok(ops.clamp(&y, F::zero(), F::one())?)
}

/// Scalar form of [`apply_gamma`].
pub fn apply_gamma_scalar(v: f64, gamma: f64) -> f64 {
    (v + GAMMA_EPS).powf(gamma).clamp(0.0, 1.0)
}

/// Map a gamma value from `[0.5, 2.0]` onto `[0, 1]` for display.
pub fn gamma_to_display(g: f32) -> f32 {
    ((g as f64 - GAMMA_MIN) / (GAMMA_MAX - GAMMA_MIN)).clamp(0.0, 1.0) as f32
}
