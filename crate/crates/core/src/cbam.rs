//! Channel attention followed by spatial attention.

use gated_tensor::{Float, Ops};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Forward};

pub const DEFAULT_REDUCTION: usize = 16;

/// Reduction ratio actually used for a block with `channels` channels:
/// `reduction` normally, `max(1, channels / 8)` for narrow blocks.
pub fn effective_reduction(channels: usize, reduction: usize) -> usize {
    if channels < 16 {
        (channels / 8).max(1)
    } else {
        reduction
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Cbam {
    pub channels: usize,
    pub mlp_reduce: Conv2d,
    pub mlp_expand: Conv2d,
    pub spatial: Conv2d,
}

#[derive(Clone, Debug)]
pub struct CbamOutput<V> {
    /// `(N, C, 1, 1)`
    pub channel_gate: V,
    /// `(N, 1, H, W)`
    pub spatial_gate: V,
    pub output: V,
}

impl Cbam {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, channels: usize, reduction: usize) -> Result<Self> {
        let r = effective_reduction(channels, reduction);
        if r == 0 || !channels.is_multiple_of(r) {
            return Err(Error::Shape(format!(
                "{channels} channels are not divisible by reduction {r}"
            )));
        }
        let hidden = channels / r;
        Ok(Cbam {
            channels,
            mlp_reduce: Conv2d::new(&mut b.sub("mlp.0"), channels, hidden, 1, true),
            mlp_expand: Conv2d::new(&mut b.sub("mlp.2"), hidden, channels, 1, true),
            spatial: Conv2d::new(&mut b.sub("spatial"), 2, 1, 7, true),
        })
    }

    fn mlp<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, v: &O::Value) -> Result<O::Value> {
        let h = fw.ops.relu(&self.mlp_reduce.forward(fw, v)?)?;
        self.mlp_expand.forward(fw, &h)
    }

    /// `sigmoid(MLP(avgpool) + MLP(maxpool))`, shape `(N, C, 1, 1)`.
    pub fn channel_gate<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let shape = fw.ops.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "attention block expects {} channels, got {shape:?}",
                self.channels
            )));
        }
        let avg = self.mlp(fw, &fw.ops.global_avg_pool(x)?)?;
        let max = self.mlp(fw, &fw.ops.global_max_pool(x)?)?;
        Ok(fw.ops.sigmoid(&fw.ops.add(&avg, &max)?)?)
    }

    /// `sigmoid(conv7x7([mean_c; max_c]))`, shape `(N, 1, H, W)`.
    pub fn spatial_gate<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let ops = fw.ops;
        let cat = ops.concat_channels(&[&ops.channel_mean(x)?, &ops.channel_max(x)?])?;
        Ok(ops.sigmoid(&self.spatial.forward(fw, &cat)?)?)
    }

    pub fn channel_attention<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let gate = self.channel_gate(fw, x)?;
        Ok(fw.ops.mul(x, &gate)?)
    }

    pub fn spatial_attention<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let gate = self.spatial_gate(fw, x)?;
        Ok(fw.ops.mul(x, &gate)?)
    }

    pub fn forward_traced<F: Float, O: Ops<F>>(
        &self,
        fw: &Forward<'_, F, O>,
        x: &O::Value,
    ) -> Result<CbamOutput<O::Value>> {
        let channel_gate = self.channel_gate(fw, x)?;
        let refined = fw.ops.mul(x, &channel_gate)?;
        let spatial_gate = self.spatial_gate(fw, &refined)?;
        let output = fw.ops.mul(&refined, &spatial_gate)?;
        Ok(CbamOutput {
            channel_gate,
            spatial_gate,
            output,
        })
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        Ok(self.forward_traced(fw, x)?.output)
    }
}
