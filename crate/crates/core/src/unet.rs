//! Stage 2: U-Net with attention after every pooling and every skip concat.

use gated_tensor::{Float, Ops};

use crate::cbam::Cbam;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvBnRelu, Forward, UpConv};

/// Number of 2x downsamplings; inputs must be divisible by `2^DEPTH`.
pub const DEPTH: usize = 4;
pub const SIZE_MULTIPLE: usize = 1 << DEPTH;

#[derive(Clone, Copy, Debug)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl DoubleConv {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, cin: usize, cout: usize, eps: f64) -> Self {
        DoubleConv {
            first: ConvBnRelu::new(&mut b.sub("0"), cin, cout, eps),
            second: ConvBnRelu::new(&mut b.sub("1"), cout, cout, eps),
        }
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let h = self.first.forward(fw, x)?;
        self.second.forward(fw, &h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub attention: Cbam,
    pub conv: DoubleConv,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: UpConv,
    pub attention: Cbam,
    pub conv: DoubleConv,
}

#[derive(Clone, Debug)]
pub struct RefineNet {
    pub widths: [usize; DEPTH + 1],
    pub stem: DoubleConv,
    /// `down[i]` produces `D_{i+1}`.
    pub down: Vec<EncoderStage>,
    /// `up[i]` produces `U_i`.
    pub up: Vec<DecoderStage>,
    pub out: Conv2d,
}

/// Encoder features `D_0..D_4`; the last one is the bottleneck.
#[derive(Clone, Debug)]
pub struct EncoderState<V> {
    pub features: Vec<V>,
}

impl<V> EncoderState<V> {
    pub fn bottleneck(&self) -> &V {
        self.features.last().expect("encoder state is never empty")
    }

    /// Skip features `D_0..D_3`.
    pub fn skips(&self) -> &[V] {
        &self.features[..DEPTH]
    }
}

impl RefineNet {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, base_width: usize, reduction: usize, eps: f64) -> Result<Self> {
        let widths: [usize; DEPTH + 1] = std::array::from_fn(|i| base_width << i);
        let stem = DoubleConv::new(&mut b.sub("stem"), 3, widths[0], eps);
        let mut down = Vec::with_capacity(DEPTH);
        for i in 1..=DEPTH {
            let mut s = b.sub(format!("down.{}", i - 1));
            down.push(EncoderStage {
                attention: Cbam::new(&mut s.sub("cbam"), widths[i - 1], reduction)?,
                conv: DoubleConv::new(&mut s.sub("conv"), widths[i - 1], widths[i], eps),
            });
        }
        let mut up = Vec::with_capacity(DEPTH);
        for i in 0..DEPTH {
            let mut s = b.sub(format!("up.{i}"));
            up.push(DecoderStage {
                up: UpConv::new(&mut s.sub("upconv"), widths[i + 1], widths[i]),
                attention: Cbam::new(&mut s.sub("cbam"), 2 * widths[i], reduction)?,
                conv: DoubleConv::new(&mut s.sub("conv"), 2 * widths[i], widths[i], eps),
            });
        }
        let out = Conv2d::new(&mut b.sub("out"), widths[0], 3, 1, true);
        Ok(RefineNet {
            widths,
            stem,
            down,
            up,
            out,
        })
    }

    pub fn encode<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<EncoderState<O::Value>> {
        check_input(&fw.ops.shape(x))?;
        let mut features = Vec::with_capacity(DEPTH + 1);
        features.push(self.stem.forward(fw, x)?);
        for stage in &self.down {
            let pooled = fw.ops.max_pool2x2(features.last().unwrap())?;
            let attended = stage.attention.forward(fw, &pooled)?;
            features.push(stage.conv.forward(fw, &attended)?);
        }
        Ok(EncoderState { features })
    }

    /// Decoder feature `U_0` before the output projection.
    pub fn decode_features<F: Float, O: Ops<F>>(
        &self,
        fw: &Forward<'_, F, O>,
        state: &EncoderState<O::Value>,
    ) -> Result<O::Value> {
        if state.features.len() != DEPTH + 1 {
            return Err(Error::Shape(format!(
                "encoder state has {} feature maps, expected {}",
                state.features.len(),
                DEPTH + 1
            )));
        }
        let mut u = state.bottleneck().clone();
        for i in (0..DEPTH).rev() {
            let stage = &self.up[i];
            let skip = &state.features[i];
            let upsampled = stage.up.forward(fw, &u)?;
            let (us, ss) = (fw.ops.shape(&upsampled), fw.ops.shape(skip));
            if us[0] != ss[0] || us[2..] != ss[2..] {
                return Err(Error::Shape(format!(
                    "decoder stage {i}: upsampled {us:?} does not match skip {ss:?}"
                )));
            }
            let cat = fw.ops.concat_channels(&[&upsampled, skip])?;
            let attended = stage.attention.forward(fw, &cat)?;
            u = stage.conv.forward(fw, &attended)?;
        }
        Ok(u)
    }

    /// `sigmoid(conv1x1(U_0))`.
    pub fn decode<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, state: &EncoderState<O::Value>) -> Result<O::Value> {
        let u0 = self.decode_features(fw, state)?;
        Ok(fw.ops.sigmoid(&self.out.forward(fw, &u0)?)?)
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let state = self.encode(fw, x)?;
        self.decode(fw, &state)
    }
}

fn check_input(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!("expected (N, 3, H, W) input, got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "height and width must be positive multiples of {SIZE_MULTIPLE}, got {h}x{w}"
        )));
    }
    Ok(())
}
