//! The full two-stage network.

use gated_tensor::{Eager, Float, Ops, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agcm::Agcm;
use crate::cbam::DEFAULT_REDUCTION;
use crate::error::{Error, Result};
use crate::image::{BatchTensor, ImageTensor};
use crate::nn::{update_running_stats, Builder, Forward, ParamStore};
use crate::unet::RefineNet;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable scalars of the default configuration.
pub const DEFAULT_PARAM_COUNT: usize = 31_279_874;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Stem width of the refinement U-Net; stage `i` has `base_width * 2^i`
    /// channels.
    pub base_width: usize,
    pub cbam_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 64,
            cbam_reduction: DEFAULT_REDUCTION,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::config("model.base_width", "must be at least 1"));
        }
        if self.cbam_reduction == 0 {
            return Err(Error::config("model.cbam_reduction", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GatedNet {
    pub config: ModelConfig,
    pub agcm: Agcm,
    pub refine: RefineNet,
}

#[derive(Clone, Debug)]
pub struct GatedOutput<V> {
    /// Gamma-corrected image.
    pub stage1: V,
    pub gamma: V,
    /// Refined image.
    pub output: V,
}

impl GatedNet {
    /// Register all parameters in a fresh store, initialised from `seed`.
    pub fn build<F: Float>(config: &ModelConfig, seed: u64) -> Result<(GatedNet, ParamStore<F>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let agcm = Agcm::new(&mut b.sub("agcm"), BN_EPS);
        let refine = RefineNet::new(&mut b.sub("refine"), config.base_width, config.cbam_reduction, BN_EPS)?;
        let net = GatedNet {
            config: config.clone(),
            agcm,
            refine,
        };
        Ok((net, store))
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<GatedOutput<O::Value>> {
        let s1 = self.agcm.forward(fw, x)?;
        let output = self.refine.forward(fw, &s1.image)?;
        Ok(GatedOutput {
            stage1: s1.image,
            gamma: s1.gamma,
            output,
        })
    }
}

/// A network together with its weights.
#[derive(Clone, Debug)]
pub struct Model<F = f32> {
    pub net: GatedNet,
    pub params: ParamStore<F>,
}

impl<F: Float> Model<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (net, params) = GatedNet::build(config, seed)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Eval-mode forward pass on a `(N, 3, H, W)` batch.
    pub fn infer(&self, x: &Tensor<F>) -> Result<GatedOutput<Tensor<F>>> {
        let fw = Forward::new(&Eager, &self.params, false);
        self.net.forward(&fw, x)
    }

    /// Training-mode forward pass without gradients; updates the batch-norm
    /// running statistics like a training step would.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<GatedOutput<Tensor<F>>> {
        let fw = Forward::new(&Eager, &self.params, true);
        let out = self.net.forward(&fw, x)?;
        let stats = fw.take_bn_stats();
        drop(fw);
        update_running_stats(&mut self.params, &stats, BN_MOMENTUM);
        Ok(out)
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}

/// Stage outputs for one image.
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub stage1: ImageTensor,
    pub gamma: Tensor<f32>,
    pub output: ImageTensor,
}

impl Model<f32> {
    pub fn enhance_batch(&self, batch: &BatchTensor) -> Result<Vec<Enhanced>> {
        let out = self.infer(batch.tensor())?;
        (0..batch.len())
            .map(|i| {
                let (_, c, h, w) = out.gamma.dims4()?;
                Ok(Enhanced {
                    stage1: ImageTensor::from_batch(&out.stage1, i)?,
                    gamma: out.gamma.batch_item(i)?.reshape([c, h, w])?,
                    output: ImageTensor::from_batch(&out.output, i)?,
                })
            })
            .collect()
    }

    pub fn enhance(&self, img: &ImageTensor) -> Result<Enhanced> {
        let batch = BatchTensor::from_images(std::slice::from_ref(img))?;
        Ok(self.enhance_batch(&batch)?.remove(0))
    }
}
