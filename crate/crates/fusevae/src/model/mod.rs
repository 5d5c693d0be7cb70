//! The hierarchical multimodal model: per-modality encoders, a shared
//! top-down latent path, per-modality decoders and critics.
//!
//! Latents form a pyramid from a global vector down to a map at image
//! resolution. The top-down pass emits a prior at every level from the
//! levels above; encoders contribute residual experts that sharpen the
//! prior into a posterior wherever their modality is observed. Missing
//! modalities simply contribute nothing, which is what lets any non-empty
//! subset drive synthesis of all modalities.

mod build;
mod checkpoint;
#[cfg(test)]
mod tests;

pub use build::{EncoderTaps, LatentPass, LevelState, ParamCtx};
pub use checkpoint::CheckpointMeta;

use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::missingness::Indicator;
use crate::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// One latent level: its spatial side and number of latent channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub spatial: usize,
    pub channels: usize,
}

/// Latent pyramid layout, finest level first. The coarsest level always has
/// spatial side one and is treated as a plain vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierSpec {
    pub side: usize,
    pub levels: Vec<LevelSpec>,
}

impl HierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("hierarchy needs at least one level"));
        }
        let last = self.levels.last().unwrap();
        if last.spatial != 1 {
            return Err(Error::config(format!(
                "coarsest level must be global (spatial 1), got {}",
                last.spatial
            )));
        }
        let first = self.levels[0];
        if self.levels.len() > 1 && first.spatial != self.side {
            return Err(Error::config(format!(
                "finest level spatial {} must equal the image side {}",
                first.spatial, self.side
            )));
        }
        if self.side < 8 || self.side % 4 != 0 {
            return Err(Error::config(format!(
                "image side must be at least 8 and divisible by 4, got {}",
                self.side
            )));
        }
        for w in self.levels.windows(2) {
            let (fine, coarse) = (w[0], w[1]);
            if coarse.spatial >= fine.spatial {
                return Err(Error::config("level spatials must strictly decrease"));
            }
            if coarse.spatial > 1 {
                let ratio = fine.spatial / coarse.spatial;
                if fine.spatial % coarse.spatial != 0 || !ratio.is_power_of_two() {
                    return Err(Error::config(format!(
                        "spatial {} does not refine {} by a power of two",
                        coarse.spatial, fine.spatial
                    )));
                }
            }
        }
        if self.levels.iter().any(|l| l.channels == 0) {
            return Err(Error::config("every level needs at least one channel"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Whether the only latent is the global vector.
    pub fn global_only(&self) -> bool {
        self.levels.len() == 1
    }

    /// Convolution width at a given spatial side: doubles once the feature
    /// map has been pooled to a quarter of the image side or below.
    pub fn conv_width(&self, spatial: usize, base: usize) -> usize {
        if spatial * 4 <= self.side {
            2 * base
        } else {
            base
        }
    }
}

/// How expert beliefs from different modalities are combined per level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Precision-weighted product of the level prior with one residual
    /// expert per observed modality.
    ProductOfExperts,
    /// Arithmetic mean of expert parameters, ignoring the prior. An
    /// intentionally weaker ablation.
    AverageExperts,
    /// One shared encoder over all modalities stacked as channels, with
    /// zeros where a modality is missing, yielding a single expert.
    ConcatZeros,
}

/// Weight initialization knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInit {
    pub seed: u64,
    /// Zeroed expert heads make every residual expert exactly standard
    /// normal at initialization, useful for diagnostics.
    pub zero_init_expert_heads: bool,
    /// Added to the expert log-variance head bias; large positive values
    /// make experts nearly uninformative.
    pub expert_logvar_bias: f64,
}

impl Default for ModelInit {
    fn default() -> Self {
        ModelInit {
            seed: 1,
            zero_init_expert_heads: false,
            expert_logvar_bias: 0.0,
        }
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: usize,
    pub hier: HierSpec,
    pub base_width: usize,
    pub decoder_blocks: usize,
    pub fusion: FusionMode,
    pub init: ModelInit,
}

impl ModelConfig {
    /// Desk-scale default: four modalities at 32x32 with a three-level
    /// pyramid.
    pub fn desk(modalities: usize) -> Self {
        ModelConfig {
            modalities,
            hier: HierSpec {
                side: 32,
                levels: vec![
                    LevelSpec { spatial: 32, channels: 4 },
                    LevelSpec { spatial: 8, channels: 16 },
                    LevelSpec { spatial: 1, channels: 64 },
                ],
            },
            // Sized so a 50-epoch run over a few thousand samples stays well
            // inside a half-hour CPU budget.
            base_width: 4,
            decoder_blocks: 2,
            fusion: FusionMode::ProductOfExperts,
            init: ModelInit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities == 0 || self.modalities > Indicator::MAX_MODALITIES {
            return Err(Error::config(format!(
                "modalities must be 1..={}, got {}",
                Indicator::MAX_MODALITIES,
                self.modalities
            )));
        }
        if self.base_width == 0 {
            return Err(Error::config("base width must be positive"));
        }
        if self.decoder_blocks == 0 {
            return Err(Error::config("decoder needs at least one block"));
        }
        self.hier.validate()?;
        if self.hier.global_only() && !self.hier.side.is_power_of_two() {
            return Err(Error::config(
                "a global-only latent needs a power-of-two image side",
            ));
        }
        Ok(())
    }

    /// Number of distinct encoder/expert stacks the fusion mode requires.
    pub fn encoder_count(&self) -> usize {
        match self.fusion {
            FusionMode::ConcatZeros => 1,
            _ => self.modalities,
        }
    }

    /// Input channels each encoder consumes.
    pub fn encoder_in_channels(&self) -> usize {
        match self.fusion {
            FusionMode::ConcatZeros => self.modalities,
            _ => 1,
        }
    }
}

/// Parameters plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init.seed);
        let mut model = Model { config, store: ParamStore::new() };
        model.init_params(&mut rng)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_observation(
        &self,
        images: &[Option<Tensor>],
        subset: &Indicator,
    ) -> Result<()> {
        if subset.len() != self.config.modalities || images.len() != self.config.modalities {
            return Err(Error::contract(format!(
                "expected {} modalities, got indicator {subset} over {} images",
                self.config.modalities,
                images.len()
            )));
        }
        if subset.is_empty() {
            return Err(Error::contract("synthesis needs at least one observed modality"));
        }
        let side = self.config.hier.side;
        for j in subset.iter_observed() {
            match &images[j] {
                None => {
                    return Err(Error::contract(format!(
                        "modality {j} is marked observed but has no image"
                    )))
                }
                Some(img) if img.shape() != [1, side, side] => {
                    return Err(Error::shape(format!(
                        "modality {j} image has shape {:?}, expected [1, {side}, {side}]",
                        img.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Encodes the observed images and samples the posterior top-down,
    /// then decodes every modality. Returns the synthesized images.
    pub fn synthesize(
        &self,
        images: &[Option<Tensor>],
        subset: &Indicator,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<Tensor>> {
        self.check_observation(images, subset)?;
        let mut g = Graph::new();
        let mut pc = ParamCtx::new(&self.store);
        let leaves = self.image_leaves(&mut g, images, subset)?;
        let taps = self.build_observed_encoders(&mut g, &mut pc, &leaves, subset)?;
        let pass = self.build_posterior(&mut g, &mut pc, &taps, temperature, rng)?;
        let z = pass.finest_sample();
        (0..self.config.modalities)
            .map(|m| {
                let img = self.build_decoder(&mut g, &mut pc, m, z)?;
                Ok(g.detach(img))
            })
            .collect()
    }

    /// Draws images from the prior alone.
    pub fn sample_prior(&self, temperature: f64, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut pc = ParamCtx::new(&self.store);
        let pass = self.build_prior(&mut g, &mut pc, temperature, rng)?;
        let z = pass.finest_sample();
        (0..self.config.modalities)
            .map(|m| {
                let img = self.build_decoder(&mut g, &mut pc, m, z)?;
                Ok(g.detach(img))
            })
            .collect()
    }

    /// Posterior and prior parameters per level (finest first) for one
    /// observation, using mean propagation (temperature zero) so the result
    /// is deterministic.
    pub fn posterior_params(
        &self,
        images: &[Option<Tensor>],
        subset: &Indicator,
    ) -> Result<Vec<(DiagGaussian, DiagGaussian)>> {
        self.check_observation(images, subset)?;
        let mut g = Graph::new();
        let mut pc = ParamCtx::new(&self.store);
        let leaves = self.image_leaves(&mut g, images, subset)?;
        let taps = self.build_observed_encoders(&mut g, &mut pc, &leaves, subset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.build_posterior(&mut g, &mut pc, &taps, 0.0, &mut rng)?;
        pass.levels
            .iter()
            .map(|lvl| {
                let q = lvl.posterior.expect("posterior pass has q at every level");
                Ok((q.detach(&g)?, lvl.prior.detach(&g)?))
            })
            .collect()
    }

    /// Critic score for one image.
    pub fn criticize(&self, image: &Tensor, modality: usize) -> Result<f64> {
        let mut g = Graph::new();
        let mut pc = ParamCtx::new(&self.store);
        let x = g.leaf(image.clone());
        let d = self.build_discriminator(&mut g, &mut pc, modality, x)?;
        Ok(g.value(d).item())
    }

    pub(crate) fn draw_noise(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("noise shape is valid")
    }
}
