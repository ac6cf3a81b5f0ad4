use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nce::NoiseMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu,
    Identity,
}

/// One encoder block: affine map (a 1×1 convolution on image inputs),
/// optional batchnorm, activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub width: usize,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl BlockSpec {
    pub fn new(width: usize) -> Self {
        BlockSpec {
            width,
            batch_norm: true,
            activation: Activation::Relu,
        }
    }
}

/// Two affine layers with an activation (and optionally batchnorm) between
/// them, ending in a single logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub hidden: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub input: NoiseMode,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            hidden: 64,
            activation: Activation::Relu,
            batch_norm: false,
            input: NoiseMode::PerLocation,
        }
    }
}

fn yes() -> bool {
    true
}

fn one_f64() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Channels `C` of an `N×C` or `N×C×W×H` input.
    pub input_channels: usize,
    /// Spatial positions `W·H` per example; 1 for vector inputs.
    #[serde(default = "one_usize")]
    pub positions: usize,
    pub encoder: Vec<BlockSpec>,
    pub num_classes: usize,
    /// 1-based index of the block feeding the auxiliary branch.
    pub attach_layer: usize,
    pub projector_dim: usize,
    /// Standardize projected features with affine-free batchnorm (running
    /// statistics outside source training).
    #[serde(default = "yes")]
    pub projector_norm: bool,
    #[serde(default)]
    pub discriminator: DiscriminatorSpec,
    #[serde(default = "one_f64")]
    pub lambda: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.positions == 0 {
            return bad("input_channels and positions must be >= 1".into());
        }
        if self.encoder.is_empty() {
            return bad("encoder needs at least one block".into());
        }
        if let Some(i) = self.encoder.iter().position(|b| b.width == 0) {
            return bad(format!("encoder block {} has zero width", i + 1));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(1..=self.encoder.len()).contains(&self.attach_layer) {
            return bad(format!(
                "attach_layer must lie in 1..={}, got {}",
                self.encoder.len(),
                self.attach_layer
            ));
        }
        if self.projector_dim == 0 || self.discriminator.hidden == 0 {
            return bad("projector_dim and discriminator.hidden must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    pub fn attach_width(&self) -> usize {
        self.encoder[self.attach_layer - 1].width
    }

    /// Dimension of the space noise is added in.
    pub fn noise_dim(&self) -> usize {
        match self.discriminator.input {
            NoiseMode::PerLocation => self.projector_dim,
            NoiseMode::WholeVector => self.projector_dim * self.positions,
        }
    }

    /// Input width of block `k` (1-based).
    pub(crate) fn block_input(&self, k: usize) -> usize {
        if k == 1 {
            self.input_channels
        } else {
            self.encoder[k - 2].width
        }
    }

    /// Compact vector-input model: `widths` encoder blocks with batchnorm and ReLU.
    pub fn mlp(input_dim: usize, widths: &[usize], num_classes: usize, attach_layer: usize, projector_dim: usize) -> Self {
        ModelSpec {
            input_channels: input_dim,
            positions: 1,
            encoder: widths.iter().map(|&w| BlockSpec::new(w)).collect(),
            num_classes,
            attach_layer,
            projector_dim,
            projector_norm: true,
            discriminator: DiscriminatorSpec::default(),
            lambda: 1.0,
        }
    }
}
