use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// How projected feature maps are turned into noise-space examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Every spatial location is one example of dimension `d`.
    #[default]
    PerLocation,
    /// The whole projected map of one input is one flattened example.
    WholeVector,
}

/// Noise model: in-distribution spread `sigma_s`, out-of-distribution spread
/// `sigma_o`, noise-space dimension `dim`, and `views` draws per example per class.
///
/// `sigma_s == 0` is the hard-label mode: in-class views are the clean
/// features and receive label 1, out-class views receive label 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_s: f64,
    pub sigma_o: f64,
    pub dim: usize,
    #[serde(default = "default_views")]
    pub views: usize,
    #[serde(default)]
    pub mode: NoiseMode,
}

fn default_views() -> usize {
    1
}

impl NoiseConfig {
    pub fn new(sigma_s: f64, sigma_o: f64, dim: usize) -> Result<Self> {
        let cfg = NoiseConfig {
            sigma_s,
            sigma_o,
            dim,
            views: 1,
            mode: NoiseMode::PerLocation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_views(mut self, views: usize) -> Result<Self> {
        self.views = views;
        self.validate()?;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: NoiseMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s >= 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::invalid(format!("sigma_s must be >= 0, got {}", self.sigma_s)));
        }
        if !(self.sigma_o > self.sigma_s && self.sigma_o.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma_o must exceed sigma_s, got sigma_s={} sigma_o={}",
                self.sigma_s, self.sigma_o
            )));
        }
        if self.dim == 0 {
            return Err(Error::invalid("noise dimension must be >= 1"));
        }
        if self.views == 0 {
            return Err(Error::invalid("views per class must be >= 1"));
        }
        Ok(())
    }

    pub fn hard_labels(&self) -> bool {
        self.sigma_s == 0.0
    }

    /// Noise ratio `sigma_o / sigma_s`.
    pub fn beta(&self) -> Result<f64> {
        if self.hard_labels() {
            return Err(Error::HardLabelMode);
        }
        Ok(self.sigma_o / self.sigma_s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewClass {
    In,
    Out,
}

/// Noise vectors for `2·M·N` views of `N` examples, without the examples themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    /// Row-major `(2MN) × dim` noise.
    pub noise: Vec<f64>,
    pub eps_norm_sq: Vec<f64>,
    pub origin_index: Vec<usize>,
    pub class: Vec<ViewClass>,
    pub dim: usize,
}

impl NoiseDraw {
    /// In-class views first (`m`-major, then example), then out-class views.
    pub fn sample(num_examples: usize, cfg: &NoiseConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let total = 2 * cfg.views * num_examples;
        let mut r = rng::rng(seed);
        let mut noise = Vec::with_capacity(total * cfg.dim);
        let mut eps_norm_sq = Vec::with_capacity(total);
        let mut origin_index = Vec::with_capacity(total);
        let mut class = Vec::with_capacity(total);
        for (kind, sigma) in [(ViewClass::In, cfg.sigma_s), (ViewClass::Out, cfg.sigma_o)] {
            for _ in 0..cfg.views {
                for i in 0..num_examples {
                    let mut sq = 0.0;
                    for _ in 0..cfg.dim {
                        let z: f64 = StandardNormal.sample(&mut r);
                        let e = sigma * z;
                        sq += e * e;
                        noise.push(e);
                    }
                    eps_norm_sq.push(sq);
                    origin_index.push(i);
                    class.push(kind);
                }
            }
        }
        Ok(NoiseDraw {
            noise,
            eps_norm_sq,
            origin_index,
            class,
            dim: cfg.dim,
        })
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    pub fn noise_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.dim, self.noise.clone())
    }
}

/// Noisy copies of a set of examples together with the noise that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyViews {
    pub views: Tensor,
    pub draw: NoiseDraw,
}

impl NoisyViews {
    pub fn eps_norm_sq(&self) -> &[f64] {
        &self.draw.eps_norm_sq
    }

    pub fn class(&self) -> &[ViewClass] {
        &self.draw.class
    }

    pub fn origin_index(&self) -> &[usize] {
        &self.draw.origin_index
    }
}

/// Draws `M` in-class and `M` out-class noisy views of every row of `z`.
pub fn sample_noisy_views(z: &Tensor, cfg: &NoiseConfig, seed: u64) -> Result<NoisyViews> {
    if z.shape().len() != 2 || z.cols() != cfg.dim {
        return Err(Error::ShapeMismatch {
            op: "sample_noisy_views",
            lhs: z.shape().to_vec(),
            rhs: vec![z.rows(), cfg.dim],
        });
    }
    let draw = NoiseDraw::sample(z.rows(), cfg, seed)?;
    let d = cfg.dim;
    let mut data = Vec::with_capacity(draw.noise.len());
    for (k, &i) in draw.origin_index.iter().enumerate() {
        data.extend(z.row(i).iter().zip(&draw.noise[k * d..(k + 1) * d]).map(|(a, e)| a + e));
    }
    Ok(NoisyViews {
        views: Tensor::matrix(draw.len(), d, data)?,
        draw,
    })
}
