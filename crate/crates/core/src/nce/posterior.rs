//! Closed-form posterior of a noisy view being in-distribution, given only
//! its squared noise norm.

use crate::error::{Error, Result};
use crate::nce::noise::{NoiseConfig, NoisyViews, ViewClass};
use crate::numeric::sigmoid;

/// Per-view targets for the auxiliary discriminator, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelBatch {
    p_tilde: Vec<f64>,
}

impl SoftLabelBatch {
    pub fn new(p_tilde: Vec<f64>) -> Result<Self> {
        if let Some(bad) = p_tilde.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("soft label {bad} outside [0, 1]")));
        }
        Ok(SoftLabelBatch { p_tilde })
    }

    pub fn values(&self) -> &[f64] {
        &self.p_tilde
    }

    pub fn len(&self) -> usize {
        self.p_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_tilde.is_empty()
    }
}

/// Pre-activation log-odds `u = ½(1/σo² − 1/σs²)‖ε‖² + D·ln(σo/σs)`.
pub fn posterior_logit(eps_norm_sq: f64, cfg: &NoiseConfig) -> Result<f64> {
    if cfg.hard_labels() {
        return Err(Error::HardLabelMode);
    }
    let (s, o) = (cfg.sigma_s, cfg.sigma_o);
    Ok(0.5 * (1.0 / (o * o) - 1.0 / (s * s)) * eps_norm_sq + cfg.dim as f64 * (o / s).ln())
}

fn in_range(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v >= f64::MIN_POSITIVE {
        Ok(v)
    } else {
        Err(Error::Range(format!("{name} = {v:e} is not a normal positive float")))
    }
}

/// The posterior as the literal ratio of the two Gaussian kernels.
///
/// Errors when any factor overflows or underflows; use
/// `sigmoid(posterior_logit(..))` in real computations.
pub fn posterior_direct(eps_norm_sq: f64, cfg: &NoiseConfig) -> Result<f64> {
    if cfg.hard_labels() {
        return Err(Error::HardLabelMode);
    }
    let d = cfg.dim as i32;
    let (s, o) = (cfg.sigma_s, cfg.sigma_o);
    let norm_s = in_range("sigma_s^-D", s.powi(-d))?;
    let norm_o = in_range("sigma_o^-D", o.powi(-d))?;
    let ker_s = in_range("exp(-|eps|^2/2 sigma_s^2)", (-eps_norm_sq / (2.0 * s * s)).exp())?;
    let ker_o = in_range("exp(-|eps|^2/2 sigma_o^2)", (-eps_norm_sq / (2.0 * o * o)).exp())?;
    let num = in_range("in-distribution term", norm_s * ker_s)?;
    let other = in_range("out-of-distribution term", norm_o * ker_o)?;
    let den = num + other;
    if !den.is_finite() {
        return Err(Error::Range("denominator overflows".into()));
    }
    Ok(num / den)
}

/// Noise norm at which the posterior equals one half:
/// `r = σsσo·sqrt(2D/(σs² − σo²) · ln(σs/σo))`.
pub fn in_domain_radius(cfg: &NoiseConfig) -> Result<f64> {
    if cfg.hard_labels() {
        return Err(Error::HardLabelMode);
    }
    let (s, o) = (cfg.sigma_s, cfg.sigma_o);
    let radicand = 2.0 * cfg.dim as f64 / (s * s - o * o) * (s / o).ln();
    Ok(s * o * radicand.sqrt())
}

/// Targets for every view: the analytic posterior, or hard 1/0 labels when `sigma_s == 0`.
pub fn soft_labels(views: &NoisyViews, cfg: &NoiseConfig) -> Result<SoftLabelBatch> {
    if views.draw.dim != cfg.dim {
        return Err(Error::ShapeMismatch {
            op: "soft_labels",
            lhs: vec![views.draw.dim],
            rhs: vec![cfg.dim],
        });
    }
    labels_for(&views.draw.eps_norm_sq, &views.draw.class, cfg)
}

pub(crate) fn labels_for(eps_norm_sq: &[f64], class: &[ViewClass], cfg: &NoiseConfig) -> Result<SoftLabelBatch> {
    let p = if cfg.hard_labels() {
        class
            .iter()
            .map(|c| if *c == ViewClass::In { 1.0 } else { 0.0 })
            .collect()
    } else {
        eps_norm_sq
            .iter()
            .map(|&e| posterior_logit(e, cfg).map(sigmoid))
            .collect::<Result<Vec<_>>>()?
    };
    SoftLabelBatch::new(p)
}
