//! Noise-contrastive mathematics: kernel density estimates, the analytic
//! posterior used as soft labels, the two losses, and noise-ratio selection.

pub mod beta;
pub mod kde;
pub mod loss;
pub mod noise;
pub mod posterior;

pub use beta::{expected_label, expected_logit, select_beta};
pub use kde::{kde_density, kde_log_density, kde_nll, kde_posterior};
pub use loss::{aux_loss, test_loss};
pub use noise::{sample_noisy_views, NoiseConfig, NoiseDraw, NoiseMode, NoisyViews, ViewClass};
pub use posterior::{in_domain_radius, posterior_direct, posterior_logit, soft_labels, SoftLabelBatch};
