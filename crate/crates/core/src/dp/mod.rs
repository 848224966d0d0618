//! Differentially private training: balanced sampling, calibration,
//! accounting and the clipped Gaussian mechanism.

mod accountant;
mod calibrate;
mod mechanism;
mod sampling;

pub use accountant::{default_alpha_grid, dp_epsilon, rdp_epsilon_subsampled, rdp_to_dp, GroupAccount, PrivacyAccount};
pub use calibrate::{calibrate_group_noise, calibrate_sigma, global_noise_multiplier, NoiseCalibration, PrivacySpec};
pub use mechanism::{clip_and_aggregate, clip_and_aggregate_with, clip_in_place, DpSgd, GroupNoise, PrivacyReport};
pub use sampling::{plan_balanced_sampling, poisson_batches, Epoch, SamplingPlan};
