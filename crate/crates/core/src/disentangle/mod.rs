//! Fairness mathematics and the bias-mitigation phase.

mod fair;
mod metrics;

pub use fair::{fair_loss, train_phase2, FairBatch, FairParts, FairnessConfig, Stage, StageWeights};
pub use metrics::{
    cka_linear, cka_transposed, cka_transposed_tape, hsic, projection_directions, sliced_wasserstein,
    sliced_wasserstein_tape, wasserstein_1d,
};
