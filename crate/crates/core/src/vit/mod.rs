//! Toy vision-transformer encoder: patch embedding, `depth` post-norm
//! blocks (`Z = LN(MSA(X) + X)`, `B(X) = MLP(Z) + Z`), mean pooling over
//! patches, linear classifier.
//!
//! All forward and backward passes run on a [`crate::tensor::Tape`]; an
//! optional [`QuantContext`] turns every matrix-multiply input into its
//! fake-quantised version.

mod forward;
mod params;
mod train;

pub use forward::{
    accuracy, argmax_rows, batch_gradient, block_forward, collect_activations, mean_loss,
    mean_loss_and_gradient, model_forward, model_forward_samples, msa_forward, per_sample_gradients,
    predict, sample_forward, sample_gradient, split_batch, ActSite, ActivationLog, BatchOutput,
    ForwardTrace, LayerTrace, QuantContext,
};
pub use params::{
    param_specs, weight_counts, BlockSet, ComponentId, ComponentKind, ParamSet, ParamSpec,
    ViTConfig, ViTParams,
};
pub use train::{train_toy, LrSchedule, TrainConfig, TrainError, TrainOutcome, TrainReport};
