//! The dual-branch encoder: parameters, forward and backward passes,
//! masked-token pretraining and checkpoints.

mod checkpoint;
mod forward;
mod params;
mod pretrain;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    backward, encode, forward, g_phi, lm_head, normalized, stack_g, stack_logits, Encoded, Forward, ForwardCache,
    Upstream,
};
pub use params::{adam_for, adam_update, apply_freeze, EncoderParams, FreezeMask, ModelDims, ParamGroup, TENSOR_COUNT};
pub use pretrain::{mask_example, mlm_loss, pretrain_mlm, EpochStat, MaskedExample, PretrainConfig};
