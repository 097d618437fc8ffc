//! Training objectives: the InfoNCE mutual-information term and the
//! baseline-family losses it is added to.

mod baseline;
mod mi;

pub use baseline::{
    ce_linear, ce_proto, loss_cc, loss_dc, loss_fc, loss_fc_with_set, loss_fd, loss_pd, mcl, similar_prototypes,
    softmax_xent, BatchLoss, ConplConfig, CplConfig, LinearLoss, MclLoss, SckdConfig, VecLoss,
};
pub use mi::{combine, info_nce, mi_loss, GradSet, InfoNceOutput, MiLossConfig, Scored};
