//! Forward and backward kernels shared by the tape and by the oracles.

pub mod activation;
pub mod conv;
pub(crate) mod gemm;
pub mod l2;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{channel_softmax, relu};
pub use conv::conv3x3;
pub use linear::linear_map_1x1;
pub use loss::{cross_entropy, kl_div, KlDivergence};
pub use norm::{batch_norm_eval, batch_norm_train, Mode, RunningStats};
pub use pool::{align_pool, global_avg_pool, pool, PoolKind};
