//! Residual networks, hand-written backprop, and the SGD trainer.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod spec;
pub mod train;

pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Mode, Param, Relu};
pub use loss::{count_errors, cross_entropy, softmax};
pub use network::{Block, ForwardOutput, Network};
pub use optim::{Sgd, SgdHyper};
pub use spec::{BlockShape, GroupSpec, NetworkSpec};
pub use train::{evaluate, fit, train, train_from_scratch, train_step, AuxLoss, BatchStream, EpochMetrics, TrainConfig};
