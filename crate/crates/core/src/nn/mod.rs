//! Networks, activations, losses and the momentum-SGD optimizer.

pub mod activation;
pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod optim;

pub use activation::{hhrelu, hhrelu_scalar, hhrelu_slope};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{cross_entropy, cross_entropy_var, softmax, softmax_var};
pub use network::{argmax, Activation, LayerSpec, Network, Param, ParamKind, Preset};
pub use optim::{LrSchedule, OptimizerState, SgdConfig};
