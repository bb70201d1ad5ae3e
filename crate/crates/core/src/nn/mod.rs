//! Minimal layer engine: tensors flow through a layer graph, gradients flow
//! back, RMSprop applies them.

mod gemm;
pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod ops;
pub mod optim;
pub mod weights;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport};
pub use layer::{sigmoid, Activation, Conv2dSpec, DenseSpec, LayerKind, LayerSpec, Padding, INPUT};
pub use network::{param_name, BackwardFault, Mode, Network, OutputGrad, ParamInfo, Trace};
pub use ops::{conv2d_forward, maxpool2d};
pub use optim::{loss_and_grad, train_step, Loss, OptimizerState, RmsProp, StepOutput};
pub use weights::{load_weights, save_weights, WeightStore};
