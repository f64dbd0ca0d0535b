//! Convolutional reward network: two encoders and a joint decoder, runnable
//! per ROI (strided CNN) or densely over whole images (dilated FCN).

pub mod checkpoint;
pub mod conv;
pub mod network;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use conv::{selu, Conv2d, LayerKind, LayerSpec};
pub use network::{
    expand_rewards, DenseSample, Form, Gradients, NetworkConfig, PolicyNetwork, RoiSample, Sample,
    ShiftTarget, Stream, ACTION_COUNT,
};
pub use optim::{train_step, Optimizer, OptimizerConfig};
pub use tensor::{shift_feature_map, Tensor};
