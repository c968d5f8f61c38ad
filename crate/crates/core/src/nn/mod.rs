//! Small differentiable CNN classifiers with hand-written reverse-mode gradients.

mod layers;
mod model;
mod tensor;
mod train;

pub use layers::{Conv2d, Dense, Depthwise, Layer, Standardize};
pub use model::{
    argmax, load_model, load_model_as, save_model, softmax, softmax_cross_entropy, Arch, Classifier, Evaluation, ParamGrads,
};
pub use tensor::Tensor;
pub use train::{accuracy, channel_stats, train, train_with_log, EpochStats, TrainConfig};
