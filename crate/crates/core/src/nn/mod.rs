//! Reverse-mode autodiff over dense float64 tensors and the layer set the
//! enhancement networks are built from.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod macs;
pub mod norm;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::{chomp_time, conv2d, deconv2d};
pub use layers::{linear, lstm_forward, Layer, LayerSpec, LstmParams};
pub use norm::{batch_norm, gln, normalize_pairs, BnMode, RunningStats};
pub use params::{Binding, Param, ParamStore};
pub use tensor::Tensor;
