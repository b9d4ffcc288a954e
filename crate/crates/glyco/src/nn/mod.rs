//! From-scratch neural network stack: tensors, stacked LSTM with a
//! Gaussian head, exact BPTT gradients, and Adam.

pub mod adam;
pub mod model;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use model::{
    backward, init_params, lstm_cell_forward, nll_loss, stacked_forward, ForwardCache,
    LstmLayerParams, Mode, ModelParams, NetConfig, NnError,
};
pub use tensor::Tensor;
