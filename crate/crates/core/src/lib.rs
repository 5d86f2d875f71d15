//! Channel-attention dense U-Net for multichannel speech enhancement.
//!
//! The crate contains everything needed to train and evaluate the model from
//! scratch: a small reverse-mode autodiff engine ([`autodiff`]), stacked
//! complex tensor operations ([`complex`]), the STFT encoder/decoder
//! ([`stft`]), the channel-attention unit ([`attention`]), the dense U-Net
//! mask estimator ([`network`]), supervised training ([`training`]),
//! synthetic data and WAV I/O ([`data`]), metrics ([`eval`]) and independent
//! brute-force oracles ([`oracles`]).

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod complex;
pub mod config;
pub mod error;
pub mod eval;
pub mod network;
pub mod oracles;
pub mod stft;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
