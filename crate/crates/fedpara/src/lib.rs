//! Federated-learning simulation library built around the low-rank Hadamard
//! product parameterization (FedPara) and its personalized variant
//! (pFedPara), with rank verification, parameter counting, and
//! communication-cost accounting.

pub mod accounting;
pub mod config;
pub mod data;
pub mod federation;
pub mod model;
pub mod parameterization;
pub mod seeds;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
