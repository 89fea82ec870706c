//! Sparse attention transforms viewed as Nadaraya-Watson regression with
//! compact-support kernels, plus a small Memory Mosaics model and the
//! synthetic length-generalization tasks used to train it.

pub mod autodiff;
pub mod harness;
pub mod kernels;
pub mod mosaic;
pub mod regression;
pub mod rng;
pub mod tasks;
pub mod transforms;
