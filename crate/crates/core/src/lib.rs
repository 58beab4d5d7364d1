//! Persistent-excitation training and margin analysis for small feedforward
//! networks.

pub mod linalg;
pub mod net;
pub mod data_io;
pub mod optim;
pub mod bounds;
pub mod equiv;
pub mod robust;
