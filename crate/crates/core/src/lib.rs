//! PPG biometric authentication from (p,q)-plane images.
//!
//! The pipeline: [`signal`] generates and preprocesses PPG records,
//! [`chaos01`] turns 1000-point segments into binary translation-variable
//! images, [`net`] scores image pairs with a Siamese residual CNN, [`eval`]
//! computes verification metrics and [`store`] runs enrollment,
//! verification and identification over persisted templates.

pub mod chaos01;
pub mod cli;
pub mod error;
pub mod eval;
pub mod net;
pub mod signal;
pub mod store;

pub use error::{Error, Result};
