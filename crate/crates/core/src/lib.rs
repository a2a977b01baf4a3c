pub mod analysis;
pub mod cca;
pub mod convdft;
pub mod error;
pub mod experiments;
pub mod fixtures;
pub mod flops;
pub mod linalg;
pub mod par;
pub mod report;
pub mod svcca;
pub mod tensorio;
pub mod toynet;

pub use error::{Error, Result};
