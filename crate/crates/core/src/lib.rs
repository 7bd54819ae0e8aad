pub mod error;
pub mod expr;
pub mod bundlecalc;
pub mod cli;
pub mod geodesics;
pub mod geometry;
pub mod identities;
pub mod inversion;
pub mod jet;
pub mod linalg;
pub mod quadrature;
pub mod tensorfield;
pub mod xray;

pub use error::{Error, Result};
