pub mod assumptions;
pub mod error;
pub mod hjb_pde;
pub mod longrun_affine;
pub mod model;
pub mod simulate;
pub mod spd;

pub use error::{Error, Result};
