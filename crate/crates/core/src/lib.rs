pub mod autodiff;
pub mod clustering;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod masking;
pub mod par;
pub mod pipeline;
pub mod taskdata;

pub use error::{Error, Result};
