pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod selector;
pub mod synthdata;
pub mod training_eval;

pub use error::{Error, Result};
