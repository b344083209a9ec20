pub mod analysis;
pub mod autodiff;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objective;
pub mod prompt;
mod seeding;
pub mod trainer;

pub use error::{Error, Result};
