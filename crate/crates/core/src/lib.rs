pub mod agent;
pub mod density;
pub mod envsim;
pub mod error;
pub mod experiment;
pub mod goexplore;
pub mod latent;
pub mod lge;
pub mod metrics;
pub mod replay;
pub mod rollout;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
