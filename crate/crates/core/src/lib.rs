pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod language_guidance;
pub mod losses;
pub mod model;
pub mod params;
pub mod prototypes;
pub mod register_attention;
pub mod rng;

pub use error::{Error, Result};
