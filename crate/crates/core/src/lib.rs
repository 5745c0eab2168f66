mod binio;
pub mod data;
pub mod error;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod par;
pub mod stress_tests;
pub mod tokens;
pub mod training;
pub mod unlearning;

pub use error::{LabError, Result};
