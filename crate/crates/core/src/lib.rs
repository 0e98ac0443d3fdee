//! Translation quality estimation with a bilingual expert model.

mod container;
pub mod corpus;
pub mod expert;
pub mod features;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod qe;
pub mod ter;

pub use error::{Error, Result};
