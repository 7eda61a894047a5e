//! Rectified-flow motion generation conditioned on text and skeleton, with
//! inversion-free text editing and intra-structural retargeting.

pub mod bvhio;
pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod flowedit;
pub mod kinematics;
pub mod model;
pub mod numerics;
pub mod synthdata;

pub use error::{Error, Result};
