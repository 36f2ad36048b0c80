pub mod attrenc;
pub mod checkpoint;
pub mod degrade;
pub mod error;
pub mod flowcore;
pub mod flowedit;
pub mod forge;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
