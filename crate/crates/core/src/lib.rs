pub mod binio;
pub mod body;
pub mod contact;
pub mod error;
pub mod fixture;
pub mod gscene;
pub mod mathcore;
pub mod objtrack;
pub mod physics;
pub mod pipeline;
pub mod poseref;
pub mod sdfgrid;
pub mod splat;

pub use error::{Error, Result};
