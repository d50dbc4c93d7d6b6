pub mod cli;
pub mod diff;
pub mod error;
pub mod fit;
pub mod image;
pub mod io;
pub mod lighting;
pub mod losses;
pub mod net;
pub mod raster;
pub mod render;
pub mod scene;
pub mod service;
pub mod synth;

pub use error::{Error, Result};
