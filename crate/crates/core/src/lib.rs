pub mod cmd;
pub mod compositor;
pub mod config;
pub mod congeal;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod imageio;
pub mod keypoints;
pub mod linkgraph;
pub mod nonkey;
pub mod pipeline;
pub mod raster;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{Homography, ParamDelta, Point};
pub use raster::{Mask, Raster};
