//! Sequential Bayesian inference of 6DoF parallel-jaw grasps from streamed
//! depth observations.

pub mod geom;
pub mod scene;
pub mod camera;
pub mod quality;
pub mod reach;
pub mod filter;
pub mod sim;
