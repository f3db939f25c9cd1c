//! Camera pose tracking inside a LiDAR point-cloud map.
//!
//! The pipeline crops a local map around a pose prior, renders a sparse
//! depth map, obtains image-to-depth and image-to-image flows from a
//! [`tracker::FlowProvider`], solves each frame with PnP + RANSAC and then
//! jointly refines adjacent frames under a cross-modal consistency energy.
//!
//! A synthetic world ([`synth`]) and a deterministic flow oracle ([`flow`])
//! make every stage testable without datasets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod joint;
pub mod map;
pub mod pnp;
pub mod render;
pub mod rng;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PixelCoord, PoseSE3, Vec3};
