//! Multi-agent 2D/3D rigid registration.
//!
//! The crate is organized bottom-up:
//!
//! - [`se3`]: rigid-motion arithmetic (exp/log, geodesic distance, chordal mean)
//! - [`phantom`]: procedural spine phantoms and volume sampling
//! - [`projection`]: cone-beam camera, DRR ray casting, agent frames, ROIs
//! - [`nn`]: the encoder/decoder reward network and its dilated FCN form
//! - [`mdp`]: actions, rewards and dense ground-truth reward maps
//! - [`dataset`]: phantom datasets with views, input scaling and rod occluders
//! - [`training`]: FCN and per-ROI CNN training loops
//! - [`registration`]: single-agent, multi-agent and refined inference
//! - [`baseline`]: gradient correlation and an annealed random-search optimizer
//! - [`eval`]: TRE/GFR statistics, benchmarks and report files

pub mod baseline;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod mdp;
pub mod nn;
pub mod phantom;
pub mod projection;
pub mod registration;
pub mod se3;
pub mod training;

pub use error::{Error, Result};
