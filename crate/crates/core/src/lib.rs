//! Two-hand motion toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: quaternions, rigid transforms, capsule distance fields.
//! - [`skeleton`]: the joints-only hand model (shape basis, forward kinematics,
//!   palm sampling, bone lengths).
//! - [`representation`]: canonical normalization and the local/global motion
//!   matrices fed to the diffusion engine.
//! - [`metrics`]: contact potential, interaction and shape losses, penetration,
//!   Fréchet distance and diversity.
//! - [`fitting`]: multi-view triangulation and Levenberg-Marquardt hand fitting.
//! - [`diffusion`]: cosine schedule, DDPM sampling, conditioning and the
//!   closed-form reference denoisers.
//! - [`io`], [`synth`], [`cli`]: file formats, procedural test data and the
//!   command-line front end.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod par;
pub mod representation;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Capsule, Quat, RigidTransform, Vec3};
pub use representation::{HandPair, MotionSequence};
pub use skeleton::{HandParams, JointSet, SkeletonTemplate, TemplatePair};
