//! Occluded human mesh recovery at desk scale.
//!
//! A toy parametric body ([`body_model`]) renders synthetic occluded scenes
//! ([`synthdata`]). The network extracts pose-guided 2D features
//! ([`extractor`]), lifts them into a voxel grid ([`lifting`]) and regresses
//! body parameters through a refining transformer that samples the grid at
//! predicted joints ([`fusion`]). Training adds joint contrast terms
//! ([`contrast`]) to the L1 supervision ([`objective`]).
//! All differentiation runs on [`diffcore`].

pub mod body_model;
pub mod config;
pub mod contrast;
pub mod evaluate;
pub mod extractor;
pub mod fusion;
pub mod lifting;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod seeding;
pub mod synthdata;
pub mod train;
