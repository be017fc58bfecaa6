//! Dynamic cross-attention fusion of audio and visual feature sequences for
//! continuous valence/arousal regression.

pub mod cli;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod numcore;
pub mod synthdata;
pub mod trainer;
