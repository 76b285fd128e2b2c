pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;
