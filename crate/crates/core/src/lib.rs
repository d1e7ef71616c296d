pub mod regress;
pub mod rng;
pub mod synth;
pub mod difficulty;
pub mod position_effects;
pub mod decompose;
pub mod analysis;
pub mod io;
pub mod cli;
