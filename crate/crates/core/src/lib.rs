pub mod dynamics;
pub mod symmetry;
pub mod checks;
pub mod tasks;
pub mod rewards;
pub mod nets;
pub mod env;
pub mod trainer;
pub mod eval;
pub mod composer;
pub mod config;
