pub mod cli;
pub mod config;
pub mod coupling;
pub mod data;
pub mod diffcore;
pub mod eval;
pub mod haar;
pub mod model;
pub mod train;
