pub mod arrayio;
pub mod cg;
pub mod cli;
pub mod conv;
pub mod engine;
pub mod error;
pub mod irreps;
pub mod kernelgen;
pub mod oracle;
pub mod random;
pub mod real;
pub mod scheduler;
pub mod tpspec;
pub mod verify;
