//! Tabular laboratory for offline value operators: expectile V-learning,
//! value-based episodic-memory planning and advantage-weighted policy
//! extraction on deterministic MDPs, plus diagnostics that measure
//! contraction, fixed-point bias and update variance.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod export;
pub mod mdp;
pub mod memory;
pub mod operators;
pub mod policy;
pub mod protocols;
pub mod seeding;
pub mod training;

pub use error::{Result, VemError};
pub use mdp::{TabularMdp, TabularPolicy, ValueTable};
