//! Command-line driver: dataset preparation, the two training phases,
//! evaluation and report tables, with run directories that record the
//! lineage of every checkpoint.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;
