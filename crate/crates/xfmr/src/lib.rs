//! Command-line driver for the `crossformer` crate: structural reports,
//! verification suites, toy training and diagnostic traces.

pub mod checks;
pub mod cli;
pub mod report;
pub mod toy;
pub mod train;
