//! Library half of the `paris` command-line tool; the binary parses
//! arguments and dispatches here.

pub mod commands;
pub mod config;
pub mod output;
