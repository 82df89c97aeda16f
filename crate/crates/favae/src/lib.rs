//! File formats, dataset loading and the `favae` command-line driver on top
//! of `favae-core`.

pub mod cli;
pub mod config;
pub mod fsutil;
pub mod manifest;
pub mod pnm;
pub mod report;
pub mod tensor_file;
