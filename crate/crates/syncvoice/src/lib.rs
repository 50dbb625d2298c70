//! File formats, report writers, and the command-line front end for
//! `syncvoice-core`.
//!
//! * [`corpus_file`]: the `SVLB` corpus container with per-record CRC32.
//! * [`checkpoint`]: the `SVCK` checkpoint container.
//! * [`report`]: JSON reports and the ablation CSV.
//! * [`cli`]: subcommands `gen-data`, `train`, `sample`, `eval`, `ablate`,
//!   `grad-check`.

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod corpus_file;
pub mod error;
pub mod report;

pub use error::{AppError, AppResult};
