//! Library half of the `paracnn` command: each subcommand as a function so
//! it can be driven from tests as well as the binary.

pub mod commands;
pub mod config;
pub mod data;

pub use commands::eval::{eval_files, format_table, scores_json};
pub use commands::generate::{generate, render, GenerateOptions, Generated, OutputFormat};
pub use commands::gradcheck::{gradcheck, GradcheckReport};
pub use commands::make_corpus::{make_corpus, CorpusOptions, CorpusSummary};
pub use commands::train::{train, EpochRecord, TrainOutcome};
pub use config::RunConfig;
