//! Holds the book chapters as doc comments so `cargo test` runs their code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub struct Introduction;

#[doc = include_str!("../../../book/src/cli.md")]
pub struct Cli;

#[doc = include_str!("../../../book/src/data.md")]
pub struct Data;

#[doc = include_str!("../../../book/src/model.md")]
pub struct Model;

#[doc = include_str!("../../../book/src/training.md")]
pub struct Training;

#[doc = include_str!("../../../book/src/evaluation.md")]
pub struct Evaluation;
