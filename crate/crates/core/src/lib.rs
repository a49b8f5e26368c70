//! Evaluation toolkit for open-domain dialog agents.

pub mod botkit;
pub mod cli;
pub mod corpus;
pub mod domain;
pub mod embeddings;
pub mod evalserver;
pub mod hybrid;
pub mod io;
pub mod metrics;
pub mod net;
pub mod report;
pub mod selfplay;
