//! Validation-timing detection pipeline on top of `valtime-core`: WAV and
//! checkpoint formats, synthetic-corpus generation, the stage drivers
//! (unit fitting, SSL pretraining, emotion training, fusion training,
//! evaluation, ablation grids), and the CLI plumbing.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod drivers;
pub mod manifest;
pub mod runlog;
pub mod wav;
