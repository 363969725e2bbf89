//! Experiment driver for the generative robust classifier toolkit.
//!
//! One TOML file describes a full experiment; the stage commands in
//! [`stages`] and [`figures`] run it piece by piece under a run directory,
//! recording everything they produce in a [`manifest::RunManifest`]. The
//! `genrc` binary exposes the stages as subcommands.

pub mod config;
pub mod figures;
pub mod manifest;
pub mod plot;
pub mod stages;
