//! Sparse recovery with side information.
//!
//! Iterative solvers (ISTA, and SITA for the l1-l1 problem), their unfolded
//! trainable counterparts (LISTA, LeSITA), a coupled-representation
//! autoencoder and a compressed-sensing reconstruction operator built on
//! them, plus the data generation, metrics and file formats used by the
//! `lesita` experiment runner.

pub mod checkpoint;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod params;
pub mod pipelines;
pub mod prox;
pub mod solvers;
pub mod training;
pub mod unfolded;

pub use error::{Error, Result};
