//! White-box membership-inference auditing.
//!
//! The pipeline trains a target and a shadow classifier on disjoint data,
//! ranks hidden neurons by how differently they fire on members and
//! non-members, trains attack models on the shadow side over a grid of
//! selection methods and thresholds, stacks the most useful attacks, and
//! finally attributes attack decisions back to input pixels through a
//! cascaded target + attack model.

pub mod attack;
pub mod capture;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod explain;
pub mod figures;
pub mod features;
pub mod io;
pub mod learners;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod selection;
pub mod zoo;

pub use error::{Error, Result};
