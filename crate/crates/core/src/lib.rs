//! Two-stage lymph-node metastasis risk ranking.
//!
//! Stage one turns each patient's node patches into a labelled montage and
//! asks a multimodal judge for a ten-feature structured report. Stage two
//! has a text judge compare blinded reports pairwise; net wins (wins minus
//! losses) rank the cohort. The [`evaluation`] module calibrates a cutoff on
//! training patients and scores the held-out ones, and [`simulation`]
//! exercises the ranking machinery against synthetic cohorts with known risk.

pub mod canonical;
pub mod error;
pub mod evaluation;
pub mod judge;
pub mod montage;
pub mod prompting;
pub mod report;
pub mod simulation;
pub mod tournament;

pub use error::{Error, Result};
