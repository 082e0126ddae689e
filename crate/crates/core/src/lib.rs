// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod batch_td;
pub mod cfmodel;
pub mod cirl;
pub mod cohort;
pub mod config;
pub mod error;
pub mod evalreport;
pub mod expert;
pub mod history;
pub mod mulearn;
pub mod oncosim;
pub mod pipeline;
pub mod policy;
pub mod policyopt;
pub mod rng;
pub mod seqnet;
pub mod train;

pub use error::{CirlError, Result};
