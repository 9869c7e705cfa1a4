// negated float comparisons deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bellman;
pub mod data;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod funcspace;
pub mod oracle;
pub mod par;
pub mod solver;

pub use error::{Error, Result};
pub use par::Parallelism;
