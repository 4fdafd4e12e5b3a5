//! Cross-domain mosquito species classification benchmark kit.
//!
//! The pipeline runs from a directory of `S_<species>_D_<domain>_<index>.wav`
//! clips to seen/unseen balanced-accuracy reports:
//!
//! ```text
//! corpus (scan, split) -> dsp (log-mel, standardise) -> model + nn (MTRCNN)
//!     -> train (multi-seed, early stopping) -> eval (BA_seen, BA_unseen, DSG)
//! ```
//!
//! [`synth`] generates small synthetic corpora so the whole chain can be
//! exercised without the real recordings, and [`pipeline`] drives the stages
//! from a configuration file the same way the `cdmsc` command does.

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{Error, Result};
