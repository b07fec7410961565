pub mod autodiff;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod ger;
pub mod hfcdf;
pub mod hyp_text;
pub mod mwer;
pub mod naae_asr;
pub mod nn;
pub mod speech_sim;
pub mod trainer;

pub use error::{Error, Result};
