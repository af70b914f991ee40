//! Tucker and block term decompositions: containers, reconstruction,
//! alternating least squares fitting and on-disk archives.

mod als;
pub mod archive;
mod term;

pub use als::{btd_als, hosvd, random_btd, AlsConfig, AlsFit, AlsInit};
pub use term::{BlockTermDecomp, CpForm, ModeRank, TuckerTerm};
