//! Structure-aware decomposed neural solvers for integer-constrained
//! programs `minimize f(Hx - y) subject to x_n in A`.

pub mod alphabet;
pub mod bench;
pub mod bounds;
pub mod config;
pub mod detector;
pub mod error;
pub mod io;
pub mod mlp;
pub mod oracle;
pub mod problem;
pub mod seed;

pub use alphabet::IntegerAlphabet;
pub use error::{Error, ErrorCategory, Result};
