//! Magnetic geodesic flows on conformal disks and attenuated magnetic ray
//! transforms.

pub mod cli;
pub mod config;
pub mod error;
pub mod expr;
pub mod fiber;
pub mod fields;
pub mod flow;
pub mod geometry;
pub mod numerics;
pub mod probes;
pub mod sm;
pub mod transform;
pub mod verify;

pub use error::{Error, Result};
pub use expr::{Expr, C64};
