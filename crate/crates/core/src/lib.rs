//! Numerics for the magnetic Aharonov–Bohm phase computed three ways, the
//! coherent state of the field driven by the electron, and the decoherence
//! exponent of the two traverse states.

pub mod decoherence;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod modes;
pub mod phases;
pub mod quadrature;

pub use error::{Error, Result};
