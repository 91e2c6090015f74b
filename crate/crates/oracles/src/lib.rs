//! Reference implementations written against plain slices, with no
//! dependency on the engine they check. Everything here favours being
//! obviously correct over being fast.

pub mod block;
pub mod image;
pub mod metrics;
pub mod quadrature;
