//! Oracle glue shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod block;
pub mod maps;
pub mod scan;
