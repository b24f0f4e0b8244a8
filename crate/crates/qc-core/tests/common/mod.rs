//! Shared generators for integration tests.
#![allow(unused_imports)]

pub use qc_core::random::*;
