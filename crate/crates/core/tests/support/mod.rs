//! Test-side oracles and suites shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod suites;
