//! Test support: scalar oracles, random inputs, and randomized checks that
//! panic with a description of the first mismatch.

pub mod cases;
pub mod oracle;
pub mod random;
