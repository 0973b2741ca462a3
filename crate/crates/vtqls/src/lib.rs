//! Classical simulation of variable-time amplitude amplification based
//! quantum linear system solvers, with exact amplitude tracking and
//! instrumented oracle-query accounting.

pub mod encodings;
pub mod numerics;
pub mod precond;
pub mod dinv;
pub mod vtaa;
