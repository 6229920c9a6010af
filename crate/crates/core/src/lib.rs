//! Linear mixed models for clustered longitudinal data with bootstrap and
//! Wald confidence intervals.

pub mod bootstrap;
pub mod data;
pub mod estimation;
pub mod formula;
pub mod intervals;
pub mod numerics;
pub mod robust;
