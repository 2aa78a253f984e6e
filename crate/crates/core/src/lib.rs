pub mod adjoint;
pub mod constrained;
pub mod expr;
pub mod forward;
pub mod mollify;
pub mod mp;
pub mod parallel;
pub mod problem;
pub mod regression;
pub mod stats;
